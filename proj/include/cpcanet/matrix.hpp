#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace cpcanet {

/// Dense row-major float64 matrix. The only carrier type used by the
/// numerical kernels; scalars travel as 1x1 matrices inside the tape.
class Matrix {
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool all_finite() const;

    void fill(double v);

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix scale(const Matrix& a, double c);
Matrix symmetrize(const Matrix& a);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double sum_entries(const Matrix& m);

/// Mean normalized off-diagonal energy: (|M|_F^2 - |diag M|_F^2) / (d(d-1)).
/// Throws DimensionTooSmall for d < 2 and ShapeMismatch for non-square input.
double offdiag_energy(const Matrix& m);

/// LU with partial pivoting. Factor once, solve many right-hand sides;
/// also the determinant route (product of pivots with permutation sign).
class LuFactorization {
  public:
    explicit LuFactorization(const Matrix& a);

    Matrix solve(const Matrix& b) const;
    Matrix solve_transposed(const Matrix& b) const;  // solves A^T x = b
    double determinant() const;
    bool singular() const { return singular_; }

  private:
    Matrix lu_;
    std::vector<std::size_t> perm_;
    int sign_ = 1;
    bool singular_ = false;
};

/// A^{-1} B by partial-pivot LU. Throws SingularMatrix on a zero pivot.
Matrix solve_lu(const Matrix& a, const Matrix& b);
double determinant(const Matrix& a);

/// Attempted Cholesky of m + shift*I; true when it succeeds, i.e. the
/// smallest eigenvalue is no less than -shift up to roundoff.
bool is_psd_within(const Matrix& m, double shift);

/// Orthonormal factor of a Householder QR with the R diagonal forced
/// non-negative. Input must have rows >= cols.
Matrix qr_orthonormal(const Matrix& g);

}  // namespace cpcanet
