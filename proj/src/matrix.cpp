#include "cpcanet/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpcanet/errors.hpp"

namespace cpcanet {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeMismatch(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeMismatch("Matrix initializer: ragged rows");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix operator+(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeMismatch("matmul: " + shape_str(a) + " * " + shape_str(b));
    }
    Matrix out(a.rows(), b.cols(), 0.0);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b.data() + l * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

Matrix scale(const Matrix& a, double c) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = c * a.data()[i];
    return out;
}

Matrix symmetrize(const Matrix& a) {
    if (a.rows() != a.cols()) throw ShapeMismatch("symmetrize: " + shape_str(a));
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = 0.5 * (a(i, j) + a(j, i));
    return out;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i] * m.data()[i];
    return std::sqrt(s);
}

double max_abs(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s = std::max(s, std::fabs(m.data()[i]));
    return s;
}

double sum_entries(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i];
    return s;
}

double offdiag_energy(const Matrix& m) {
    if (m.rows() != m.cols()) throw ShapeMismatch("offdiag_energy: " + shape_str(m));
    const std::size_t d = m.rows();
    if (d < 2) throw DimensionTooSmall("offdiag_energy: need d >= 2, got d = " + std::to_string(d));
    double total = 0.0, diag = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double v = m(i, j);
            total += v * v;
            if (i == j) diag += v * v;
        }
    }
    return (total - diag) / static_cast<double>(d * (d - 1));
}

LuFactorization::LuFactorization(const Matrix& a) {
    if (a.rows() != a.cols()) throw ShapeMismatch("lu: " + shape_str(a));
    const std::size_t n = a.rows();
    lu_ = a;
    perm_.resize(n);
    for (std::size_t i = 0; i < n; ++i) perm_[i] = i;

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        double best = std::fabs(lu_(col, col));
        for (std::size_t r = col + 1; r < n; ++r) {
            const double v = std::fabs(lu_(r, col));
            if (v > best) {
                best = v;
                pivot = r;
            }
        }
        if (best == 0.0) {
            singular_ = true;
            continue;
        }
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(lu_(col, j), lu_(pivot, j));
            std::swap(perm_[col], perm_[pivot]);
            sign_ = -sign_;
        }
        const double d = lu_(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = lu_(r, col) / d;
            lu_(r, col) = f;
            for (std::size_t j = col + 1; j < n; ++j) lu_(r, j) -= f * lu_(col, j);
        }
    }
}

Matrix LuFactorization::solve(const Matrix& b) const {
    if (singular_) throw SingularMatrix("lu solve: singular matrix");
    const std::size_t n = lu_.rows();
    if (b.rows() != n) throw ShapeMismatch("lu solve: rhs rows " + std::to_string(b.rows()));
    Matrix x(n, b.cols());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) x(i, j) = b(perm_[i], j);
    // forward: L y = P b, unit diagonal
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t k = 0; k < i; ++k) {
            const double f = lu_(i, k);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) -= f * x(k, j);
        }
    // backward: U x = y
    for (std::size_t ii = n; ii-- > 0;) {
        for (std::size_t k = ii + 1; k < n; ++k) {
            const double f = lu_(ii, k);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < x.cols(); ++j) x(ii, j) -= f * x(k, j);
        }
        const double d = lu_(ii, ii);
        for (std::size_t j = 0; j < x.cols(); ++j) x(ii, j) /= d;
    }
    return x;
}

Matrix LuFactorization::solve_transposed(const Matrix& b) const {
    if (singular_) throw SingularMatrix("lu solve_transposed: singular matrix");
    const std::size_t n = lu_.rows();
    if (b.rows() != n) throw ShapeMismatch("lu solve_transposed: rhs rows " + std::to_string(b.rows()));
    // A = P^T L U  =>  A^T = U^T L^T P. Solve U^T z = b, L^T w = z, x = P^T w.
    Matrix z = b;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = lu_(i, i);
        for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) /= d;
        for (std::size_t k = i + 1; k < n; ++k) {
            const double f = lu_(i, k);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < z.cols(); ++j) z(k, j) -= f * z(i, j);
        }
    }
    for (std::size_t ii = n; ii-- > 0;) {
        for (std::size_t k = 0; k < ii; ++k) {
            const double f = lu_(ii, k);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < z.cols(); ++j) z(k, j) -= f * z(ii, j);
        }
    }
    Matrix x(n, b.cols());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) x(perm_[i], j) = z(i, j);
    return x;
}

double LuFactorization::determinant() const {
    if (singular_) return 0.0;
    double det = static_cast<double>(sign_);
    for (std::size_t i = 0; i < lu_.rows(); ++i) det *= lu_(i, i);
    return det;
}

Matrix solve_lu(const Matrix& a, const Matrix& b) { return LuFactorization(a).solve(b); }

double determinant(const Matrix& a) { return LuFactorization(a).determinant(); }

bool is_psd_within(const Matrix& m, double shift) {
    if (m.rows() != m.cols()) throw ShapeMismatch("is_psd_within: " + shape_str(m));
    const std::size_t n = m.rows();
    double diag_scale = 1.0;
    for (std::size_t i = 0; i < n; ++i) diag_scale = std::max(diag_scale, std::fabs(m(i, i)));
    const double eps_slack = 64.0 * 2.220446049250313e-16 * diag_scale;
    Matrix a = m;
    for (std::size_t i = 0; i < n; ++i) a(i, i) += shift + eps_slack;
    // in-place lower Cholesky; failure <=> a non-positive pivot
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (d <= 0.0) return false;
        const double root = std::sqrt(d);
        a(j, j) = root;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = a(i, j);
            for (std::size_t k = 0; k < j; ++k) v -= a(i, k) * a(j, k);
            a(i, j) = v / root;
        }
    }
    return true;
}

Matrix qr_orthonormal(const Matrix& g) {
    const std::size_t m = g.rows(), n = g.cols();
    if (m < n) throw ShapeMismatch("qr_orthonormal: rows < cols");
    Matrix r = g;
    std::vector<Matrix> reflectors;
    reflectors.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < m; ++i) norm += r(i, k) * r(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) throw SingularMatrix("qr_orthonormal: rank-deficient input");
        Matrix v(m, 1, 0.0);
        const double alpha = r(k, k) >= 0.0 ? -norm : norm;
        v(k, 0) = r(k, k) - alpha;
        for (std::size_t i = k + 1; i < m; ++i) v(i, 0) = r(i, k);
        double vnorm2 = 0.0;
        for (std::size_t i = k; i < m; ++i) vnorm2 += v(i, 0) * v(i, 0);
        if (vnorm2 > 0.0) {
            for (std::size_t j = k; j < n; ++j) {
                double dot = 0.0;
                for (std::size_t i = k; i < m; ++i) dot += v(i, 0) * r(i, j);
                const double f = 2.0 * dot / vnorm2;
                for (std::size_t i = k; i < m; ++i) r(i, j) -= f * v(i, 0);
            }
        }
        reflectors.push_back(std::move(v));
    }
    // Accumulate Q = H_0 ... H_{n-1} applied to the leading identity block.
    Matrix q(m, n, 0.0);
    for (std::size_t j = 0; j < n; ++j) q(j, j) = 1.0;
    for (std::size_t kk = n; kk-- > 0;) {
        const Matrix& v = reflectors[kk];
        double vnorm2 = 0.0;
        for (std::size_t i = kk; i < m; ++i) vnorm2 += v(i, 0) * v(i, 0);
        if (vnorm2 == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = kk; i < m; ++i) dot += v(i, 0) * q(i, j);
            const double f = 2.0 * dot / vnorm2;
            for (std::size_t i = kk; i < m; ++i) q(i, j) -= f * v(i, 0);
        }
    }
    // Sign-correct so the implicit R has a non-negative diagonal.
    for (std::size_t k = 0; k < n; ++k) {
        if (r(k, k) < 0.0) {
            for (std::size_t i = 0; i < m; ++i) q(i, k) = -q(i, k);
        }
    }
    return q;
}

}  // namespace cpcanet
