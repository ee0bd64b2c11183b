#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "cpcanet/matrix.hpp"

namespace cpcanet {

// Validation tolerances shared by the structured matrix types.
inline constexpr double kSymmetryTol = 1e-12;       // absolute, entrywise
inline constexpr double kPsdTol = 1e-10;            // eigenvalue floor
inline constexpr double kOrthogonalityTol = 1e-10;  // |B^T B - I|_F
inline constexpr double kDeterminantTol = 1e-8;     // |det - 1|
inline constexpr double kSkewTol = 1e-12;           // absolute, entrywise

/// Symmetric PSD (up to roundoff) d x d matrix. Construction validates.
class CovarianceMatrix {
  public:
    explicit CovarianceMatrix(Matrix m);

    std::size_t dim() const { return m_.rows(); }
    const Matrix& matrix() const { return m_; }

  private:
    Matrix m_;
};

/// K weighted covariances of a common dimension; the solver input.
class CovarianceSet {
  public:
    CovarianceSet(std::vector<CovarianceMatrix> domains, std::vector<double> weights);

    std::size_t dim() const { return domains_.front().dim(); }
    std::size_t size() const { return domains_.size(); }
    const CovarianceMatrix& domain(std::size_t k) const { return domains_[k]; }
    double weight(std::size_t k) const { return weights_[k]; }
    const std::vector<double>& weights() const { return weights_; }

  private:
    std::vector<CovarianceMatrix> domains_;
    std::vector<double> weights_;
};

/// M = -M^T to within 1e-12; the tangent-space parameterization.
class SkewMatrix {
  public:
    explicit SkewMatrix(Matrix m);
    static SkewMatrix zero(std::size_t d) { return SkewMatrix(Matrix(d, d, 0.0)); }

    std::size_t dim() const { return m_.rows(); }
    const Matrix& matrix() const { return m_; }

  private:
    Matrix m_;
};

/// B^T B = I and det B = +1 to within tolerance; the common basis.
class OrthogonalBasis {
  public:
    explicit OrthogonalBasis(Matrix m);
    static OrthogonalBasis identity(std::size_t d) { return OrthogonalBasis(Matrix::identity(d)); }

    std::size_t dim() const { return m_.rows(); }
    const Matrix& matrix() const { return m_; }

  private:
    Matrix m_;
};

/// Unbiased sample covariance of N x d samples (rows are samples).
/// Entry sums are accumulated in value-sorted order, so the result is
/// bitwise invariant under row permutations. Throws DegenerateBatch for N < 2.
CovarianceMatrix covariance(const Matrix& samples);

/// (I - A/2)(I + A/2)^{-1} computed as a linear solve; the two factors
/// commute, so solve(I + A/2, I - A/2) is the same map.
OrthogonalBasis cayley(const SkewMatrix& a);

}  // namespace cpcanet
