#include "cpcanet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpcanet/errors.hpp"

namespace cpcanet {

namespace {

double max_asymmetry(const Matrix& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j)
            worst = std::max(worst, std::fabs(m(i, j) - m(j, i)));
    return worst;
}

double max_skew_defect(const Matrix& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i; j < m.cols(); ++j)
            worst = std::max(worst, std::fabs(m(i, j) + m(j, i)));
    return worst;
}

// Value-sorted accumulation: bitwise independent of the addend order.
double sorted_sum(std::vector<double>& buf) {
    std::sort(buf.begin(), buf.end());
    double s = 0.0;
    for (const double v : buf) s += v;
    return s;
}

}  // namespace

CovarianceMatrix::CovarianceMatrix(Matrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() == 0) {
        throw ShapeMismatch("CovarianceMatrix: need square non-empty matrix");
    }
    if (!m_.all_finite()) throw InvariantViolation("CovarianceMatrix: non-finite entries");
    const double asym = max_asymmetry(m_);
    if (asym > kSymmetryTol) {
        throw InvariantViolation("CovarianceMatrix: asymmetry " + std::to_string(asym));
    }
    if (!is_psd_within(m_, kPsdTol)) {
        throw InvariantViolation("CovarianceMatrix: eigenvalue below -1e-10");
    }
}

CovarianceSet::CovarianceSet(std::vector<CovarianceMatrix> domains, std::vector<double> weights)
    : domains_(std::move(domains)), weights_(std::move(weights)) {
    if (domains_.empty()) throw InvariantViolation("CovarianceSet: K >= 1 required");
    if (domains_.size() != weights_.size()) {
        throw ShapeMismatch("CovarianceSet: weight count mismatch");
    }
    const std::size_t d = domains_.front().dim();
    for (const auto& c : domains_) {
        if (c.dim() != d) throw ShapeMismatch("CovarianceSet: mixed dimensions");
    }
    for (const double w : weights_) {
        if (!(w > 0.0)) throw InvariantViolation("CovarianceSet: weights must be positive");
    }
}

SkewMatrix::SkewMatrix(Matrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() == 0) {
        throw ShapeMismatch("SkewMatrix: need square non-empty matrix");
    }
    if (!m_.all_finite()) throw InvariantViolation("SkewMatrix: non-finite entries");
    const double defect = max_skew_defect(m_);
    if (defect > kSkewTol) {
        throw InvariantViolation("SkewMatrix: skew defect " + std::to_string(defect));
    }
}

OrthogonalBasis::OrthogonalBasis(Matrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols() || m_.rows() == 0) {
        throw ShapeMismatch("OrthogonalBasis: need square non-empty matrix");
    }
    if (!m_.all_finite()) throw InvariantViolation("OrthogonalBasis: non-finite entries");
    const Matrix gram = matmul(transpose(m_), m_);
    const double defect = frobenius_norm(gram - Matrix::identity(m_.rows()));
    if (defect > kOrthogonalityTol) {
        throw InvariantViolation("OrthogonalBasis: |B^T B - I|_F = " + std::to_string(defect));
    }
    const double det = determinant(m_);
    if (std::fabs(det - 1.0) > kDeterminantTol) {
        throw InvariantViolation("OrthogonalBasis: det = " + std::to_string(det));
    }
}

CovarianceMatrix covariance(const Matrix& samples) {
    const std::size_t n = samples.rows(), d = samples.cols();
    if (n < 2) throw DegenerateBatch("covariance: need N >= 2, got N = " + std::to_string(n));
    if (!samples.all_finite()) throw InvariantViolation("covariance: non-finite samples");

    std::vector<double> buf(n);
    Matrix mean(1, d);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = samples(i, j);
        mean(0, j) = sorted_sum(buf) / static_cast<double>(n);
    }

    Matrix cov(d, d);
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                buf[i] = (samples(i, a) - mean(0, a)) * (samples(i, b) - mean(0, b));
            }
            const double v = sorted_sum(buf) / static_cast<double>(n - 1);
            cov(a, b) = v;
            cov(b, a) = v;
        }
    }
    return CovarianceMatrix(symmetrize(cov));
}

OrthogonalBasis cayley(const SkewMatrix& a) {
    const std::size_t d = a.dim();
    Matrix plus = Matrix::identity(d);
    Matrix minus = Matrix::identity(d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            plus(i, j) += 0.5 * a.matrix()(i, j);
            minus(i, j) -= 0.5 * a.matrix()(i, j);
        }
    }
    // (I + A/2) is nonsingular for skew A: its eigenvalues are 1 + i*theta/2.
    return OrthogonalBasis(solve_lu(plus, minus));
}

}  // namespace cpcanet
