#include "cpcanet/fg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cpcanet/errors.hpp"

namespace cpcanet {

namespace {

// Closest-to-identity Jacobi rotation annihilating the off-diagonal of a
// symmetric 2x2 [[hpp, hpq], [hpq, hqq]]; returns (c, s) with
// [c s; -s c]^T H [c s; -s c] diagonal and |angle| <= pi/4.
std::pair<double, double> symmetric_schur(double hpp, double hqq, double hpq) {
    if (hpq == 0.0) return {1.0, 0.0};
    const double tau = (hqq - hpp) / (2.0 * hpq);
    const double t = tau >= 0.0 ? 1.0 / (tau + std::sqrt(1.0 + tau * tau))
                                : 1.0 / (tau - std::sqrt(1.0 + tau * tau));
    const double c = 1.0 / std::sqrt(1.0 + t * t);
    return {c, t * c};
}

double column_quadratic(const Matrix& s, const Matrix& basis, std::size_t col) {
    const std::size_t d = basis.rows();
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < d; ++j) row += s(i, j) * basis(j, col);
        acc += basis(i, col) * row;
    }
    return acc;
}

double pair_cross(const Matrix& s, const Matrix& basis, std::size_t l, std::size_t m) {
    const std::size_t d = basis.rows();
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < d; ++j) row += s(i, j) * basis(j, m);
        acc += basis(i, l) * row;
    }
    return acc;
}

}  // namespace

FgResult fg_fit(const CovarianceSet& covs, const FgConfig& config) {
    const std::size_t d = covs.dim();
    const std::size_t k_count = covs.size();
    if (d < 2) throw DimensionTooSmall("fg_fit: need d >= 2");

    Matrix basis = Matrix::identity(d);
    std::size_t sweeps = 0;
    double max_rotation = 0.0;

    for (; sweeps < config.max_sweeps; ++sweeps) {
        max_rotation = 0.0;
        for (std::size_t l = 0; l + 1 < d; ++l) {
            for (std::size_t m = l + 1; m < d; ++m) {
                // 2x2 pencil of the weighted stationarity condition at the
                // current basis, restricted to the (l, m) column plane.
                double hll = 0.0, hmm = 0.0, hlm = 0.0;
                for (std::size_t k = 0; k < k_count; ++k) {
                    const Matrix& s = covs.domain(k).matrix();
                    const double lam_l =
                        std::max(column_quadratic(s, basis, l), config.lambda_floor);
                    const double lam_m =
                        std::max(column_quadratic(s, basis, m), config.lambda_floor);
                    const double c =
                        covs.weight(k) * (lam_l - lam_m) / (lam_l * lam_m + config.lambda_floor);
                    if (c == 0.0) continue;
                    hll += c * lam_l;
                    hmm += c * lam_m;
                    hlm += c * pair_cross(s, basis, l, m);
                }
                const auto [c, s] = symmetric_schur(hll, hmm, hlm);
                if (s == 0.0) continue;
                max_rotation = std::max(max_rotation, std::fabs(std::atan2(s, c)));
                for (std::size_t i = 0; i < d; ++i) {
                    const double bl = basis(i, l), bm = basis(i, m);
                    basis(i, l) = c * bl - s * bm;
                    basis(i, m) = s * bl + c * bm;
                }
            }
        }
        if (max_rotation < config.tol) {
            ++sweeps;
            break;
        }
    }

    // Column order: descending weighted variance, index-ascending on ties.
    std::vector<double> weighted(d, 0.0);
    for (std::size_t l = 0; l < d; ++l) {
        for (std::size_t k = 0; k < k_count; ++k) {
            weighted[l] +=
                covs.weight(k) * column_quadratic(covs.domain(k).matrix(), basis, l);
        }
    }
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return weighted[a] > weighted[b]; });

    Matrix arranged(d, d);
    for (std::size_t l = 0; l < d; ++l) {
        const std::size_t src = order[l];
        std::size_t peak = 0;
        for (std::size_t i = 1; i < d; ++i) {
            if (std::fabs(basis(i, src)) > std::fabs(basis(peak, src))) peak = i;
        }
        const double flip = basis(peak, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < d; ++i) arranged(i, l) = flip * basis(i, src);
    }
    // The sign convention can land on a reflection; fold it back into the
    // rotation group through the last (lowest-variance) column.
    if (determinant(arranged) < 0.0) {
        for (std::size_t i = 0; i < d; ++i) arranged(i, d - 1) = -arranged(i, d - 1);
    }

    OrthogonalBasis final_basis(arranged);
    Matrix lambdas(k_count, d);
    for (std::size_t k = 0; k < k_count; ++k) {
        for (std::size_t l = 0; l < d; ++l) {
            lambdas(k, l) = column_quadratic(covs.domain(k).matrix(), arranged, l);
        }
    }
    return FgResult{std::move(final_basis), std::move(lambdas), sweeps, max_rotation};
}

double ml_residual(const OrthogonalBasis& basis, const CovarianceSet& covs,
                   double lambda_floor) {
    const std::size_t d = covs.dim();
    if (basis.dim() != d) throw ShapeMismatch("ml_residual: basis dim mismatch");
    const Matrix& b = basis.matrix();

    Matrix lambdas(covs.size(), d);
    for (std::size_t k = 0; k < covs.size(); ++k)
        for (std::size_t l = 0; l < d; ++l)
            lambdas(k, l) = column_quadratic(covs.domain(k).matrix(), b, l);

    double worst = 0.0;
    for (std::size_t l = 0; l < d; ++l) {
        for (std::size_t m = 0; m < d; ++m) {
            if (l == m) continue;
            double acc = 0.0;
            for (std::size_t k = 0; k < covs.size(); ++k) {
                const double lam_l = std::max(lambdas(k, l), lambda_floor);
                const double lam_m = std::max(lambdas(k, m), lambda_floor);
                const double c =
                    covs.weight(k) * (lam_l - lam_m) / (lam_l * lam_m + lambda_floor);
                acc += c * pair_cross(covs.domain(k).matrix(), b, l, m);
            }
            worst = std::max(worst, std::fabs(acc));
        }
    }
    return worst;
}

double negloglik(const OrthogonalBasis& basis, const CovarianceSet& covs, double lambda_floor) {
    const std::size_t d = covs.dim();
    if (basis.dim() != d) throw ShapeMismatch("negloglik: basis dim mismatch");
    double j = 0.0;
    for (std::size_t k = 0; k < covs.size(); ++k) {
        double inner = 0.0;
        for (std::size_t l = 0; l < d; ++l) {
            const double lam =
                std::max(column_quadratic(covs.domain(k).matrix(), basis.matrix(), l), lambda_floor);
            inner += std::log(lam);
        }
        j += covs.weight(k) * inner;
    }
    return j;
}

Matrix transformed_variances(const OrthogonalBasis& basis, const CovarianceSet& covs) {
    const std::size_t d = covs.dim();
    Matrix lambdas(covs.size(), d);
    for (std::size_t k = 0; k < covs.size(); ++k)
        for (std::size_t l = 0; l < d; ++l)
            lambdas(k, l) = column_quadratic(covs.domain(k).matrix(), basis.matrix(), l);
    return lambdas;
}

}  // namespace cpcanet
