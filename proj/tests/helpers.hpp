#pragma once

#include <cmath>
#include <vector>

#include "cpcanet/data.hpp"
#include "cpcanet/linalg.hpp"
#include "cpcanet/rng.hpp"

namespace cpcanet::testing {

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0,
                            double hi = 1.0) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

inline SkewMatrix random_skew(Rng& rng, std::size_t d, double scale = 1.0) {
    Matrix m(d, d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i + 1; j < d; ++j) {
            const double v = scale * rng.uniform(-1.0, 1.0);
            m(i, j) = v;
            m(j, i) = -v;
        }
    }
    return SkewMatrix(std::move(m));
}

inline OrthogonalBasis random_rotation(Rng& rng, std::size_t d) {
    return cayley(random_skew(rng, d, 1.5));
}

/// Well-conditioned random PSD with spectrum in [lo, hi].
inline CovarianceMatrix random_psd(Rng& rng, std::size_t d, double lo = 0.5, double hi = 5.0) {
    const OrthogonalBasis q = random_rotation(rng, d);
    Matrix s(d, d, 0.0);
    for (std::size_t l = 0; l < d; ++l) {
        const double lam = rng.uniform(lo, hi);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                s(i, j) += lam * q.matrix()(i, l) * q.matrix()(j, l);
    }
    return CovarianceMatrix(symmetrize(s));
}

inline CovarianceSet random_covariance_set(Rng& rng, std::size_t d, std::size_t k_count,
                                           double weight_lo = 0.5, double weight_hi = 2.0) {
    std::vector<CovarianceMatrix> domains;
    std::vector<double> weights;
    for (std::size_t k = 0; k < k_count; ++k) {
        domains.push_back(random_psd(rng, d));
        weights.push_back(rng.uniform(weight_lo, weight_hi));
    }
    return CovarianceSet(std::move(domains), std::move(weights));
}

/// Greedy signed-permutation match: worst angle (radians) between each truth
/// column and its best-aligned recovered column. Returns a large sentinel if
/// the assignment is not one-to-one.
inline double signed_permutation_angle(const Matrix& truth, const Matrix& recovered) {
    const std::size_t d = truth.cols();
    std::vector<bool> used(d, false);
    double worst = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        std::size_t best = d;
        double best_dot = -1.0;
        for (std::size_t i = 0; i < d; ++i) {
            if (used[i]) continue;
            double dot = 0.0;
            for (std::size_t a = 0; a < d; ++a) dot += truth(a, j) * recovered(a, i);
            if (std::fabs(dot) > best_dot) {
                best_dot = std::fabs(dot);
                best = i;
            }
        }
        if (best == d) return 10.0;
        used[best] = true;
        worst = std::max(worst, std::atan2(std::sqrt(std::max(0.0, 1.0 - best_dot * best_dot)),
                                           best_dot));
    }
    return worst;
}

}  // namespace cpcanet::testing
