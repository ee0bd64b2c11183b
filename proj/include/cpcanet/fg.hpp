#pragma once

#include <cstddef>
#include <vector>

#include "cpcanet/linalg.hpp"

namespace cpcanet {

struct FgConfig {
    double tol = 1e-10;         // radians; sweep converges below this rotation
    std::size_t max_sweeps = 100;
    double lambda_floor = 1e-10;  // clamp for reciprocals and logs
};

struct FgResult {
    OrthogonalBasis basis;
    Matrix lambdas;  // K x d, lambdas(k, l) = [B^T S_k B]_{ll}
    std::size_t sweeps_used = 0;
    double final_max_rotation = 0.0;

    bool converged(const FgConfig& config) const {
        return final_max_rotation < config.tol;
    }
};

/// Pairwise-rotation estimate of the common basis. Sweeps column pairs
/// (l, m) in lexicographic order; per pair the transformed variances are
/// recomputed from the current basis, the weighted 2x2 pencil is formed and
/// annihilated with the rotation closest to the identity (angle in
/// (-pi/4, pi/4]). Stops when the largest rotation of a sweep drops below
/// config.tol. Columns are ordered by descending weighted variance and
/// sign-fixed; the result always satisfies the OrthogonalBasis invariants,
/// converged or not.
FgResult fg_fit(const CovarianceSet& covs, const FgConfig& config = {});

/// Largest off-diagonal stationarity defect:
/// max_{l != m} |b_l^T (sum_k n_k (lam_kl - lam_km)/(lam_kl lam_km + floor) S_k) b_m|.
double ml_residual(const OrthogonalBasis& basis, const CovarianceSet& covs,
                   double lambda_floor = 1e-10);

/// J(B) = sum_k n_k sum_l log lambda_kl, lambdas clamped at lambda_floor.
double negloglik(const OrthogonalBasis& basis, const CovarianceSet& covs,
                 double lambda_floor = 1e-10);

/// Transformed variances diag(B^T S_k B) as a K x d matrix.
Matrix transformed_variances(const OrthogonalBasis& basis, const CovarianceSet& covs);

}  // namespace cpcanet
