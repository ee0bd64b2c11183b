#pragma once

#include <cstddef>
#include <vector>

#include "cpcanet/linalg.hpp"
#include "cpcanet/tape.hpp"

namespace cpcanet {

struct UnfoldConfig {
    std::size_t stages = 3;    // T
    double eps = 1e-8;         // regularizer inside the Omega denominators
    double eps_norm = 1e-12;   // guard added to |G_A|_F before normalizing
    double lambda_floor = 1e-10;  // clamp for the per-stage objective only
};

struct UnfoldStage {
    SkewMatrix tangent;      // A_t
    OrthogonalBasis basis;   // beta_t
    double eta = 0.0;
    double objective = 0.0;  // negative log-likelihood at beta_t
    double offdiag = 0.0;    // cpca_loss at beta_t
    double grad_norm = 0.0;  // |G_A|_F at beta_{t-1}
};

struct UnfoldTrace {
    double initial_objective = 0.0;  // at beta_0 = I
    double initial_offdiag = 0.0;
    std::vector<UnfoldStage> stages;
};

struct UnfoldResult {
    OrthogonalBasis basis;
    UnfoldTrace trace;
};

/// Tangent-space gradient of the negative log-likelihood:
/// G_A = sum_k n_k ((B^T S_k B) (.) Omega_k),
/// [Omega_k]_{lm} = (lam_kl - lam_km) / (lam_kl lam_km + eps).
/// The transformed covariance is symmetrized first, which makes the output
/// exactly skew-symmetric rather than skew up to roundoff.
SkewMatrix riemannian_gradient(const OrthogonalBasis& basis, const CovarianceSet& covs,
                               double eps);

/// Independent route to the same tangent gradient through the Euclidean
/// gradient 2 sum_k n_k S_k B Lambda_k^{-1} projected as (B^T G - G^T B)/2,
/// with reciprocals clamped at lambda_floor. Used as the dual-route oracle;
/// agrees with riemannian_gradient when eps is negligible against the
/// variance products.
Matrix riemannian_gradient_projection(const OrthogonalBasis& basis, const CovarianceSet& covs,
                                      double lambda_floor = 1e-10);

/// T stages of normalized tangent descent with Cayley retraction:
/// A_0 = 0; per stage beta = cayley(A), G~ = G_A / (|G_A|_F + eps_norm),
/// A <- A - eta_t G~. Requires etas.size() == config.stages and every
/// eta in (0, 0.5).
UnfoldResult unfold_solve(const CovarianceSet& covs, const std::vector<double>& etas,
                          const UnfoldConfig& config = {});

/// L_CPCA: mean over domains of offdiag_energy(B^T S_k B).
double cpca_loss(const OrthogonalBasis& basis, const CovarianceSet& covs);

// ---- tape-graph builders (the differentiable route) ----

struct UnfoldGraphPieces {
    std::vector<tape::NodeId> covariances;  // S_k nodes fed to the solver
    std::vector<tape::NodeId> stage_bases;  // beta_1 .. beta_T
    std::vector<tape::NodeId> grad_norms;   // |G_A|_F per stage
    tape::NodeId basis = -1;                // beta_T
};

/// Cayley transform as a graph: solve(I + A/2, I - A/2).
tape::NodeId build_cayley(tape::Graph& g, tape::NodeId skew, std::size_t d);

/// The unfolded solver as a subgraph. `etas` are 1x1 nodes, one per stage;
/// `weights` are the n_k constants.
UnfoldGraphPieces build_unfold(tape::Graph& g, const std::vector<tape::NodeId>& cov_nodes,
                               const std::vector<double>& weights,
                               const std::vector<tape::NodeId>& etas, std::size_t d,
                               const UnfoldConfig& config);

/// offdiag_energy of node m (d x d) as a scalar node.
tape::NodeId build_offdiag_energy(tape::Graph& g, tape::NodeId m, std::size_t d);

/// L_CPCA of a basis node against covariance nodes.
tape::NodeId build_cpca_loss(tape::Graph& g, tape::NodeId basis,
                             const std::vector<tape::NodeId>& cov_nodes, std::size_t d);

}  // namespace cpcanet
