#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpcanet/linalg.hpp"
#include "cpcanet/rng.hpp"

namespace cpcanet {

/// Commuting (or tau-perturbed) covariance family with known common basis.
struct CommonBasisEnsemble {
    OrthogonalBasis truth;
    Matrix spectra;  // K x d, positive, per-domain gaps >= 5% of the range
    double noise_level = 0.0;
    CovarianceSet covs;
};

/// S_k = Q diag(spectra_k) Q^T (+ tau * unit-Frobenius symmetric noise,
/// PSD-floored). Deterministic in the seed.
CommonBasisEnsemble gen_common_ensemble(std::size_t d, std::size_t k_count, double spectra_lo,
                                        double spectra_hi, double noise_level,
                                        std::uint64_t seed);

struct DomainData {
    Matrix features;        // N x p
    std::vector<int> labels;  // 0-based class ids
};

/// Multi-domain classification toy set: class means planted in a shared
/// invariant subspace, one spurious direction whose label correlation is
/// consistent across training domains and flipped on the held-out domain,
/// plus domain-specific nuisance variance.
struct ToyDGDataset {
    std::vector<DomainData> domains;
    std::size_t heldout = 0;  // index of the flipped domain (last)
    std::size_t feature_dim = 0;
    std::size_t class_count = 0;
    double spurious_strength = 0.0;
};

ToyDGDataset gen_toy_dg(std::size_t p, std::size_t k_count, std::size_t c_count,
                        std::size_t n_per_domain, double spurious_strength, std::uint64_t seed);

/// Reads one CSV per domain: p float columns + one integer label column.
/// heldout == paths.size() marks a dataset with no held-out domain.
/// Throws SchemaMismatch (naming file/row/column) or DegenerateBatch.
ToyDGDataset load_domain_csv(const std::vector<std::string>& paths, std::size_t heldout);

/// One training mini-batch: rows grouped by domain in ascending domain
/// order, every present domain contributing at least two rows.
struct DomainBatch {
    Matrix features;               // N x p
    std::vector<int> labels;       // length N
    std::vector<int> domain_ids;   // length N, ascending blocks
    std::vector<std::size_t> domain_sizes;  // per block

    static DomainBatch validated(Matrix features, std::vector<int> labels,
                                 std::vector<int> domain_ids);
};

/// Uniform with-replacement sampler over the training domains of a dataset
/// (the held-out domain is never drawn). Row order inside a batch is the
/// draw order, grouped by domain.
class BatchSampler {
  public:
    BatchSampler(const ToyDGDataset& dataset, std::size_t batch_per_domain,
                 double train_fraction = 0.75);

    DomainBatch next(Rng& rng) const;

    std::size_t train_domain_count() const { return train_domains_.size(); }
    /// Validation rows (the tail split) of every training domain, pooled.
    DomainBatch validation_pool() const;

  private:
    const ToyDGDataset* dataset_;
    std::size_t batch_per_domain_;
    std::vector<std::size_t> train_domains_;
    std::vector<std::size_t> train_counts_;  // rows eligible for sampling
};

}  // namespace cpcanet
