#include "cpcanet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "cpcanet/errors.hpp"

namespace cpcanet {

namespace {

Matrix random_rotation(std::size_t d, Rng& rng) {
    Matrix g(d, d);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Matrix q = qr_orthonormal(g);
    if (determinant(q) < 0.0) {
        for (std::size_t i = 0; i < d; ++i) q(i, d - 1) = -q(i, d - 1);
    }
    return q;
}

// Spectrum draw with pairwise gaps of at least 5% of the range, so the
// planted basis stays identifiable. Rejection is deterministic in the rng.
std::vector<double> gapped_spectrum(std::size_t d, double lo, double hi, Rng& rng) {
    const double min_gap = 0.05 * (hi - lo);
    std::vector<double> values(d), sorted(d);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        for (std::size_t i = 0; i < d; ++i) values[i] = rng.uniform(lo, hi);
        sorted = values;
        std::sort(sorted.begin(), sorted.end());
        bool ok = true;
        for (std::size_t i = 0; i + 1 < d; ++i) {
            if (sorted[i + 1] - sorted[i] < min_gap) {
                ok = false;
                break;
            }
        }
        if (ok) return values;
    }
    // Tight dims fall back to an evenly spaced grid in random order.
    for (std::size_t i = 0; i < d; ++i) {
        sorted[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(d - 1);
    }
    for (std::size_t i = d; i-- > 1;) {
        std::swap(sorted[i], sorted[rng.uniform_int(i + 1)]);
    }
    return sorted;
}

}  // namespace

CommonBasisEnsemble gen_common_ensemble(std::size_t d, std::size_t k_count, double spectra_lo,
                                        double spectra_hi, double noise_level,
                                        std::uint64_t seed) {
    if (d < 2) throw DimensionTooSmall("gen_common_ensemble: need d >= 2");
    if (k_count < 1) throw InvariantViolation("gen_common_ensemble: need K >= 1");
    if (!(spectra_lo > 0.0 && spectra_hi > spectra_lo)) {
        throw InvariantViolation("gen_common_ensemble: need 0 < lo < hi");
    }
    if (noise_level < 0.0) throw InvariantViolation("gen_common_ensemble: negative noise");

    Rng rng = Rng::fork(seed, "common-ensemble");
    const Matrix q = random_rotation(d, rng);
    Matrix spectra(k_count, d);
    std::vector<CovarianceMatrix> domains;
    std::vector<double> weights;
    domains.reserve(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
        const std::vector<double> lams = gapped_spectrum(d, spectra_lo, spectra_hi, rng);
        for (std::size_t l = 0; l < d; ++l) spectra(k, l) = lams[l];

        Matrix s(d, d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t l = 0; l < d; ++l) s(i, j) += lams[l] * q(i, l) * q(j, l);
        s = symmetrize(s);

        if (noise_level > 0.0) {
            Matrix e(d, d);
            for (std::size_t i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
            e = symmetrize(e);
            const double enorm = frobenius_norm(e);
            double min_lam = lams[0];
            for (const double v : lams) min_lam = std::min(min_lam, v);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) s(i, j) += noise_level * e(i, j) / enorm;
            // Weyl bound: lambda_min(S) >= min_lam - tau. Shift just enough
            // to restore PSD; the shift never exceeds tau (<= tau * d).
            const double bound = min_lam - noise_level;
            if (bound < 0.0) {
                const double shift = -bound + 1e-12;
                for (std::size_t i = 0; i < d; ++i) s(i, i) += shift;
            }
        }
        domains.emplace_back(std::move(s));
        weights.push_back(static_cast<double>(30 + rng.uniform_int(71)));  // n_k in [30, 100]
    }
    CovarianceSet covs(std::move(domains), std::move(weights));
    return CommonBasisEnsemble{OrthogonalBasis(q), std::move(spectra), noise_level,
                               std::move(covs)};
}

ToyDGDataset gen_toy_dg(std::size_t p, std::size_t k_count, std::size_t c_count,
                        std::size_t n_per_domain, double spurious_strength,
                        std::uint64_t seed) {
    if (p < 2 * c_count) throw InvariantViolation("gen_toy_dg: need p >= 2C");
    if (k_count < 3) throw InvariantViolation("gen_toy_dg: need K >= 3");
    if (n_per_domain < 2) throw DegenerateBatch("gen_toy_dg: need N >= 2 per domain");
    if (spurious_strength < 0.0) throw InvariantViolation("gen_toy_dg: negative strength");

    Rng rng = Rng::fork(seed, "toy-dg");
    // Orthonormal frame: C invariant mean directions, one spurious
    // direction, then a private block of nuisance directions per domain.
    // The private blocks carry strong variance along directions no other
    // domain uses, so the raw covariances are genuinely non-commuting and
    // the invariant structure has to be found, not inherited.
    const std::size_t per_domain =
        p > c_count + 1 ? std::min<std::size_t>(3, (p - c_count - 1) / k_count) : 0;
    const std::size_t frame_cols = c_count + 1 + per_domain * k_count;
    Matrix g(p, frame_cols);
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    const Matrix frame = qr_orthonormal(g);

    const double mean_scale = 1.5;
    const double noise_sigma = 1.0;
    const double nuisance_scale = 2.0;

    ToyDGDataset out;
    out.heldout = k_count - 1;
    out.feature_dim = p;
    out.class_count = c_count;
    out.spurious_strength = spurious_strength;
    out.domains.reserve(k_count);

    for (std::size_t k = 0; k < k_count; ++k) {
        // Spurious cue agrees across training domains (with mild per-domain
        // amplitude) and is reversed on the held-out domain.
        const double amp = 0.8 + 0.4 * rng.uniform();
        const double cue = (k == k_count - 1 ? -1.0 : 1.0) * amp * spurious_strength;
        std::vector<double> nuisance_amp(per_domain);
        for (std::size_t j = 0; j < per_domain; ++j) {
            nuisance_amp[j] = nuisance_scale * (0.75 + 0.5 * rng.uniform());
        }

        Matrix x(n_per_domain, p);
        std::vector<int> y(n_per_domain);
        for (std::size_t i = 0; i < n_per_domain; ++i) {
            const int cls = static_cast<int>(rng.uniform_int(c_count));
            y[i] = cls;
            const double parity = cls % 2 == 0 ? 1.0 : -1.0;
            std::vector<double> nz(per_domain);
            for (std::size_t j = 0; j < per_domain; ++j) nz[j] = nuisance_amp[j] * rng.normal();
            for (std::size_t a = 0; a < p; ++a) {
                double v = mean_scale * frame(a, cls) + cue * parity * frame(a, c_count);
                for (std::size_t j = 0; j < per_domain; ++j) {
                    v += nz[j] * frame(a, c_count + 1 + k * per_domain + j);
                }
                x(i, a) = v + noise_sigma * rng.normal();
            }
        }
        out.domains.push_back(DomainData{std::move(x), std::move(y)});
    }
    return out;
}

ToyDGDataset load_domain_csv(const std::vector<std::string>& paths, std::size_t heldout) {
    if (paths.empty()) throw SchemaMismatch("load_domain_csv: no files given");
    // heldout == paths.size() means every domain participates in training
    if (heldout > paths.size()) throw SchemaMismatch("load_domain_csv: held-out index out of range");

    ToyDGDataset out;
    out.heldout = heldout;
    std::size_t p = 0;
    int max_label = -1;
    for (const std::string& path : paths) {
        std::ifstream in(path);
        if (!in) throw SchemaMismatch("load_domain_csv: cannot open " + path);
        std::vector<std::vector<double>> rows;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::vector<double> cells;
            std::stringstream ss(line);
            std::string cell;
            std::size_t col = 0;
            while (std::getline(ss, cell, ',')) {
                ++col;
                try {
                    std::size_t used = 0;
                    const double v = std::stod(cell, &used);
                    while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used])))
                        ++used;
                    if (used != cell.size()) throw std::invalid_argument(cell);
                    cells.push_back(v);
                } catch (const std::exception&) {
                    throw SchemaMismatch("load_domain_csv: non-numeric cell at " + path + ":" +
                                         std::to_string(lineno) + " column " + std::to_string(col));
                }
            }
            if (cells.size() < 2) {
                throw SchemaMismatch("load_domain_csv: need >= 1 feature + label at " + path + ":" +
                                     std::to_string(lineno));
            }
            if (p == 0 && rows.empty() && out.domains.empty()) p = cells.size() - 1;
            if (cells.size() - 1 != p) {
                throw SchemaMismatch("load_domain_csv: column count mismatch at " + path + ":" +
                                     std::to_string(lineno));
            }
            rows.push_back(std::move(cells));
        }
        if (rows.size() < 2) {
            throw DegenerateBatch("load_domain_csv: " + path + " has fewer than 2 rows");
        }
        Matrix x(rows.size(), p);
        std::vector<int> y(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < p; ++j) x(i, j) = rows[i][j];
            const double lab = rows[i][p];
            if (lab != std::floor(lab) || lab < 0.0) {
                throw SchemaMismatch("load_domain_csv: label not a non-negative integer at " + path +
                                     ":" + std::to_string(i + 1));
            }
            y[i] = static_cast<int>(lab);
            max_label = std::max(max_label, y[i]);
        }
        out.domains.push_back(DomainData{std::move(x), std::move(y)});
    }
    out.feature_dim = p;
    out.class_count = static_cast<std::size_t>(max_label + 1);
    return out;
}

DomainBatch DomainBatch::validated(Matrix features, std::vector<int> labels,
                                   std::vector<int> domain_ids) {
    if (features.rows() != labels.size() || labels.size() != domain_ids.size()) {
        throw ShapeMismatch("DomainBatch: row/label/domain count mismatch");
    }
    std::map<int, std::size_t> counts;
    for (std::size_t i = 0; i < domain_ids.size(); ++i) {
        if (i > 0 && domain_ids[i] < domain_ids[i - 1]) {
            throw InvariantViolation("DomainBatch: domain ids must be grouped ascending");
        }
        ++counts[domain_ids[i]];
    }
    std::vector<std::size_t> sizes;
    for (const auto& [id, count] : counts) {
        if (count < 2) {
            throw DegenerateBatch("DomainBatch: domain " + std::to_string(id) +
                                  " has fewer than 2 samples");
        }
        sizes.push_back(count);
    }
    return DomainBatch{std::move(features), std::move(labels), std::move(domain_ids),
                       std::move(sizes)};
}

BatchSampler::BatchSampler(const ToyDGDataset& dataset, std::size_t batch_per_domain,
                           double train_fraction)
    : dataset_(&dataset), batch_per_domain_(batch_per_domain) {
    if (batch_per_domain < 2) throw DegenerateBatch("BatchSampler: batch per domain < 2");
    for (std::size_t k = 0; k < dataset.domains.size(); ++k) {
        if (k == dataset.heldout) continue;
        train_domains_.push_back(k);
        const std::size_t n = dataset.domains[k].features.rows();
        const auto train_n =
            std::max<std::size_t>(2, static_cast<std::size_t>(train_fraction * static_cast<double>(n)));
        train_counts_.push_back(std::min(train_n, n));
    }
    if (train_domains_.size() < 2) {
        throw InvariantViolation("BatchSampler: need at least 2 training domains");
    }
}

DomainBatch BatchSampler::next(Rng& rng) const {
    const std::size_t k_count = train_domains_.size();
    const std::size_t p = dataset_->feature_dim;
    Matrix x(k_count * batch_per_domain_, p);
    std::vector<int> y(k_count * batch_per_domain_);
    std::vector<int> ids(k_count * batch_per_domain_);
    std::size_t row = 0;
    for (std::size_t k = 0; k < k_count; ++k) {
        const DomainData& dom = dataset_->domains[train_domains_[k]];
        for (std::size_t i = 0; i < batch_per_domain_; ++i, ++row) {
            const std::size_t src = rng.uniform_int(train_counts_[k]);
            for (std::size_t j = 0; j < p; ++j) x(row, j) = dom.features(src, j);
            y[row] = dom.labels[src];
            ids[row] = static_cast<int>(k);
        }
    }
    return DomainBatch::validated(std::move(x), std::move(y), std::move(ids));
}

DomainBatch BatchSampler::validation_pool() const {
    const std::size_t p = dataset_->feature_dim;
    std::size_t total = 0;
    for (std::size_t k = 0; k < train_domains_.size(); ++k) {
        total += dataset_->domains[train_domains_[k]].features.rows() - train_counts_[k];
    }
    if (total == 0) throw DegenerateBatch("BatchSampler: no validation rows (train fraction 1?)");
    Matrix x(total, p);
    std::vector<int> y(total);
    std::vector<int> ids(total);
    std::size_t row = 0;
    for (std::size_t k = 0; k < train_domains_.size(); ++k) {
        const DomainData& dom = dataset_->domains[train_domains_[k]];
        for (std::size_t i = train_counts_[k]; i < dom.features.rows(); ++i, ++row) {
            for (std::size_t j = 0; j < p; ++j) x(row, j) = dom.features(i, j);
            y[row] = dom.labels[i];
            ids[row] = static_cast<int>(k);
        }
    }
    // validation pool is evaluation-only; domain grouping kept for symmetry
    return DomainBatch{std::move(x), std::move(y), std::move(ids), {}};
}

}  // namespace cpcanet
