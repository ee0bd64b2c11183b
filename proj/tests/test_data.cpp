#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cpcanet/data.hpp"
#include "cpcanet/errors.hpp"
#include "cpcanet/fg.hpp"
#include "cpcanet/net.hpp"
#include "cpcanet/rng.hpp"
#include "helpers.hpp"

using namespace cpcanet;
namespace fs = std::filesystem;

namespace {

// Toy trainer shape shared by the calibration checks below.
TrainerConfig calibration_config(std::uint64_t seed) {
    TrainerConfig config;
    config.dims.K = 4;
    config.steps = 800;
    config.lr_backbone = 1e-4;
    config.lr_cpcanet = 1e-3;
    config.eval_interval = 0;
    config.erm_mode = true;
    config.seed = seed;
    return config;
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return xs[xs.size() / 2];
}

}  // namespace

TEST_CASE("noise-free ensembles commute exactly") {
    const CommonBasisEnsemble ensemble = gen_common_ensemble(8, 4, 1.0, 10.0, 0.0, 9);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = i + 1; j < 4; ++j) {
            const Matrix& a = ensemble.covs.domain(i).matrix();
            const Matrix& b = ensemble.covs.domain(j).matrix();
            CHECK(frobenius_norm(matmul(a, b) - matmul(b, a)) < 1e-10);
        }
    }
    CHECK(cpca_loss(ensemble.truth, ensemble.covs) < 1e-12);
}

TEST_CASE("different seeds give different bases; same seed reproduces bytes") {
    const CommonBasisEnsemble a = gen_common_ensemble(6, 3, 1.0, 10.0, 0.0, 1);
    const CommonBasisEnsemble b = gen_common_ensemble(6, 3, 1.0, 10.0, 0.0, 2);
    CHECK(frobenius_norm(a.truth.matrix() - b.truth.matrix()) > 0.1);

    const CommonBasisEnsemble a2 = gen_common_ensemble(6, 3, 1.0, 10.0, 0.0, 1);
    for (std::size_t k = 0; k < 3; ++k) {
        const Matrix& x = a.covs.domain(k).matrix();
        const Matrix& y = a2.covs.domain(k).matrix();
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.data()[i] == y.data()[i]);
    }
}

TEST_CASE("spectra respect the identifiability gap floor") {
    const CommonBasisEnsemble ensemble = gen_common_ensemble(8, 3, 2.0, 12.0, 0.0, 7);
    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> lams(8);
        for (std::size_t l = 0; l < 8; ++l) lams[l] = ensemble.spectra(k, l);
        std::sort(lams.begin(), lams.end());
        for (std::size_t l = 0; l + 1 < 8; ++l) CHECK(lams[l + 1] - lams[l] >= 0.05 * 10.0 - 1e-12);
    }
}

TEST_CASE("psd flooring stays within the stated eigenvalue budget") {
    // spectra close to the noise level force the Weyl shift to engage
    const double noise = 0.05;
    const CommonBasisEnsemble ensemble = gen_common_ensemble(6, 3, 0.02, 1.0, noise, 13);
    for (std::size_t k = 0; k < 3; ++k) {
        // rebuild the unfloored matrix from the stored truth and spectra
        Matrix clean(6, 6, 0.0);
        for (std::size_t l = 0; l < 6; ++l)
            for (std::size_t i = 0; i < 6; ++i)
                for (std::size_t j = 0; j < 6; ++j)
                    clean(i, j) += ensemble.spectra(k, l) * ensemble.truth.matrix()(i, l) *
                                   ensemble.truth.matrix()(j, l);
        // difference = noise + possible diagonal shift; eigenvalue movement
        // is bounded by its spectral norm <= frobenius norm
        const Matrix diff = ensemble.covs.domain(k).matrix() - clean;
        CHECK(frobenius_norm(diff) <= noise * 6.0 + noise + 1e-9);
    }
}

TEST_CASE("noisy ensembles are still recovered to a fraction of a radian") {
    const CommonBasisEnsemble ensemble = gen_common_ensemble(8, 3, 1.0, 10.0, 0.05, 17);
    const FgResult result = fg_fit(ensemble.covs);
    CHECK(cpcanet::testing::signed_permutation_angle(ensemble.truth.matrix(),
                                                     result.basis.matrix()) < 0.2);
}

TEST_CASE("toy dg generator is deterministic and seed-sensitive") {
    const ToyDGDataset a = gen_toy_dg(12, 3, 4, 50, 1.0, 5);
    const ToyDGDataset b = gen_toy_dg(12, 3, 4, 50, 1.0, 5);
    const ToyDGDataset c = gen_toy_dg(12, 3, 4, 50, 1.0, 6);
    REQUIRE(a.domains.size() == 3);
    CHECK(a.heldout == 2);
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t i = 0; i < a.domains[k].features.size(); ++i) {
            CHECK(a.domains[k].features.data()[i] == b.domains[k].features.data()[i]);
        }
        CHECK(a.domains[k].labels == b.domains[k].labels);
    }
    CHECK(max_abs(a.domains[0].features - c.domains[0].features) > 0.0);
}

TEST_CASE("zero spurious strength leaves no held-out gap" * doctest::timeout(240)) {
    std::vector<double> gaps;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const ToyDGDataset data = gen_toy_dg(20, 5, 4, 400, 0.0, 7);
        const TrainResult erm = train(data, calibration_config(seed));
        gaps.push_back(erm.final_indomain_acc - erm.final_heldout_acc);
    }
    CHECK(median(gaps) < 0.03);
}

TEST_CASE("the calibrated hard setting drops ERM by at least 10 points" *
          doctest::timeout(240)) {
    std::vector<double> gaps;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const ToyDGDataset data = gen_toy_dg(20, 5, 4, 400, 0.8, 7);
        const TrainResult erm = train(data, calibration_config(seed));
        gaps.push_back(erm.final_indomain_acc - erm.final_heldout_acc);
    }
    CHECK(median(gaps) >= 0.10);
}

TEST_CASE("permuted labels collapse held-out accuracy to chance" * doctest::timeout(240)) {
    std::vector<double> accs;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        ToyDGDataset data = gen_toy_dg(20, 4, 4, 300, 0.8, 7);
        Rng rng = Rng::fork(seed, "label-permutation");
        for (DomainData& dom : data.domains) {
            for (std::size_t i = dom.labels.size(); i-- > 1;) {
                std::swap(dom.labels[i], dom.labels[rng.uniform_int(i + 1)]);
            }
        }
        TrainerConfig config = calibration_config(seed);
        config.dims.K = 3;
        config.steps = 600;
        accs.push_back(train(data, config).final_heldout_acc);
    }
    CHECK(std::fabs(median(accs) - 0.25) <= 0.05);
}

TEST_CASE("domain csv loader round-trips generated data and validates") {
    const ToyDGDataset data = gen_toy_dg(10, 3, 3, 100, 0.5, 3);
    const fs::path dir = fs::temp_directory_path() / "cpcanet_csv_test";
    fs::create_directories(dir);
    std::vector<std::string> paths;
    for (std::size_t k = 0; k < 3; ++k) {
        const fs::path p = dir / ("d" + std::to_string(k) + ".csv");
        std::ofstream out(p);
        for (std::size_t i = 0; i < data.domains[k].features.rows(); ++i) {
            for (std::size_t j = 0; j < 10; ++j) out << data.domains[k].features(i, j) << ',';
            out << data.domains[k].labels[i] << '\n';
        }
        paths.push_back(p.string());
    }
    const ToyDGDataset loaded = load_domain_csv(paths, 2);
    CHECK(loaded.feature_dim == 10);
    CHECK(loaded.class_count == 3);
    CHECK(loaded.heldout == 2);

    // batches from the stream contain every training domain
    BatchSampler sampler(loaded, 8);
    Rng rng(1);
    const DomainBatch batch = sampler.next(rng);
    CHECK(batch.domain_sizes.size() == 2);
    CHECK(batch.features.rows() == 16);

    // with no held-out domain the stream carries all three ids
    const ToyDGDataset all = load_domain_csv(paths, 3);
    BatchSampler all_sampler(all, 8);
    const DomainBatch all_batch = all_sampler.next(rng);
    CHECK(all_batch.domain_sizes.size() == 3);
    CHECK(all_batch.domain_ids.front() == 0);
    CHECK(all_batch.domain_ids.back() == 2);

    SUBCASE("single-row file is a degenerate batch") {
        const fs::path p = dir / "one_row.csv";
        std::ofstream(p) << "1,2,3,4,5,6,7,8,9,10,0\n";
        CHECK_THROWS_AS(load_domain_csv({paths[0], p.string()}, 0), DegenerateBatch);
    }
    SUBCASE("non-numeric cell names the location") {
        const fs::path p = dir / "bad_cell.csv";
        std::ofstream(p) << "1,2,3,4,5,6,7,8,9,10,0\n1,2,x,4,5,6,7,8,9,10,1\n";
        try {
            load_domain_csv({p.string()}, 0);
            FAIL("expected SchemaMismatch");
        } catch (const SchemaMismatch& e) {
            const std::string what = e.what();
            CHECK(what.find(":2") != std::string::npos);
            CHECK(what.find("column 3") != std::string::npos);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("domain batches require two samples per present domain") {
    Matrix x(3, 2, 1.0);
    CHECK_THROWS_AS(DomainBatch::validated(x, {0, 1, 1}, {0, 1, 1}), DegenerateBatch);
    CHECK_THROWS_AS(DomainBatch::validated(x, {0, 1, 1}, {1, 0, 1}), InvariantViolation);
    const DomainBatch ok = DomainBatch::validated(Matrix(4, 2, 1.0), {0, 1, 0, 1}, {0, 0, 1, 1});
    CHECK(ok.domain_sizes == std::vector<std::size_t>{2, 2});
}
