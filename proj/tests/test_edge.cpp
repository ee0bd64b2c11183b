#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cpcanet/data.hpp"
#include "cpcanet/errors.hpp"
#include "cpcanet/fg.hpp"
#include "cpcanet/io.hpp"
#include "cpcanet/net.hpp"
#include "cpcanet/rng.hpp"
#include "cpcanet/unfold.hpp"
#include "helpers.hpp"

using namespace cpcanet;
namespace t = cpcanet::testing;
namespace fs = std::filesystem;

TEST_CASE("covariance set json round-trips exactly and validates") {
    Rng rng(71);
    const CovarianceSet covs = t::random_covariance_set(rng, 5, 3);
    const fs::path path = fs::temp_directory_path() / "cpcanet_covs_roundtrip.json";
    write_covariance_set_json(covs, path.string());
    const CovarianceSet back = read_covariance_set_json(path.string());
    REQUIRE(back.size() == covs.size());
    REQUIRE(back.dim() == covs.dim());
    for (std::size_t k = 0; k < covs.size(); ++k) {
        CHECK(back.weight(k) == covs.weight(k));
        const Matrix& a = covs.domain(k).matrix();
        const Matrix& b = back.domain(k).matrix();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
    }
    fs::remove(path);

    SUBCASE("asymmetric covariance entries are rejected at read time") {
        const fs::path bad = fs::temp_directory_path() / "cpcanet_covs_bad.json";
        std::ofstream(bad) << R"({"d": 2, "domains": [{"n": 3.0, "S": [[1.0, 0.5], [0.4, 1.0]]}]})";
        CHECK_THROWS_AS(read_covariance_set_json(bad.string()), SchemaMismatch);
        fs::remove(bad);
    }
    SUBCASE("non-positive weights are rejected") {
        const fs::path bad = fs::temp_directory_path() / "cpcanet_covs_w.json";
        std::ofstream(bad) << R"({"d": 2, "domains": [{"n": 0.0, "S": [[1.0, 0.0], [0.0, 1.0]]}]})";
        CHECK_THROWS_AS(read_covariance_set_json(bad.string()), InvariantViolation);
        fs::remove(bad);
    }
}

TEST_CASE("rank-deficient covariances stay finite through both solvers") {
    // rank-2 matrices in d = 3: one zero variance direction per domain
    Rng rng(72);
    std::vector<CovarianceMatrix> domains;
    for (int k = 0; k < 2; ++k) {
        const OrthogonalBasis q = t::random_rotation(rng, 3);
        Matrix s(3, 3, 0.0);
        const double lams[3] = {4.0 + k, 1.0 + 0.3 * k, 0.0};
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j)
                    s(i, j) += lams[l] * q.matrix()(i, l) * q.matrix()(j, l);
        domains.emplace_back(symmetrize(s));
    }
    const CovarianceSet covs(std::move(domains), {10.0, 12.0});

    const FgResult fg = fg_fit(covs);
    CHECK(std::isfinite(fg.final_max_rotation));
    for (std::size_t i = 0; i < fg.lambdas.size(); ++i) {
        CHECK(std::isfinite(fg.lambdas.data()[i]));
        CHECK(fg.lambdas.data()[i] >= -1e-10);
    }
    CHECK(std::isfinite(negloglik(fg.basis, covs)));
    CHECK(std::isfinite(ml_residual(fg.basis, covs)));

    UnfoldConfig config;
    config.stages = 10;
    const UnfoldResult unfolded = unfold_solve(covs, std::vector<double>(10, 0.2), config);
    for (const UnfoldStage& stage : unfolded.trace.stages) {
        CHECK(std::isfinite(stage.objective));
        CHECK(std::isfinite(stage.grad_norm));
    }
}

TEST_CASE("a fifty-stage unfolded chain still differentiates cleanly") {
    Rng rng(73);
    const std::size_t d = 4, stages = 50;
    tape::Graph g;
    tape::Bindings bindings;
    std::vector<tape::NodeId> cov_nodes, eta_nodes;
    std::vector<double> weights;
    for (std::size_t k = 0; k < 3; ++k) {
        cov_nodes.push_back(g.input("S" + std::to_string(k), d, d));
        bindings.emplace("S" + std::to_string(k), t::random_psd(rng, d).matrix());
        weights.push_back(rng.uniform(0.5, 2.0));
    }
    for (std::size_t i = 0; i < stages; ++i) {
        eta_nodes.push_back(g.input("eta" + std::to_string(i), 1, 1));
        bindings.emplace("eta" + std::to_string(i), Matrix(1, 1, 0.1 + 0.002 * (i % 5)));
    }
    UnfoldConfig config;
    config.stages = stages;
    const UnfoldGraphPieces pieces = build_unfold(g, cov_nodes, weights, eta_nodes, d, config);
    g.set_output(build_cpca_loss(g, pieces.basis, cov_nodes, d));
    CHECK(tape::gradcheck(g, bindings, 1e-5) < 1e-4);
}

TEST_CASE("the trainer validates the dataset against its configuration") {
    const ToyDGDataset data = gen_toy_dg(10, 4, 3, 40, 0.5, 1);
    TrainerConfig config;
    config.dims.p = 10;
    config.dims.C = 3;
    config.dims.K = 4;  // dataset only has 3 training domains
    config.steps = 2;
    CHECK_THROWS_AS(train(data, config), WrongDomainCount);

    config.dims.K = 3;
    config.dims.p = 11;  // feature width mismatch
    CHECK_THROWS_AS(train(data, config), ShapeMismatch);
}

TEST_CASE("fg weight sensitivity: heavier domains pull the basis") {
    // two non-commuting domains; cranking one weight moves the solution
    // toward that domain's eigenbasis
    Rng rng(74);
    const CovarianceMatrix a = t::random_psd(rng, 4, 1.0, 9.0);
    const CovarianceMatrix b = t::random_psd(rng, 4, 1.0, 9.0);
    double previous = 1e300;
    for (const double w : {1.0, 100.0, 1e5}) {
        const FgResult result = fg_fit(CovarianceSet({a, b}, {w, 1.0}));
        const Matrix hat = matmul(transpose(result.basis.matrix()),
                                  matmul(a.matrix(), result.basis.matrix()));
        const double energy = offdiag_energy(hat);
        CHECK(energy < previous);
        previous = energy;
    }
    CHECK(previous < 1e-6);  // at 1e5:1 the heavy domain is essentially alone
}
