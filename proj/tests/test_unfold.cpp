#include <doctest.h>

#include <cmath>

#include "cpcanet/data.hpp"
#include "cpcanet/fg.hpp"
#include "cpcanet/rng.hpp"
#include "cpcanet/unfold.hpp"
#include "helpers.hpp"

using namespace cpcanet;
namespace t = cpcanet::testing;

TEST_CASE("riemannian gradient vanishes for diagonal covariances at the identity") {
    const CovarianceSet covs({CovarianceMatrix(Matrix{{3, 0}, {0, 1}}),
                              CovarianceMatrix(Matrix{{5, 0}, {0, 2}})},
                             {4.0, 6.0});
    const SkewMatrix g = riemannian_gradient(OrthogonalBasis::identity(2), covs, 1e-8);
    CHECK(max_abs(g.matrix()) == 0.0);
}

TEST_CASE("tied variances produce no torque") {
    Matrix s{{2.0, 0.7, 0.1}, {0.7, 2.0, 0.3}, {0.1, 0.3, 5.0}};
    const CovarianceSet covs({CovarianceMatrix(symmetrize(s))}, {3.0});
    const SkewMatrix g = riemannian_gradient(OrthogonalBasis::identity(3), covs, 1e-8);
    CHECK(g.matrix()(0, 1) == 0.0);  // lambda_1 == lambda_2 exactly
    CHECK(g.matrix()(0, 2) != 0.0);
}

TEST_CASE("hadamard form matches the projection form entrywise") {
    Rng rng(41);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t d = 8;
        const CovarianceSet covs = t::random_covariance_set(rng, d, 3);
        const OrthogonalBasis beta = t::random_rotation(rng, d);
        const SkewMatrix hadamard_form = riemannian_gradient(beta, covs, 1e-14);
        const Matrix projection_form = riemannian_gradient_projection(beta, covs);
        CHECK(max_abs(hadamard_form.matrix() - projection_form) < 1e-10);
    }
}

TEST_CASE("gradient is exactly skew and normalization is bounded") {
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const CovarianceSet covs = t::random_covariance_set(rng, 6, 3);
        const OrthogonalBasis beta = t::random_rotation(rng, 6);
        const SkewMatrix g = riemannian_gradient(beta, covs, 1e-8);
        CHECK(frobenius_norm(g.matrix() + transpose(g.matrix())) == 0.0);
        const double norm = frobenius_norm(g.matrix());
        if (norm > 1e-2) {
            const Matrix normalized = scale(g.matrix(), 1.0 / (norm + 1e-12));
            CHECK(frobenius_norm(normalized) <= 1.0);
            CHECK(frobenius_norm(normalized) > 1.0 - 1e-10);
        }
    }
}

TEST_CASE("gradient nearly vanishes at a maximum-likelihood stationary point") {
    const CommonBasisEnsemble ensemble = gen_common_ensemble(8, 3, 1.0, 10.0, 0.0, 6);
    CHECK(ml_residual(ensemble.truth, ensemble.covs) < 1e-10);
    const SkewMatrix g = riemannian_gradient(ensemble.truth, ensemble.covs, 1e-8);
    double weight_sum = 0.0;
    for (std::size_t k = 0; k < ensemble.covs.size(); ++k) weight_sum += ensemble.covs.weight(k);
    CHECK(frobenius_norm(g.matrix()) < 10.0 * 1e-8 * weight_sum);
}

TEST_CASE("scaling the covariances preserves the gradient's dominant entry") {
    Rng rng(29);
    const CovarianceSet covs = t::random_covariance_set(rng, 6, 3);
    const OrthogonalBasis beta = t::random_rotation(rng, 6);
    auto argmax_offdiag = [](const Matrix& m) {
        std::size_t best = 0;
        double best_val = -1.0;
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t j = 0; j < m.cols(); ++j) {
                if (i != j && std::fabs(m(i, j)) > best_val) {
                    best_val = std::fabs(m(i, j));
                    best = i * m.cols() + j;
                }
            }
        return best;
    };
    const std::size_t base = argmax_offdiag(riemannian_gradient(beta, covs, 1e-12).matrix());
    for (const double c : {0.5, 2.0}) {
        std::vector<CovarianceMatrix> scaled;
        std::vector<double> weights;
        for (std::size_t k = 0; k < covs.size(); ++k) {
            scaled.emplace_back(scale(covs.domain(k).matrix(), c));
            weights.push_back(covs.weight(k));
        }
        const CovarianceSet covs_scaled(std::move(scaled), std::move(weights));
        CHECK(argmax_offdiag(riemannian_gradient(beta, covs_scaled, 1e-12).matrix()) == base);
    }
}

TEST_CASE("diagonal covariances leave the unfolded solver at the identity") {
    const CovarianceSet covs({CovarianceMatrix(Matrix{{3, 0}, {0, 1}}),
                              CovarianceMatrix(Matrix{{1, 0}, {0, 9}})},
                             {5.0, 5.0});
    UnfoldConfig config;
    config.stages = 4;
    const UnfoldResult result = unfold_solve(covs, {0.1, 0.1, 0.1, 0.1}, config);
    CHECK(max_abs(result.basis.matrix() - Matrix::identity(2)) == 0.0);
    for (const UnfoldStage& stage : result.trace.stages) {
        CHECK(stage.grad_norm == 0.0);
        CHECK(stage.objective == result.trace.initial_objective);
    }
}

TEST_CASE("unfolding closes most of the gap to the classical solver") {
    int ok = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const CommonBasisEnsemble ensemble = gen_common_ensemble(8, 3, 1.0, 10.0, 0.0, seed);
        UnfoldConfig config;
        config.stages = 50;
        const UnfoldResult unfolded =
            unfold_solve(ensemble.covs, std::vector<double>(50, 0.1), config);
        const FgResult fg = fg_fit(ensemble.covs);
        const double at_identity = cpca_loss(OrthogonalBasis::identity(8), ensemble.covs);
        const double at_fg = cpca_loss(fg.basis, ensemble.covs);
        const double at_unfolded = cpca_loss(unfolded.basis, ensemble.covs);
        if (at_unfolded < at_identity && at_unfolded <= at_fg + 0.10 * (at_identity - at_fg)) ++ok;
    }
    CHECK(ok >= 19);
}

TEST_CASE("every trace basis is orthogonal and step sizes are recorded") {
    const CommonBasisEnsemble ensemble = gen_common_ensemble(6, 3, 1.0, 10.0, 0.05, 2);
    UnfoldConfig config;
    config.stages = 10;
    const std::vector<double> etas(10, 0.3);
    const UnfoldResult result = unfold_solve(ensemble.covs, etas, config);
    REQUIRE(result.trace.stages.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        const UnfoldStage& stage = result.trace.stages[i];
        CHECK(stage.eta == 0.3);
        // construction of OrthogonalBasis/SkewMatrix already enforced the
        // invariants; re-check the defect explicitly
        CHECK(frobenius_norm(matmul(transpose(stage.basis.matrix()), stage.basis.matrix()) -
                             Matrix::identity(6)) < 1e-10);
    }
}

TEST_CASE("eta outside the open interval is rejected") {
    const CommonBasisEnsemble ensemble = gen_common_ensemble(4, 2, 1.0, 5.0, 0.0, 1);
    UnfoldConfig config;
    config.stages = 2;
    CHECK_THROWS(unfold_solve(ensemble.covs, {0.5, 0.1}, config));
    CHECK_THROWS(unfold_solve(ensemble.covs, {0.2, 0.0}, config));
    CHECK_THROWS(unfold_solve(ensemble.covs, {0.2}, config));
}

TEST_CASE("small-step descent on commuting ensembles") {
    int monotone = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        const CommonBasisEnsemble ensemble = gen_common_ensemble(6, 3, 1.0, 8.0, 0.0, seed);
        UnfoldConfig config;
        config.stages = 20;
        const UnfoldResult result =
            unfold_solve(ensemble.covs, std::vector<double>(20, 0.01), config);
        bool ok = result.trace.stages.front().objective <=
                  result.trace.initial_objective + 1e-9;
        for (std::size_t i = 0; i + 1 < result.trace.stages.size(); ++i) {
            ok = ok && result.trace.stages[i + 1].objective <=
                           result.trace.stages[i].objective + 1e-9;
        }
        if (ok) ++monotone;
    }
    CHECK(monotone >= 95);
}

TEST_CASE("cpca loss examples") {
    // eigenbasis of a single domain
    Rng rng(3);
    const CovarianceMatrix s = t::random_psd(rng, 5);
    const FgResult pca = fg_fit(CovarianceSet({s}, {1.0}));
    CHECK(cpca_loss(pca.basis, CovarianceSet({s}, {1.0})) < 1e-12);

    // exact common diagonalizer
    const CommonBasisEnsemble ensemble = gen_common_ensemble(7, 3, 1.0, 10.0, 0.0, 4);
    CHECK(cpca_loss(ensemble.truth, ensemble.covs) < 1e-12);

    // direct scalar recomputation, K=2, d=4
    const CovarianceSet pair = t::random_covariance_set(rng, 4, 2);
    const OrthogonalBasis beta = t::random_rotation(rng, 4);
    double expect = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
        const Matrix hat =
            matmul(transpose(beta.matrix()), matmul(pair.domain(k).matrix(), beta.matrix()));
        double total = 0.0, diag = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                total += hat(i, j) * hat(i, j);
                if (i == j) diag += hat(i, j) * hat(i, j);
            }
        expect += 0.5 * (total - diag) / 12.0;
    }
    CHECK(cpca_loss(beta, pair) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("single-domain energy after unfolding differentiates against covariances and steps") {
    Rng rng(61);
    const std::size_t d = 6, stages = 3;
    tape::Graph g;
    tape::Bindings bindings;
    std::vector<tape::NodeId> cov_nodes, eta_nodes;
    std::vector<double> weights;
    for (std::size_t k = 0; k < 3; ++k) {
        cov_nodes.push_back(g.input("S" + std::to_string(k), d, d));
        bindings.emplace("S" + std::to_string(k), t::random_psd(rng, d).matrix());
        weights.push_back(rng.uniform(0.5, 2.0));
    }
    for (std::size_t t_idx = 0; t_idx < stages; ++t_idx) {
        eta_nodes.push_back(g.input("eta" + std::to_string(t_idx), 1, 1));
        bindings.emplace("eta" + std::to_string(t_idx), Matrix(1, 1, rng.uniform(0.1, 0.4)));
    }
    UnfoldConfig config;
    config.stages = stages;
    const UnfoldGraphPieces pieces = build_unfold(g, cov_nodes, weights, eta_nodes, d, config);
    const tape::NodeId hat =
        g.matmul(g.transpose(pieces.basis), g.matmul(cov_nodes[0], pieces.basis));
    g.set_output(build_offdiag_energy(g, hat, d));
    CHECK(tape::gradcheck(g, bindings, 1e-5) < 1e-4);
}

TEST_CASE("eager and graph unfold agree") {
    Rng rng(55);
    const std::size_t d = 6, stages = 3;
    const CovarianceSet covs = t::random_covariance_set(rng, d, 3);
    const std::vector<double> etas{0.3, 0.2, 0.1};

    UnfoldConfig config;
    config.stages = stages;
    const UnfoldResult eager = unfold_solve(covs, etas, config);

    tape::Graph g;
    std::vector<tape::NodeId> cov_nodes, eta_nodes;
    tape::Bindings bindings;
    std::vector<double> weights;
    for (std::size_t k = 0; k < covs.size(); ++k) {
        cov_nodes.push_back(g.input("S" + std::to_string(k), d, d));
        bindings.emplace("S" + std::to_string(k), covs.domain(k).matrix());
        weights.push_back(covs.weight(k));
    }
    for (std::size_t t_idx = 0; t_idx < stages; ++t_idx) {
        eta_nodes.push_back(g.input("eta" + std::to_string(t_idx), 1, 1));
        bindings.emplace("eta" + std::to_string(t_idx), Matrix(1, 1, etas[t_idx]));
    }
    const UnfoldGraphPieces pieces = build_unfold(g, cov_nodes, weights, eta_nodes, d, config);
    g.set_output(build_cpca_loss(g, pieces.basis, cov_nodes, d));
    const double graph_loss = g.evaluate(bindings);

    CHECK(max_abs(g.value_of(pieces.basis) - eager.basis.matrix()) < 1e-12);
    CHECK(std::fabs(graph_loss - cpca_loss(eager.basis, covs)) < 1e-12);
    for (std::size_t t_idx = 0; t_idx < stages; ++t_idx) {
        CHECK(std::fabs(g.value_of(pieces.grad_norms[t_idx])(0, 0) -
                        eager.trace.stages[t_idx].grad_norm) < 1e-12);
    }
}
