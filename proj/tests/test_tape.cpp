#include <doctest.h>

#include <cmath>

#include "cpcanet/errors.hpp"
#include "cpcanet/gradcheck_suites.hpp"
#include "cpcanet/rng.hpp"
#include "cpcanet/tape.hpp"
#include "cpcanet/unfold.hpp"
#include "helpers.hpp"

using namespace cpcanet;
using tape::Graph;
using tape::NodeId;
namespace t = cpcanet::testing;

TEST_CASE("frobenius-squared of an all-ones matrix is 4") {
    Graph g;
    const NodeId x = g.input("x", 2, 2);
    g.set_output(g.sum(g.hadamard(x, x)));
    CHECK(g.evaluate({{"x", Matrix(2, 2, 1.0)}}) == 4.0);
}

TEST_CASE("sum of sigmoid at zero over a length-3 vector is 1.5") {
    Graph g;
    const NodeId x = g.input("x", 3, 1);
    g.set_output(g.sum(g.sigmoid(x)));
    CHECK(g.evaluate({{"x", Matrix(3, 1, 0.0)}}) == 1.5);
}

TEST_CASE("graph offdiag energy matches the direct computation") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 4 + trial % 3;
        const OrthogonalBasis beta = t::random_rotation(rng, d);
        const CovarianceMatrix s = t::random_psd(rng, d);

        Graph g;
        const NodeId bn = g.input("beta", d, d);
        const NodeId sn = g.input("S", d, d);
        const NodeId hat = g.matmul(g.transpose(bn), g.matmul(sn, bn));
        g.set_output(build_offdiag_energy(g, hat, d));
        const double via_graph =
            g.evaluate({{"beta", beta.matrix()}, {"S", s.matrix()}});
        const double direct = offdiag_energy(
            matmul(transpose(beta.matrix()), matmul(s.matrix(), beta.matrix())));
        CHECK(std::fabs(via_graph - direct) < 1e-12);
    }
}

TEST_CASE("backward of sum is all ones; backward of frobenius-squared is 2X") {
    Rng rng(9);
    Graph g;
    const NodeId x = g.input("x", 3, 3);
    g.set_output(g.sum(x));
    const Matrix x0 = t::random_matrix(rng, 3, 3);
    g.evaluate({{"x", x0}});
    const auto grads = g.backward();
    CHECK(max_abs(grads.at("x") - Matrix(3, 3, 1.0)) == 0.0);

    Graph g2;
    const NodeId y = g2.input("x", 3, 3);
    g2.set_output(g2.sum(g2.hadamard(y, y)));
    g2.evaluate({{"x", x0}});
    CHECK(max_abs(g2.backward().at("x") - scale(x0, 2.0)) < 1e-12);
}

TEST_CASE("every primitive passes the central-difference oracle") {
    const GradcheckReport report = gradcheck_primitives(1);
    for (const auto& [name, err] : report.per_case) {
        INFO(name);
        CHECK(err < 1e-5);
    }
}

TEST_CASE("linear-solve adjoint recovers the stated closed form") {
    Rng rng(23);
    Matrix m0 = t::random_matrix(rng, 4, 4);
    for (std::size_t i = 0; i < 4; ++i) m0(i, i) += 4.0;
    const Matrix b0 = t::random_matrix(rng, 4, 2);
    const Matrix w = t::random_matrix(rng, 4, 2);

    Graph g;
    const NodeId m = g.input("m", 4, 4);
    const NodeId b = g.input("b", 4, 2);
    g.set_output(g.sum(g.hadamard(g.linear_solve(m, b), g.constant(w))));
    g.evaluate({{"m", m0}, {"b", b0}});
    const auto grads = g.backward();

    const LuFactorization lu(m0);
    const Matrix x = lu.solve(b0);
    const Matrix db = lu.solve_transposed(w);       // M^-T @ adjoint
    const Matrix dm = scale(matmul(db, transpose(x)), -1.0);
    CHECK(max_abs(grads.at("b") - db) < 1e-12);
    CHECK(max_abs(grads.at("m") - dm) < 1e-12);
}

TEST_CASE("gradcheck of a linear graph is exact") {
    Graph g;
    const NodeId x = g.input("x", 1, 1);
    g.set_output(g.scale(x, 3.0));
    CHECK(tape::gradcheck(g, {{"x", Matrix(1, 1, 0.7)}}, 1e-6) < 1e-10);
}

TEST_CASE("cayley-then-offdiag composite passes gradcheck at d=8") {
    Rng rng(31);
    const std::size_t d = 8;
    Graph g;
    const NodeId w = g.input("w", d, d);
    const NodeId skew = g.scale(g.sub(w, g.transpose(w)), 0.5);
    const NodeId beta = build_cayley(g, skew, d);
    const NodeId s = g.constant(t::random_psd(rng, d).matrix());
    const NodeId hat = g.matmul(g.transpose(beta), g.matmul(s, beta));
    g.set_output(build_offdiag_energy(g, hat, d));
    CHECK(tape::gradcheck(g, {{"w", t::random_matrix(rng, d, d)}}, 1e-6) < 1e-5);
}

TEST_CASE("backward is linear in the output adjoint") {
    Rng rng(12);
    const Matrix x0 = t::random_matrix(rng, 3, 4, 0.5, 2.0);
    auto build = [&](double c) {
        Graph g;
        const NodeId x = g.input("x", 3, 4);
        NodeId out = g.sum(g.log(g.reciprocal(x)));
        if (c != 1.0) out = g.scale(out, c);
        g.set_output(out);
        g.evaluate({{"x", x0}});
        return g.backward().at("x");
    };
    const Matrix base = build(1.0);
    const Matrix doubled = build(2.0);
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(doubled.data()[i] == 2.0 * base.data()[i]);  // exact for powers of two
    }
    const Matrix tripled = build(3.0);
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(tripled.data()[i] ==
              doctest::Approx(3.0 * base.data()[i]).epsilon(1e-14));
    }
}

TEST_CASE("evaluation is deterministic") {
    Rng rng(77);
    Graph g;
    const NodeId x = g.input("x", 4, 4);
    const NodeId m = g.input("m", 4, 4);
    g.set_output(g.frobenius_norm(g.linear_solve(m, g.sigmoid(x))));
    Matrix m0 = t::random_matrix(rng, 4, 4);
    for (std::size_t i = 0; i < 4; ++i) m0(i, i) += 3.0;
    const tape::Bindings b{{"x", t::random_matrix(rng, 4, 4)}, {"m", m0}};
    const double first = g.evaluate(b);
    const auto grads_first = g.backward();
    const double second = g.evaluate(b);
    const auto grads_second = g.backward();
    CHECK(first == second);
    for (std::size_t i = 0; i < grads_first.at("x").size(); ++i) {
        CHECK(grads_first.at("x").data()[i] == grads_second.at("x").data()[i]);
    }
}

TEST_CASE("graph construction and evaluation errors") {
    Graph g;
    const NodeId x = g.input("x", 2, 3);
    CHECK_THROWS_AS(g.add(x, g.input("y", 3, 2)), ShapeMismatch);
    CHECK_THROWS_AS(g.backward(), NotEvaluated);
    g.set_output(g.sum(x));
    CHECK_THROWS_AS(g.evaluate({}), UnboundInput);
    CHECK_THROWS_AS(g.evaluate({{"x", Matrix(1, 1, 0.0)}, {"y", Matrix(3, 2)}}), ShapeMismatch);
    CHECK_THROWS_AS(g.set_output(x), ShapeMismatch);
}

TEST_CASE("softmax cross entropy of uniform logits is log C") {
    Graph g;
    const NodeId logits = g.input("logits", 5, 4);
    const NodeId targets = g.input("targets", 5, 4);
    g.set_output(g.softmax_cross_entropy(logits, targets));
    Matrix onehot(5, 4, 0.0);
    for (std::size_t i = 0; i < 5; ++i) onehot(i, i % 4) = 1.0;
    const double loss = g.evaluate({{"logits", Matrix(5, 4, 0.25)}, {"targets", onehot}});
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("graph json dump names every op") {
    Graph g;
    const NodeId x = g.input("x", 2, 2);
    g.set_output(g.frobenius_norm(g.relu(x)));
    const std::string dump = g.dump_json();
    CHECK(dump.find("\"op\":\"relu\"") != std::string::npos);
    CHECK(dump.find("\"op\":\"frobenius-norm\"") != std::string::npos);
    CHECK(dump.find("\"name\":\"x\"") != std::string::npos);
}
