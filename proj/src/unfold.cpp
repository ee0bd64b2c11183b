#include "cpcanet/unfold.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cpcanet/errors.hpp"
#include "cpcanet/fg.hpp"

namespace cpcanet {

SkewMatrix riemannian_gradient(const OrthogonalBasis& basis, const CovarianceSet& covs,
                               double eps) {
    if (basis.dim() != covs.dim()) throw ShapeMismatch("riemannian_gradient: dim mismatch");
    if (!(eps > 0.0)) throw std::invalid_argument("riemannian_gradient: eps must be positive");
    const std::size_t d = covs.dim();
    const Matrix& b = basis.matrix();

    Matrix grad(d, d, 0.0);
    for (std::size_t k = 0; k < covs.size(); ++k) {
        const Matrix hat = symmetrize(matmul(transpose(b), matmul(covs.domain(k).matrix(), b)));
        const double w = covs.weight(k);
        for (std::size_t l = 0; l < d; ++l) {
            for (std::size_t m = l + 1; m < d; ++m) {
                const double omega = (hat(l, l) - hat(m, m)) / (hat(l, l) * hat(m, m) + eps);
                const double v = w * hat(l, m) * omega;
                grad(l, m) += v;
                grad(m, l) -= v;
            }
        }
    }
    return SkewMatrix(std::move(grad));
}

Matrix riemannian_gradient_projection(const OrthogonalBasis& basis, const CovarianceSet& covs,
                                      double lambda_floor) {
    const std::size_t d = covs.dim();
    const Matrix& b = basis.matrix();
    Matrix euc(d, d, 0.0);
    for (std::size_t k = 0; k < covs.size(); ++k) {
        const Matrix sb = matmul(covs.domain(k).matrix(), b);
        const Matrix hat = matmul(transpose(b), sb);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t l = 0; l < d; ++l) {
                const double lam = std::max(hat(l, l), lambda_floor);
                euc(i, l) += 2.0 * covs.weight(k) * sb(i, l) / lam;
            }
        }
    }
    const Matrix bt_g = matmul(transpose(b), euc);
    return scale(bt_g - transpose(bt_g), 0.5);
}

UnfoldResult unfold_solve(const CovarianceSet& covs, const std::vector<double>& etas,
                          const UnfoldConfig& config) {
    if (etas.size() != config.stages) {
        throw std::invalid_argument("unfold_solve: etas length " + std::to_string(etas.size()) +
                                    " != stages " + std::to_string(config.stages));
    }
    for (const double eta : etas) {
        if (!(eta > 0.0 && eta < 0.5)) {
            throw std::invalid_argument("unfold_solve: eta " + std::to_string(eta) +
                                        " outside (0, 0.5)");
        }
    }
    const std::size_t d = covs.dim();

    UnfoldTrace trace;
    {
        const OrthogonalBasis id = OrthogonalBasis::identity(d);
        trace.initial_objective = negloglik(id, covs, config.lambda_floor);
        trace.initial_offdiag = cpca_loss(id, covs);
    }

    Matrix tangent(d, d, 0.0);
    OrthogonalBasis basis = OrthogonalBasis::identity(d);
    for (std::size_t t = 0; t < config.stages; ++t) {
        const SkewMatrix grad = riemannian_gradient(basis, covs, config.eps);
        const double gnorm = frobenius_norm(grad.matrix());
        const double inv = 1.0 / (gnorm + config.eps_norm);
        // This Cayley orientation satisfies d(beta) = -dA at the origin, so
        // the objective descends along +G_A in the algebra.
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                tangent(i, j) += etas[t] * (grad.matrix()(i, j) * inv);
            }
        }
        SkewMatrix a_t(tangent);
        basis = cayley(a_t);
        trace.stages.push_back(UnfoldStage{std::move(a_t), basis, etas[t],
                                           negloglik(basis, covs, config.lambda_floor),
                                           cpca_loss(basis, covs), gnorm});
    }
    return UnfoldResult{std::move(basis), std::move(trace)};
}

double cpca_loss(const OrthogonalBasis& basis, const CovarianceSet& covs) {
    if (basis.dim() != covs.dim()) throw ShapeMismatch("cpca_loss: dim mismatch");
    const Matrix& b = basis.matrix();
    double acc = 0.0;
    for (std::size_t k = 0; k < covs.size(); ++k) {
        acc += offdiag_energy(matmul(transpose(b), matmul(covs.domain(k).matrix(), b)));
    }
    return acc / static_cast<double>(covs.size());
}

// ---- graph builders ----

namespace {

using tape::Graph;
using tape::NodeId;

NodeId broadcast_scalar(Graph& g, NodeId scalar, std::size_t rows, std::size_t cols) {
    const NodeId col = g.constant(Matrix(rows, 1, 1.0));
    const NodeId row = g.constant(Matrix(1, cols, 1.0));
    return g.matmul(g.matmul(col, scalar), row);
}

}  // namespace

tape::NodeId build_cayley(tape::Graph& g, tape::NodeId skew, std::size_t d) {
    const NodeId identity = g.constant(Matrix::identity(d));
    const NodeId half = g.scale(skew, 0.5);
    return g.linear_solve(g.add(identity, half), g.sub(identity, half));
}

UnfoldGraphPieces build_unfold(tape::Graph& g, const std::vector<tape::NodeId>& cov_nodes,
                               const std::vector<double>& weights,
                               const std::vector<tape::NodeId>& etas, std::size_t d,
                               const UnfoldConfig& config) {
    if (cov_nodes.size() != weights.size()) {
        throw ShapeMismatch("build_unfold: covariance/weight count mismatch");
    }
    if (etas.size() != config.stages) {
        throw ShapeMismatch("build_unfold: etas length != stages");
    }

    UnfoldGraphPieces pieces;
    pieces.covariances = cov_nodes;
    const NodeId eps_mat = g.constant(Matrix(d, d, config.eps));
    const NodeId ones_row = g.constant(Matrix(1, d, 1.0));
    const NodeId eps_norm = g.constant(Matrix(1, 1, config.eps_norm));

    NodeId tangent = g.constant(Matrix(d, d, 0.0));  // A_0
    NodeId basis = build_cayley(g, tangent, d);      // beta_0 = I
    for (std::size_t t = 0; t < config.stages; ++t) {
        const NodeId basis_t = g.transpose(basis);

        NodeId grad = -1;
        for (std::size_t k = 0; k < cov_nodes.size(); ++k) {
            const NodeId raw = g.matmul(basis_t, g.matmul(cov_nodes[k], basis));
            const NodeId hat = g.scale(g.add(raw, g.transpose(raw)), 0.5);
            const NodeId lam = g.diag_extract(hat);         // d x 1
            const NodeId rowrep = g.matmul(lam, ones_row);  // [l, m] = lam_l
            const NodeId colrep = g.transpose(rowrep);      // [l, m] = lam_m
            const NodeId num = g.sub(rowrep, colrep);
            const NodeId den = g.add(g.hadamard(rowrep, colrep), eps_mat);
            const NodeId omega = g.hadamard(num, g.reciprocal(den));
            const NodeId term = g.scale(g.hadamard(hat, omega), weights[k]);
            grad = k == 0 ? term : g.add(grad, term);
        }

        const NodeId gnorm = g.frobenius_norm(grad);
        pieces.grad_norms.push_back(gnorm);
        const NodeId inv = g.reciprocal(g.add(gnorm, eps_norm));
        const NodeId normalized = g.hadamard(grad, broadcast_scalar(g, inv, d, d));
        const NodeId step = g.hadamard(normalized, broadcast_scalar(g, etas[t], d, d));
        tangent = g.add(tangent, step);  // descent: d(beta) = -dA for this retraction
        basis = build_cayley(g, tangent, d);  // beta_{t+1}
        pieces.stage_bases.push_back(basis);
    }
    pieces.basis = basis;
    return pieces;
}

tape::NodeId build_offdiag_energy(tape::Graph& g, tape::NodeId m, std::size_t d) {
    if (d < 2) throw DimensionTooSmall("build_offdiag_energy: need d >= 2");
    const NodeId total = g.sum(g.hadamard(m, m));
    const NodeId lam = g.diag_extract(m);
    const NodeId diag = g.sum(g.hadamard(lam, lam));
    return g.scale(g.sub(total, diag), 1.0 / static_cast<double>(d * (d - 1)));
}

tape::NodeId build_cpca_loss(tape::Graph& g, tape::NodeId basis,
                             const std::vector<tape::NodeId>& cov_nodes, std::size_t d) {
    const NodeId basis_t = g.transpose(basis);
    NodeId acc = -1;
    for (std::size_t k = 0; k < cov_nodes.size(); ++k) {
        const NodeId hat = g.matmul(basis_t, g.matmul(cov_nodes[k], basis));
        const NodeId energy = build_offdiag_energy(g, hat, d);
        acc = k == 0 ? energy : g.add(acc, energy);
    }
    return g.scale(acc, 1.0 / static_cast<double>(cov_nodes.size()));
}

}  // namespace cpcanet
