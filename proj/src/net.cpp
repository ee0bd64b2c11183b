#include "cpcanet/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <json.hpp>

#include "cpcanet/errors.hpp"
#include "cpcanet/io.hpp"
#include "cpcanet/rng.hpp"

namespace cpcanet {

namespace {

double sigmoid_stable(double t) {
    return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

Matrix relu_mat(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        out.data()[i] = v > 0.0 ? v : 0.0;
    }
    return out;
}

// x * W + b broadcast over rows; arithmetic matches the graph's
// add(matmul(x, W), ones * b) node for node.
Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix out = matmul(x, w);
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
    return out;
}

struct TensorSpec {
    std::string name;
    std::size_t rows, cols;
    std::size_t fan_in;
    bool zero_init;
};

std::vector<TensorSpec> tensor_specs(const Dims& dm) {
    const std::size_t kd2 = dm.K * dm.d * dm.d;
    return {
        {"backbone.W1", dm.p, dm.backbone_hidden, dm.p, false},
        {"backbone.b1", 1, dm.backbone_hidden, dm.p, false},
        {"backbone.W2", dm.backbone_hidden, dm.D, dm.backbone_hidden, false},
        {"backbone.b2", 1, dm.D, dm.backbone_hidden, false},
        {"bottleneck.W", dm.D, dm.d, dm.D, false},
        {"bottleneck.b", 1, dm.d, dm.D, false},
        {"hyper.W1", kd2, dm.hyper_hidden, kd2, false},
        {"hyper.b1", 1, dm.hyper_hidden, kd2, false},
        {"hyper.W2", dm.hyper_hidden, dm.T, dm.hyper_hidden, false},
        {"hyper.b2", 1, dm.T, dm.hyper_hidden, false},
        {"mlp_gamma.W1", dm.d, dm.D, dm.d, false},
        {"mlp_gamma.b1", 1, dm.D, dm.d, false},
        {"mlp_gamma.W2", dm.D, dm.D, dm.D, true},
        {"mlp_gamma.b2", 1, dm.D, dm.D, true},
        {"mlp_delta.W1", dm.d, dm.D, dm.d, false},
        {"mlp_delta.b1", 1, dm.D, dm.d, false},
        {"mlp_delta.W2", dm.D, dm.D, dm.D, true},
        {"mlp_delta.b2", 1, dm.D, dm.D, true},
        {"cls.W", dm.D, dm.C, dm.D, false},
        {"cls.b", 1, dm.C, dm.D, false},
    };
}

}  // namespace

ModelParams ModelParams::init(const Dims& dims, std::uint64_t seed) {
    ModelParams params;
    params.dims = dims;
    params.beta_buffer = Matrix::identity(dims.d);
    for (const TensorSpec& spec : tensor_specs(dims)) {
        Matrix t(spec.rows, spec.cols, 0.0);
        if (!spec.zero_init) {
            Rng rng = Rng::fork(seed, "init." + spec.name);
            // Fan-in scaled uniform; the bottleneck gets a gain of 4 so the
            // latent covariances start O(1), the operating point the solver
            // and hypernetwork are built around.
            const double gain = spec.name == "bottleneck.W" ? 4.0 : 1.0;
            const double bound = gain / std::sqrt(static_cast<double>(spec.fan_in));
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
        }
        params.tensors.emplace(spec.name, std::move(t));
    }
    return params;
}

const Matrix& ModelParams::at(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw UnboundInput("ModelParams: no tensor " + name);
    return it->second;
}

Matrix& ModelParams::at(const std::string& name) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw UnboundInput("ModelParams: no tensor " + name);
    return it->second;
}

bool ModelParams::is_backbone(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

bool ModelParams::is_modulation(const std::string& name) {
    return name.rfind("mlp_gamma.", 0) == 0 || name.rfind("mlp_delta.", 0) == 0;
}

std::vector<double> hypernet_step_sizes(const CovarianceSet& covs, const ModelParams& params) {
    const Dims& dm = params.dims;
    if (covs.size() != dm.K) {
        throw WrongDomainCount("hypernet_step_sizes: got K = " + std::to_string(covs.size()) +
                               ", configured K = " + std::to_string(dm.K));
    }
    if (covs.dim() != dm.d) throw ShapeMismatch("hypernet_step_sizes: covariance dim != d");

    Matrix flat(1, dm.K * dm.d * dm.d);
    std::size_t idx = 0;
    for (std::size_t k = 0; k < dm.K; ++k) {
        const Matrix& s = covs.domain(k).matrix();
        for (std::size_t l = 0; l < dm.d; ++l)
            for (std::size_t m = 0; m < dm.d; ++m) flat(0, idx++) = s(l, m);
    }
    const Matrix hidden = relu_mat(linear(flat, params.at("hyper.W1"), params.at("hyper.b1")));
    const Matrix out = linear(hidden, params.at("hyper.W2"), params.at("hyper.b2"));
    std::vector<double> etas(dm.T);
    for (std::size_t t = 0; t < dm.T; ++t) etas[t] = 0.5 * sigmoid_stable(out(0, t));
    return etas;
}

Matrix modulate(const Matrix& f, const Matrix& u, const ModelParams& params) {
    if (f.rows() != u.rows()) throw ShapeMismatch("modulate: row count mismatch");
    const Matrix hg = relu_mat(linear(u, params.at("mlp_gamma.W1"), params.at("mlp_gamma.b1")));
    const Matrix og = linear(hg, params.at("mlp_gamma.W2"), params.at("mlp_gamma.b2"));
    const Matrix hd = relu_mat(linear(u, params.at("mlp_delta.W1"), params.at("mlp_delta.b1")));
    const Matrix od = linear(hd, params.at("mlp_delta.W2"), params.at("mlp_delta.b2"));
    Matrix out(f.rows(), f.cols());
    for (std::size_t i = 0; i < f.rows(); ++i) {
        for (std::size_t j = 0; j < f.cols(); ++j) {
            out(i, j) = f(i, j) * (2.0 * sigmoid_stable(og(i, j))) + od(i, j);
        }
    }
    return out;
}

Matrix erm_logits(const ModelParams& params, const Matrix& x) {
    const Matrix hidden = relu_mat(linear(x, params.at("backbone.W1"), params.at("backbone.b1")));
    const Matrix features = linear(hidden, params.at("backbone.W2"), params.at("backbone.b2"));
    return linear(features, params.at("cls.W"), params.at("cls.b"));
}

Matrix cpcanet_logits(const ModelParams& params, const Matrix& x) {
    const Matrix hidden = relu_mat(linear(x, params.at("backbone.W1"), params.at("backbone.b1")));
    const Matrix features = linear(hidden, params.at("backbone.W2"), params.at("backbone.b2"));
    const Matrix z = linear(features, params.at("bottleneck.W"), params.at("bottleneck.b"));
    const Matrix u = matmul(z, params.beta_buffer);
    const Matrix modulated = modulate(features, u, params);
    return linear(modulated, params.at("cls.W"), params.at("cls.b"));
}

Matrix smoothed_targets(const std::vector<int>& labels, std::size_t classes, double smoothing) {
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
        throw std::invalid_argument("smoothed_targets: smoothing outside [0, 1)");
    }
    Matrix t(labels.size(), classes, smoothing / static_cast<double>(classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
            throw SchemaMismatch("smoothed_targets: label out of range");
        }
        t(i, static_cast<std::size_t>(labels[i])) += 1.0 - smoothing;
    }
    return t;
}

double task_loss(const Matrix& logits, const std::vector<int>& labels, double smoothing) {
    const Matrix targets = smoothed_targets(labels, logits.cols(), smoothing);
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double m = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) m = std::max(m, logits(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - m);
        const double lse = m + std::log(z);
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            loss += targets(i, j) * (lse - logits(i, j));
        }
    }
    return loss / static_cast<double>(logits.rows());
}

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
    if (logits.rows() != labels.size()) throw ShapeMismatch("accuracy: row mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits(i, j) > logits(i, best)) best = j;
        }
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

double total_loss(const ForwardOutput& out, const std::vector<int>& labels, double lambda_cpca,
                  double smoothing) {
    if (lambda_cpca < 0.0) throw std::invalid_argument("total_loss: negative lambda");
    return task_loss(out.logits, labels, smoothing) + lambda_cpca * out.cpca;
}

// ---- training program ----

namespace {

using tape::Graph;
using tape::NodeId;

NodeId broadcast_rows(Graph& g, NodeId row_vec, std::size_t rows) {
    return g.matmul(g.constant(Matrix(rows, 1, 1.0)), row_vec);
}

std::string hyper_block_name(std::size_t k, std::size_t l) {
    return "hyper.W1#" + std::to_string(k) + "#" + std::to_string(l);
}

NodeId graph_param(Graph& g, const Dims& dims, const char* name) {
    for (const TensorSpec& s : tensor_specs(dims)) {
        if (s.name == name) return g.input(s.name, s.rows, s.cols);
    }
    throw UnboundInput(std::string("graph_param: unknown tensor ") + name);
}

}  // namespace

tape::NodeId build_hypernet_etas(tape::Graph& g, const std::vector<tape::NodeId>& cov_nodes,
                                 const Dims& dims, tape::NodeId mask) {
    if (cov_nodes.size() != dims.K) {
        throw WrongDomainCount("build_hypernet_etas: got " + std::to_string(cov_nodes.size()) +
                               " covariances, configured K = " + std::to_string(dims.K));
    }
    // First layer evaluated block-wise: rows (k*d*d + l*d .. +d) of hyper.W1
    // multiply row l of S_k, which is the row-major flatten-and-concatenate.
    NodeId pre = -1;
    for (std::size_t k = 0; k < dims.K; ++k) {
        for (std::size_t l = 0; l < dims.d; ++l) {
            Matrix picker(1, dims.d, 0.0);
            picker(0, l) = 1.0;
            const NodeId srow = g.matmul(g.constant(std::move(picker)), cov_nodes[k]);
            const NodeId block = g.input(hyper_block_name(k, l), dims.d, dims.hyper_hidden);
            const NodeId term = g.matmul(srow, block);
            pre = pre < 0 ? term : g.add(pre, term);
        }
    }
    pre = g.add(pre, graph_param(g, dims, "hyper.b1"));
    NodeId hidden = g.relu(pre);
    if (mask >= 0) hidden = g.hadamard(hidden, mask);
    const NodeId out =
        g.add(g.matmul(hidden, graph_param(g, dims, "hyper.W2")), graph_param(g, dims, "hyper.b2"));
    return g.scale(g.sigmoid(out), 0.5);
}

tape::NodeId build_modulation(tape::Graph& g, tape::NodeId features, tape::NodeId u,
                              std::size_t rows, const Dims& dims, tape::NodeId mask_gamma,
                              tape::NodeId mask_delta) {
    const NodeId wg1 = graph_param(g, dims, "mlp_gamma.W1");
    const NodeId bg1 = graph_param(g, dims, "mlp_gamma.b1");
    const NodeId wg2 = graph_param(g, dims, "mlp_gamma.W2");
    const NodeId bg2 = graph_param(g, dims, "mlp_gamma.b2");
    const NodeId wd1 = graph_param(g, dims, "mlp_delta.W1");
    const NodeId bd1 = graph_param(g, dims, "mlp_delta.b1");
    const NodeId wd2 = graph_param(g, dims, "mlp_delta.W2");
    const NodeId bd2 = graph_param(g, dims, "mlp_delta.b2");

    NodeId gh = g.relu(g.add(g.matmul(u, wg1), broadcast_rows(g, bg1, rows)));
    if (mask_gamma >= 0) gh = g.hadamard(gh, mask_gamma);
    const NodeId gamma =
        g.scale(g.sigmoid(g.add(g.matmul(gh, wg2), broadcast_rows(g, bg2, rows))), 2.0);

    NodeId dh = g.relu(g.add(g.matmul(u, wd1), broadcast_rows(g, bd1, rows)));
    if (mask_delta >= 0) dh = g.hadamard(dh, mask_delta);
    const NodeId delta = g.add(g.matmul(dh, wd2), broadcast_rows(g, bd2, rows));

    return g.add(g.hadamard(features, gamma), delta);
}

void bind_hypernet(tape::Bindings& bindings, const ModelParams& params) {
    const Dims& dm = params.dims;
    bindings.emplace("hyper.b1", params.at("hyper.b1"));
    bindings.emplace("hyper.W2", params.at("hyper.W2"));
    bindings.emplace("hyper.b2", params.at("hyper.b2"));
    const Matrix& w1 = params.at("hyper.W1");
    for (std::size_t k = 0; k < dm.K; ++k) {
        for (std::size_t l = 0; l < dm.d; ++l) {
            Matrix block(dm.d, dm.hyper_hidden);
            const std::size_t base = k * dm.d * dm.d + l * dm.d;
            for (std::size_t r = 0; r < dm.d; ++r)
                for (std::size_t c = 0; c < dm.hyper_hidden; ++c) block(r, c) = w1(base + r, c);
            bindings.emplace(hyper_block_name(k, l), std::move(block));
        }
    }
}

void bind_modulation(tape::Bindings& bindings, const ModelParams& params) {
    for (const char* name : {"mlp_gamma.W1", "mlp_gamma.b1", "mlp_gamma.W2", "mlp_gamma.b2",
                             "mlp_delta.W1", "mlp_delta.b1", "mlp_delta.W2", "mlp_delta.b2"}) {
        bindings.emplace(name, params.at(name));
    }
}

TrainingProgram::TrainingProgram(Mode mode, const Dims& dims, std::vector<std::size_t> block_sizes,
                                 const NetConfig& config)
    : mode_(mode), dims_(dims), config_(config), blocks_(std::move(block_sizes)) {
    if (mode_ == Mode::CpcaNet && blocks_.size() != dims_.K) {
        throw WrongDomainCount("TrainingProgram: batch has " + std::to_string(blocks_.size()) +
                               " domains, configured K = " + std::to_string(dims_.K));
    }
    for (const std::size_t b : blocks_) {
        if (b < 2) throw DegenerateBatch("TrainingProgram: domain block below 2 samples");
        batch_rows_ += b;
    }
    if (mode_ == Mode::Erm && batch_rows_ == 0) {
        throw DegenerateBatch("TrainingProgram: empty batch");
    }
    Graph& g = graph_;
    const std::size_t B = batch_rows_;

    x_ = g.input("X", B, dims_.p);
    targets_ = g.input("targets", B, dims_.C);
    auto param = [&](const char* name) { return graph_param(g, dims_, name); };

    const NodeId wb1 = param("backbone.W1"), bb1 = param("backbone.b1");
    const NodeId wb2 = param("backbone.W2"), bb2 = param("backbone.b2");
    const NodeId wcls = param("cls.W"), bcls = param("cls.b");

    const NodeId hidden = g.relu(g.add(g.matmul(x_, wb1), broadcast_rows(g, bb1, B)));
    const NodeId features = g.add(g.matmul(hidden, wb2), broadcast_rows(g, bb2, B));

    if (mode_ == Mode::Erm) {
        logits_ = g.add(g.matmul(features, wcls), broadcast_rows(g, bcls, B));
        task_ = g.softmax_cross_entropy(logits_, targets_);
        total_ = task_;
        g.set_output(total_);
        return;
    }

    const NodeId wpsi = param("bottleneck.W"), bpsi = param("bottleneck.b");
    const NodeId z = g.add(g.matmul(features, wpsi), broadcast_rows(g, bpsi, B));
    bottleneck_ = z;

    // Per-domain covariances: one constant per block that both selects the
    // block rows and centers them, so S_k = C_k^T C_k / (B_k - 1).
    std::vector<double> weights;
    std::size_t row0 = 0;
    for (std::size_t k = 0; k < dims_.K; ++k) {
        const std::size_t bk = blocks_[k];
        Matrix select_center(bk, B, 0.0);
        for (std::size_t i = 0; i < bk; ++i) {
            for (std::size_t j = 0; j < bk; ++j) {
                select_center(i, row0 + j) =
                    (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(bk);
            }
        }
        const NodeId centered = g.matmul(g.constant(std::move(select_center)), z);
        const NodeId raw = g.scale(g.matmul(g.transpose(centered), centered),
                                   1.0 / static_cast<double>(bk - 1));
        cov_nodes_.push_back(g.scale(g.add(raw, g.transpose(raw)), 0.5));
        weights.push_back(static_cast<double>(bk - 1));
        row0 += bk;
    }

    mask_hyper_ = g.input("mask.hyper", 1, dims_.hyper_hidden);
    eta_row_ = build_hypernet_etas(g, cov_nodes_, dims_, mask_hyper_);

    std::vector<NodeId> etas;
    for (std::size_t t = 0; t < dims_.T; ++t) {
        Matrix pick(dims_.T, 1, 0.0);
        pick(t, 0) = 1.0;
        etas.push_back(g.matmul(eta_row_, g.constant(std::move(pick))));
    }

    UnfoldConfig ucfg;
    ucfg.stages = dims_.T;
    ucfg.eps = config_.unfold_eps;
    ucfg.eps_norm = config_.unfold_eps_norm;
    const UnfoldGraphPieces unfolded = build_unfold(g, cov_nodes_, weights, etas, dims_.d, ucfg);
    basis_ = unfolded.basis;

    const NodeId u = g.matmul(z, basis_);
    projection_ = u;

    mask_gamma_ = g.input("mask.gamma", B, dims_.D);
    mask_delta_ = g.input("mask.delta", B, dims_.D);
    const NodeId modulated =
        build_modulation(g, features, u, B, dims_, mask_gamma_, mask_delta_);
    logits_ = g.add(g.matmul(modulated, wcls), broadcast_rows(g, bcls, B));
    task_ = g.softmax_cross_entropy(logits_, targets_);
    cpca_ = build_cpca_loss(g, basis_, cov_nodes_, dims_.d);
    total_ = g.add(task_, g.scale(cpca_, config_.lambda_cpca));
    g.set_output(total_);
}

tape::Bindings TrainingProgram::bind(const ModelParams& params, const Matrix& x,
                                     const Matrix& targets, const Matrix& mask_hyper,
                                     const Matrix& mask_gamma, const Matrix& mask_delta) const {
    if (params.dims.p != dims_.p || params.dims.D != dims_.D || params.dims.d != dims_.d ||
        params.dims.T != dims_.T || params.dims.K != dims_.K || params.dims.C != dims_.C) {
        throw ShapeMismatch("TrainingProgram::bind: params built for other dims");
    }
    tape::Bindings b;
    b.emplace("X", x);
    b.emplace("targets", targets);
    b.emplace("backbone.W1", params.at("backbone.W1"));
    b.emplace("backbone.b1", params.at("backbone.b1"));
    b.emplace("backbone.W2", params.at("backbone.W2"));
    b.emplace("backbone.b2", params.at("backbone.b2"));
    b.emplace("cls.W", params.at("cls.W"));
    b.emplace("cls.b", params.at("cls.b"));
    if (mode_ == Mode::Erm) return b;

    b.emplace("bottleneck.W", params.at("bottleneck.W"));
    b.emplace("bottleneck.b", params.at("bottleneck.b"));
    bind_hypernet(b, params);
    bind_modulation(b, params);

    b.emplace("mask.hyper",
              mask_hyper.size() > 0 ? mask_hyper : Matrix(1, dims_.hyper_hidden, 1.0));
    b.emplace("mask.gamma",
              mask_gamma.size() > 0 ? mask_gamma : Matrix(batch_rows_, dims_.D, 1.0));
    b.emplace("mask.delta",
              mask_delta.size() > 0 ? mask_delta : Matrix(batch_rows_, dims_.D, 1.0));
    return b;
}

std::map<std::string, Matrix> TrainingProgram::parameter_gradients(
    const std::map<std::string, Matrix>& raw) const {
    std::map<std::string, Matrix> out;
    Matrix hyper_w1;
    bool have_hyper = false;
    for (const auto& [name, grad] : raw) {
        if (name == "X" || name == "targets" || name.rfind("mask.", 0) == 0) continue;
        if (name.rfind("hyper.W1#", 0) == 0) {
            if (!have_hyper) {
                hyper_w1 = Matrix(dims_.K * dims_.d * dims_.d, dims_.hyper_hidden, 0.0);
                have_hyper = true;
            }
            const std::size_t sep = name.find('#', 9);
            const std::size_t k = std::stoul(name.substr(9, sep - 9));
            const std::size_t l = std::stoul(name.substr(sep + 1));
            const std::size_t base = k * dims_.d * dims_.d + l * dims_.d;
            for (std::size_t r = 0; r < dims_.d; ++r)
                for (std::size_t c = 0; c < dims_.hyper_hidden; ++c)
                    hyper_w1(base + r, c) = grad(r, c);
            continue;
        }
        out.emplace(name, grad);
    }
    if (have_hyper) out.emplace("hyper.W1", std::move(hyper_w1));
    return out;
}

ForwardOutput TrainingProgram::extract() const {
    const tape::Graph& g = graph_;
    ForwardOutput out{g.value_of(logits_),
                      mode_ == Mode::Erm ? OrthogonalBasis::identity(dims_.d)
                                         : OrthogonalBasis(g.value_of(basis_)),
                      {},
                      {},
                      g.value_of(task_)(0, 0),
                      0.0,
                      g.value_of(total_)(0, 0)};
    if (mode_ == Mode::CpcaNet) {
        for (const tape::NodeId id : cov_nodes_) out.covariances.push_back(g.value_of(id));
        const Matrix& eta = g.value_of(eta_row_);
        for (std::size_t t = 0; t < dims_.T; ++t) out.etas.push_back(eta(0, t));
        out.cpca = g.value_of(cpca_)(0, 0);
    }
    return out;
}

ForwardOutput cpcanet_forward(const DomainBatch& batch, const ModelParams& params,
                              const NetConfig& config) {
    if (batch.domain_sizes.size() != params.dims.K) {
        throw WrongDomainCount("cpcanet_forward: batch has " +
                               std::to_string(batch.domain_sizes.size()) + " domains, K = " +
                               std::to_string(params.dims.K));
    }
    TrainingProgram program(TrainingProgram::Mode::CpcaNet, params.dims, batch.domain_sizes,
                            config);
    const Matrix targets = smoothed_targets(batch.labels, params.dims.C, config.smoothing);
    program.graph().evaluate(program.bind(params, batch.features, targets));
    return program.extract();
}

// ---- trainer ----

namespace {

struct AdamState {
    Matrix m, v;
};

Matrix sample_mask(Rng& rng, std::size_t rows, std::size_t cols, double dropout) {
    Matrix mask(rows, cols);
    const double keep = 1.0 - dropout;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    }
    return mask;
}

}  // namespace

double heldout_accuracy(const ModelParams& params, const ToyDGDataset& dataset, bool erm_mode) {
    const DomainData& held = dataset.domains[dataset.heldout];
    const Matrix logits =
        erm_mode ? erm_logits(params, held.features) : cpcanet_logits(params, held.features);
    return accuracy(logits, held.labels);
}

TrainResult train(const ToyDGDataset& dataset, const TrainerConfig& config) {
    const Dims& dm = config.dims;
    if (dataset.feature_dim != dm.p) throw ShapeMismatch("train: dataset p != config p");
    if (dataset.class_count > dm.C) throw ShapeMismatch("train: dataset classes exceed C");
    if (dataset.domains.size() != dm.K + 1) {
        throw WrongDomainCount("train: dataset has " + std::to_string(dataset.domains.size()) +
                               " domains, expected K + 1 = " + std::to_string(dm.K + 1));
    }
    if (dataset.heldout >= dataset.domains.size()) {
        throw WrongDomainCount("train: dataset has no held-out domain to evaluate against");
    }
    if (!(config.dropout >= 0.0 && config.dropout < 1.0)) {
        throw std::invalid_argument("train: dropout outside [0, 1)");
    }

    BatchSampler sampler(dataset, config.batch_per_domain, config.train_fraction);
    ModelParams params = ModelParams::init(dm, config.seed);

    NetConfig net_config;
    net_config.lambda_cpca = config.lambda_cpca;
    net_config.smoothing = config.smoothing;
    const auto mode =
        config.erm_mode ? TrainingProgram::Mode::Erm : TrainingProgram::Mode::CpcaNet;
    TrainingProgram program(
        mode, dm, std::vector<std::size_t>(dm.K, config.batch_per_domain), net_config);

    Rng batch_rng = Rng::fork(config.seed, "batch");
    Rng dropout_rng = Rng::fork(config.seed, "dropout");

    std::map<std::string, AdamState> adam;
    std::size_t adam_t = 0;
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    TrainResult result{std::move(params), {}, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0};
    const DomainBatch validation = sampler.validation_pool();

    for (std::size_t step = 1; step <= config.steps; ++step) {
        const DomainBatch batch = sampler.next(batch_rng);
        const Matrix targets = smoothed_targets(batch.labels, dm.C, config.smoothing);

        Matrix mh, mg, md;
        if (!config.erm_mode && config.dropout > 0.0) {
            mh = sample_mask(dropout_rng, 1, dm.hyper_hidden, config.dropout);
            mg = sample_mask(dropout_rng, batch.features.rows(), dm.D, config.dropout);
            md = sample_mask(dropout_rng, batch.features.rows(), dm.D, config.dropout);
        }
        program.graph().evaluate(
            program.bind(result.params, batch.features, targets, mh, mg, md));
        const ForwardOutput out = program.extract();

        auto grads = program.parameter_gradients(program.graph().backward());
        if (config.freeze_modulation) {
            for (auto it = grads.begin(); it != grads.end();) {
                it = ModelParams::is_modulation(it->first) ? grads.erase(it) : std::next(it);
            }
        }

        ++adam_t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_t));
        for (const auto& [name, grad] : grads) {
            Matrix& tensor = result.params.at(name);
            AdamState& state = adam.try_emplace(name, AdamState{Matrix(tensor.rows(), tensor.cols(), 0.0),
                                                                Matrix(tensor.rows(), tensor.cols(), 0.0)})
                                   .first->second;
            const double lr =
                ModelParams::is_backbone(name) ? config.lr_backbone : config.lr_cpcanet;
            for (std::size_t i = 0; i < tensor.size(); ++i) {
                const double gi = grad.data()[i];
                state.m.data()[i] = beta1 * state.m.data()[i] + (1.0 - beta1) * gi;
                state.v.data()[i] = beta2 * state.v.data()[i] + (1.0 - beta2) * gi * gi;
                const double mhat = state.m.data()[i] / bc1;
                const double vhat = state.v.data()[i] / bc2;
                tensor.data()[i] -= lr * mhat / (std::sqrt(vhat) + adam_eps);
            }
        }

        if (!config.erm_mode) {
            result.params.beta_buffer = out.basis.matrix();
            for (const double eta : out.etas) {
                result.eta_min = std::min(result.eta_min, eta);
                result.eta_max = std::max(result.eta_max, eta);
            }
        }

        MetricsRow row{step, out.task_loss, out.cpca, 0.0, 0.0, false};
        if (!out.etas.empty()) {
            double acc = 0.0;
            for (const double eta : out.etas) acc += eta;
            row.eta_mean = acc / static_cast<double>(out.etas.size());
        }
        if (config.eval_interval > 0 &&
            (step % config.eval_interval == 0 || step == config.steps)) {
            row.heldout_acc = heldout_accuracy(result.params, dataset, config.erm_mode);
            row.has_eval = true;
        }
        if (step == 1) result.step0_cpca = out.cpca;
        result.final_cpca = out.cpca;
        result.metrics.push_back(row);
    }

    result.final_heldout_acc = heldout_accuracy(result.params, dataset, config.erm_mode);
    {
        const Matrix logits = config.erm_mode
                                  ? erm_logits(result.params, validation.features)
                                  : cpcanet_logits(result.params, validation.features);
        result.final_indomain_acc = accuracy(logits, validation.labels);
    }
    return result;
}

std::vector<std::size_t> default_sweep_dims() { return {4, 8, 16, 256}; }

std::vector<std::size_t> default_sweep_stages() { return {1, 3, 5}; }

std::vector<SweepCell> run_sweep(const ToyDGDataset& dataset, const TrainerConfig& base,
                                 const std::vector<std::size_t>& d_values,
                                 const std::vector<std::size_t>& stage_values, std::size_t seeds,
                                 std::size_t jobs) {
    if (seeds == 0) throw std::invalid_argument("run_sweep: need at least one seed");
    auto run_cell = [&](std::size_t d, std::size_t stages) {
        SweepCell cell{d, stages, seeds, 0.0, 0.0, 0.0, 0.0};
        std::vector<double> accs, cpcas;
        for (std::size_t i = 0; i < seeds; ++i) {
            TrainerConfig config = base;
            config.dims.d = d;
            config.dims.T = stages;
            const std::string tag = "sweep.d" + std::to_string(d) + ".T" + std::to_string(stages) +
                                    ".s" + std::to_string(i);
            config.seed = Rng::fork(base.seed, tag).next_u64();
            const TrainResult result = train(dataset, config);
            if (!std::isfinite(result.metrics.back().task) || !std::isfinite(result.final_cpca)) {
                throw InvariantViolation("run_sweep: non-finite loss in cell d=" +
                                         std::to_string(d) + " T=" + std::to_string(stages));
            }
            accs.push_back(result.final_heldout_acc);
            cpcas.push_back(result.final_cpca);
        }
        auto mean_std = [](const std::vector<double>& xs) {
            double mean = 0.0;
            for (const double x : xs) mean += x;
            mean /= static_cast<double>(xs.size());
            double var = 0.0;
            for (const double x : xs) var += (x - mean) * (x - mean);
            var /= static_cast<double>(xs.size());
            return std::pair<double, double>(mean, std::sqrt(var));
        };
        std::tie(cell.acc_mean, cell.acc_std) = mean_std(accs);
        std::tie(cell.cpca_mean, cell.cpca_std) = mean_std(cpcas);
        return cell;
    };

    std::vector<std::pair<std::size_t, std::size_t>> grid;
    for (const std::size_t d : d_values)
        for (const std::size_t t : stage_values) grid.emplace_back(d, t);

    std::vector<SweepCell> cells(grid.size());
    if (jobs <= 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) cells[i] = run_cell(grid[i].first, grid[i].second);
        return cells;
    }
    std::vector<std::future<SweepCell>> pending;
    std::size_t next = 0;
    while (next < grid.size() || !pending.empty()) {
        while (pending.size() < jobs && next < grid.size()) {
            const auto [d, t] = grid[next++];
            pending.push_back(std::async(std::launch::async, run_cell, d, t));
        }
        const std::size_t done = next - pending.size();
        cells[done] = pending.front().get();
        pending.erase(pending.begin());
    }
    return cells;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SchemaMismatch("write_sweep_csv: cannot open " + path);
    out << "d,T,seeds,heldout_acc_mean,heldout_acc_std,final_L_CPCA_mean,final_L_CPCA_std\n";
    for (const SweepCell& c : cells) {
        out << c.d << ',' << c.stages << ',' << c.seeds << ',' << format_double(c.acc_mean) << ','
            << format_double(c.acc_std) << ',' << format_double(c.cpca_mean) << ','
            << format_double(c.cpca_std) << '\n';
    }
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SchemaMismatch("write_metrics_csv: cannot open " + path);
    out << "step,L_task,L_CPCA,eta_mean,heldout_acc\n";
    for (const MetricsRow& r : rows) {
        out << r.step << ',' << format_double(r.task) << ',' << format_double(r.cpca) << ','
            << format_double(r.eta_mean) << ',';
        if (r.has_eval) out << format_double(r.heldout_acc);
        out << '\n';
    }
}

void save_params(const ModelParams& params, const std::string& bin_path,
                 const std::string& manifest_path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw SchemaMismatch("save_params: cannot open " + bin_path);
    std::size_t offset = 0;
    auto dump = [&](const std::string& name, const Matrix& m) {
        bin.write(reinterpret_cast<const char*>(m.data()),
                  static_cast<std::streamsize>(m.size() * sizeof(double)));
        tensors.push_back(nlohmann::json{
            {"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
        offset += m.size();
    };
    for (const auto& [name, tensor] : params.tensors) dump(name, tensor);
    dump("beta_buffer", params.beta_buffer);

    const Dims& dm = params.dims;
    const nlohmann::json manifest{
        {"dims",
         {{"p", dm.p},
          {"D", dm.D},
          {"d", dm.d},
          {"T", dm.T},
          {"K", dm.K},
          {"C", dm.C},
          {"backbone_hidden", dm.backbone_hidden},
          {"hyper_hidden", dm.hyper_hidden}}},
        {"dtype", "float64"},
        {"tensors", tensors}};
    std::ofstream mout(manifest_path);
    if (!mout) throw SchemaMismatch("save_params: cannot open " + manifest_path);
    mout << manifest.dump(2) << '\n';
}

ModelParams load_params(const std::string& bin_path, const std::string& manifest_path) {
    std::ifstream min(manifest_path);
    if (!min) throw SchemaMismatch("load_params: cannot open " + manifest_path);
    nlohmann::json manifest;
    try {
        min >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaMismatch(std::string("load_params: bad manifest: ") + e.what());
    }
    Dims dm;
    const auto& jd = manifest.at("dims");
    dm.p = jd.at("p").get<std::size_t>();
    dm.D = jd.at("D").get<std::size_t>();
    dm.d = jd.at("d").get<std::size_t>();
    dm.T = jd.at("T").get<std::size_t>();
    dm.K = jd.at("K").get<std::size_t>();
    dm.C = jd.at("C").get<std::size_t>();
    dm.backbone_hidden = jd.at("backbone_hidden").get<std::size_t>();
    dm.hyper_hidden = jd.at("hyper_hidden").get<std::size_t>();

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw SchemaMismatch("load_params: cannot open " + bin_path);

    ModelParams params;
    params.dims = dm;
    for (const auto& t : manifest.at("tensors")) {
        const auto name = t.at("name").get<std::string>();
        Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
        bin.seekg(static_cast<std::streamoff>(t.at("offset").get<std::size_t>() * sizeof(double)));
        bin.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!bin) throw SchemaMismatch("load_params: truncated " + bin_path);
        if (name == "beta_buffer") {
            params.beta_buffer = std::move(m);
        } else {
            params.tensors.emplace(name, std::move(m));
        }
    }
    return params;
}

}  // namespace cpcanet
