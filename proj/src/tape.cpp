#include "cpcanet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <stdexcept>
#include <string>

#include "cpcanet/errors.hpp"

namespace cpcanet::tape {

namespace debug {
bool corrupt_matmul_adjoint = false;
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::MatMul: return "matmul";
        case OpKind::Hadamard: return "hadamard";
        case OpKind::Transpose: return "transpose";
        case OpKind::DiagExtract: return "diag-extract";
        case OpKind::DiagEmbed: return "diag-embed";
        case OpKind::Reciprocal: return "reciprocal";
        case OpKind::Log: return "log";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Relu: return "relu";
        case OpKind::Scale: return "scale";
        case OpKind::Sum: return "sum";
        case OpKind::FrobeniusNorm: return "frobenius-norm";
        case OpKind::LinearSolve: return "linear-solve";
        case OpKind::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    }
    return "?";
}

NodeId Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    evaluated_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::check_shape(NodeId id, std::size_t rows, std::size_t cols, const char* what) const {
    const Node& n = nodes_.at(id);
    if (n.rows != rows || n.cols != cols) {
        throw ShapeMismatch(std::string(what) + ": node " + std::to_string(id) + " is " +
                            std::to_string(n.rows) + "x" + std::to_string(n.cols) + ", expected " +
                            std::to_string(rows) + "x" + std::to_string(cols));
    }
}

NodeId Graph::input(const std::string& name, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw ShapeMismatch("input " + name + ": empty shape");
    Node n;
    n.kind = OpKind::Input;
    n.name = name;
    n.rows = rows;
    n.cols = cols;
    return push(std::move(n));
}

NodeId Graph::constant(Matrix value) {
    Node n;
    n.kind = OpKind::Input;
    n.rows = value.rows();
    n.cols = value.cols();
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    check_shape(b, nodes_.at(a).rows, nodes_.at(a).cols, "add");
    Node n;
    n.kind = OpKind::Add;
    n.a = a;
    n.b = b;
    n.rows = nodes_[a].rows;
    n.cols = nodes_[a].cols;
    return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
    check_shape(b, nodes_.at(a).rows, nodes_.at(a).cols, "sub");
    Node n;
    n.kind = OpKind::Sub;
    n.a = a;
    n.b = b;
    n.rows = nodes_[a].rows;
    n.cols = nodes_[a].cols;
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
    if (nodes_.at(a).cols != nodes_.at(b).rows) {
        throw ShapeMismatch("matmul: inner dims " + std::to_string(nodes_[a].cols) + " vs " +
                            std::to_string(nodes_[b].rows));
    }
    Node n;
    n.kind = OpKind::MatMul;
    n.a = a;
    n.b = b;
    n.rows = nodes_[a].rows;
    n.cols = nodes_[b].cols;
    return push(std::move(n));
}

NodeId Graph::hadamard(NodeId a, NodeId b) {
    check_shape(b, nodes_.at(a).rows, nodes_.at(a).cols, "hadamard");
    Node n;
    n.kind = OpKind::Hadamard;
    n.a = a;
    n.b = b;
    n.rows = nodes_[a].rows;
    n.cols = nodes_[a].cols;
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    Node n;
    n.kind = OpKind::Transpose;
    n.a = a;
    n.rows = nodes_.at(a).cols;
    n.cols = nodes_.at(a).rows;
    return push(std::move(n));
}

NodeId Graph::diag_extract(NodeId a) {
    if (nodes_.at(a).rows != nodes_.at(a).cols) throw ShapeMismatch("diag-extract: need square");
    Node n;
    n.kind = OpKind::DiagExtract;
    n.a = a;
    n.rows = nodes_[a].rows;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Graph::diag_embed(NodeId a) {
    if (nodes_.at(a).cols != 1) throw ShapeMismatch("diag-embed: need column vector");
    Node n;
    n.kind = OpKind::DiagEmbed;
    n.a = a;
    n.rows = nodes_[a].rows;
    n.cols = nodes_[a].rows;
    return push(std::move(n));
}

NodeId Graph::reciprocal(NodeId a) {
    Node n;
    n.kind = OpKind::Reciprocal;
    n.a = a;
    n.rows = nodes_.at(a).rows;
    n.cols = nodes_.at(a).cols;
    return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
    Node n;
    n.kind = OpKind::Log;
    n.a = a;
    n.rows = nodes_.at(a).rows;
    n.cols = nodes_.at(a).cols;
    return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId a) {
    Node n;
    n.kind = OpKind::Sigmoid;
    n.a = a;
    n.rows = nodes_.at(a).rows;
    n.cols = nodes_.at(a).cols;
    return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
    Node n;
    n.kind = OpKind::Relu;
    n.a = a;
    n.rows = nodes_.at(a).rows;
    n.cols = nodes_.at(a).cols;
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
    Node n;
    n.kind = OpKind::Scale;
    n.a = a;
    n.factor = factor;
    n.rows = nodes_.at(a).rows;
    n.cols = nodes_.at(a).cols;
    return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
    Node n;
    n.kind = OpKind::Sum;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Graph::frobenius_norm(NodeId a) {
    Node n;
    n.kind = OpKind::FrobeniusNorm;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Graph::linear_solve(NodeId m, NodeId b) {
    if (nodes_.at(m).rows != nodes_.at(m).cols) throw ShapeMismatch("linear-solve: M not square");
    if (nodes_.at(b).rows != nodes_.at(m).rows) throw ShapeMismatch("linear-solve: rhs rows");
    Node n;
    n.kind = OpKind::LinearSolve;
    n.a = m;
    n.b = b;
    n.rows = nodes_[b].rows;
    n.cols = nodes_[b].cols;
    return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, NodeId targets) {
    check_shape(targets, nodes_.at(logits).rows, nodes_.at(logits).cols, "softmax-cross-entropy");
    Node n;
    n.kind = OpKind::SoftmaxCrossEntropy;
    n.a = logits;
    n.b = targets;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

void Graph::set_output(NodeId id) {
    if (nodes_.at(id).rows != 1 || nodes_.at(id).cols != 1) {
        throw ShapeMismatch("set_output: output must be scalar (1x1)");
    }
    output_ = id;
}

double Graph::evaluate(const Bindings& bindings) {
    if (output_ < 0) throw NotEvaluated("evaluate: no output node designated");
    for (Node& n : nodes_) {
        switch (n.kind) {
            case OpKind::Input: {
                if (n.name.empty()) break;  // build-time constant
                const auto it = bindings.find(n.name);
                if (it == bindings.end()) throw UnboundInput("evaluate: input '" + n.name + "' unbound");
                if (it->second.rows() != n.rows || it->second.cols() != n.cols) {
                    throw ShapeMismatch("evaluate: binding '" + n.name + "' has wrong shape");
                }
                n.value = it->second;
                break;
            }
            case OpKind::Add:
                n.value = nodes_[n.a].value + nodes_[n.b].value;
                break;
            case OpKind::Sub:
                n.value = nodes_[n.a].value - nodes_[n.b].value;
                break;
            case OpKind::MatMul:
                n.value = cpcanet::matmul(nodes_[n.a].value, nodes_[n.b].value);
                break;
            case OpKind::Hadamard:
                n.value = cpcanet::hadamard(nodes_[n.a].value, nodes_[n.b].value);
                break;
            case OpKind::Transpose:
                n.value = cpcanet::transpose(nodes_[n.a].value);
                break;
            case OpKind::DiagExtract: {
                const Matrix& x = nodes_[n.a].value;
                Matrix v(n.rows, 1);
                for (std::size_t i = 0; i < n.rows; ++i) v(i, 0) = x(i, i);
                n.value = std::move(v);
                break;
            }
            case OpKind::DiagEmbed: {
                const Matrix& x = nodes_[n.a].value;
                Matrix v(n.rows, n.cols, 0.0);
                for (std::size_t i = 0; i < n.rows; ++i) v(i, i) = x(i, 0);
                n.value = std::move(v);
                break;
            }
            case OpKind::Reciprocal: {
                const Matrix& x = nodes_[n.a].value;
                Matrix v(n.rows, n.cols);
                for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = 1.0 / x.data()[i];
                n.value = std::move(v);
                break;
            }
            case OpKind::Log: {
                const Matrix& x = nodes_[n.a].value;
                Matrix v(n.rows, n.cols);
                for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = std::log(x.data()[i]);
                n.value = std::move(v);
                break;
            }
            case OpKind::Sigmoid: {
                const Matrix& x = nodes_[n.a].value;
                Matrix v(n.rows, n.cols);
                for (std::size_t i = 0; i < v.size(); ++i) {
                    const double t = x.data()[i];
                    // branch keeps exp() argument non-positive
                    v.data()[i] = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                                           : std::exp(t) / (1.0 + std::exp(t));
                }
                n.value = std::move(v);
                break;
            }
            case OpKind::Relu: {
                const Matrix& x = nodes_[n.a].value;
                Matrix v(n.rows, n.cols);
                for (std::size_t i = 0; i < v.size(); ++i) {
                    const double t = x.data()[i];
                    v.data()[i] = t > 0.0 ? t : 0.0;
                }
                n.value = std::move(v);
                break;
            }
            case OpKind::Scale:
                n.value = cpcanet::scale(nodes_[n.a].value, n.factor);
                break;
            case OpKind::Sum: {
                Matrix v(1, 1);
                v(0, 0) = sum_entries(nodes_[n.a].value);
                n.value = std::move(v);
                break;
            }
            case OpKind::FrobeniusNorm: {
                Matrix v(1, 1);
                v(0, 0) = cpcanet::frobenius_norm(nodes_[n.a].value);
                n.value = std::move(v);
                break;
            }
            case OpKind::LinearSolve: {
                n.lu = std::make_unique<LuFactorization>(nodes_[n.a].value);
                n.value = n.lu->solve(nodes_[n.b].value);
                break;
            }
            case OpKind::SoftmaxCrossEntropy: {
                const Matrix& logits = nodes_[n.a].value;
                const Matrix& targets = nodes_[n.b].value;
                const std::size_t rows = logits.rows(), cols = logits.cols();
                Matrix softmax(rows, cols);
                double loss = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    double m = logits(i, 0);
                    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, logits(i, j));
                    double z = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) z += std::exp(logits(i, j) - m);
                    const double lse = m + std::log(z);
                    for (std::size_t j = 0; j < cols; ++j) {
                        softmax(i, j) = std::exp(logits(i, j) - m) / z;
                        loss += targets(i, j) * (lse - logits(i, j));
                    }
                }
                n.aux = std::move(softmax);
                Matrix v(1, 1);
                v(0, 0) = loss / static_cast<double>(rows);
                n.value = std::move(v);
                break;
            }
        }
    }
    evaluated_ = true;
    return nodes_[output_].value(0, 0);
}

const Matrix& Graph::grad_of(NodeId id) const {
    if (!evaluated_) throw NotEvaluated("grad_of: run evaluate and backward first");
    return nodes_.at(id).grad;
}

std::map<std::string, Matrix> Graph::backward() {
    if (!evaluated_) throw NotEvaluated("backward: evaluate has not been run");
    for (Node& n : nodes_) {
        n.grad = Matrix(n.rows, n.cols, 0.0);
    }
    nodes_[output_].grad(0, 0) = 1.0;

    for (std::size_t idx = nodes_.size(); idx-- > 0;) {
        Node& n = nodes_[idx];
        const Matrix& g = n.grad;
        switch (n.kind) {
            case OpKind::Input:
                break;
            case OpKind::Add: {
                Matrix& ga = nodes_[n.a].grad;
                Matrix& gb = nodes_[n.b].grad;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] += g.data()[i];
                    gb.data()[i] += g.data()[i];
                }
                break;
            }
            case OpKind::Sub: {
                Matrix& ga = nodes_[n.a].grad;
                Matrix& gb = nodes_[n.b].grad;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] += g.data()[i];
                    gb.data()[i] -= g.data()[i];
                }
                break;
            }
            case OpKind::MatMul: {
                Matrix da = cpcanet::matmul(g, cpcanet::transpose(nodes_[n.b].value));
                Matrix db = cpcanet::matmul(cpcanet::transpose(nodes_[n.a].value), g);
                if (debug::corrupt_matmul_adjoint) {
                    da = cpcanet::scale(da, 1.001);
                }
                Matrix& ga = nodes_[n.a].grad;
                Matrix& gb = nodes_[n.b].grad;
                for (std::size_t i = 0; i < da.size(); ++i) ga.data()[i] += da.data()[i];
                for (std::size_t i = 0; i < db.size(); ++i) gb.data()[i] += db.data()[i];
                break;
            }
            case OpKind::Hadamard: {
                Matrix& ga = nodes_[n.a].grad;
                Matrix& gb = nodes_[n.b].grad;
                const Matrix& va = nodes_[n.a].value;
                const Matrix& vb = nodes_[n.b].value;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] += g.data()[i] * vb.data()[i];
                    gb.data()[i] += g.data()[i] * va.data()[i];
                }
                break;
            }
            case OpKind::Transpose: {
                Matrix& ga = nodes_[n.a].grad;
                for (std::size_t i = 0; i < n.rows; ++i)
                    for (std::size_t j = 0; j < n.cols; ++j) ga(j, i) += g(i, j);
                break;
            }
            case OpKind::DiagExtract: {
                Matrix& ga = nodes_[n.a].grad;
                for (std::size_t i = 0; i < n.rows; ++i) ga(i, i) += g(i, 0);
                break;
            }
            case OpKind::DiagEmbed: {
                Matrix& ga = nodes_[n.a].grad;
                for (std::size_t i = 0; i < n.rows; ++i) ga(i, 0) += g(i, i);
                break;
            }
            case OpKind::Reciprocal: {
                Matrix& ga = nodes_[n.a].grad;
                const Matrix& y = n.value;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] -= g.data()[i] * y.data()[i] * y.data()[i];
                }
                break;
            }
            case OpKind::Log: {
                Matrix& ga = nodes_[n.a].grad;
                const Matrix& x = nodes_[n.a].value;
                for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] / x.data()[i];
                break;
            }
            case OpKind::Sigmoid: {
                Matrix& ga = nodes_[n.a].grad;
                const Matrix& y = n.value;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] += g.data()[i] * y.data()[i] * (1.0 - y.data()[i]);
                }
                break;
            }
            case OpKind::Relu: {
                Matrix& ga = nodes_[n.a].grad;
                const Matrix& x = nodes_[n.a].value;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (x.data()[i] > 0.0) ga.data()[i] += g.data()[i];
                }
                break;
            }
            case OpKind::Scale: {
                Matrix& ga = nodes_[n.a].grad;
                for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += n.factor * g.data()[i];
                break;
            }
            case OpKind::Sum: {
                Matrix& ga = nodes_[n.a].grad;
                const double s = g(0, 0);
                for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += s;
                break;
            }
            case OpKind::FrobeniusNorm: {
                Matrix& ga = nodes_[n.a].grad;
                const double y = n.value(0, 0);
                if (y != 0.0) {
                    const double s = g(0, 0) / y;
                    const Matrix& x = nodes_[n.a].value;
                    for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += s * x.data()[i];
                }
                break;
            }
            case OpKind::LinearSolve: {
                // X = M^{-1} B: dB = M^{-T} gX, dM = -dB X^T
                const Matrix db = n.lu->solve_transposed(g);
                const Matrix dm = cpcanet::scale(cpcanet::matmul(db, cpcanet::transpose(n.value)), -1.0);
                Matrix& ga = nodes_[n.a].grad;
                Matrix& gb = nodes_[n.b].grad;
                for (std::size_t i = 0; i < dm.size(); ++i) ga.data()[i] += dm.data()[i];
                for (std::size_t i = 0; i < db.size(); ++i) gb.data()[i] += db.data()[i];
                break;
            }
            case OpKind::SoftmaxCrossEntropy: {
                const Matrix& logits = nodes_[n.a].value;
                const Matrix& targets = nodes_[n.b].value;
                const Matrix& softmax = n.aux;
                const std::size_t rows = logits.rows(), cols = logits.cols();
                const double s = g(0, 0) / static_cast<double>(rows);
                Matrix& ga = nodes_[n.a].grad;
                Matrix& gb = nodes_[n.b].grad;
                for (std::size_t i = 0; i < rows; ++i) {
                    double tmass = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) tmass += targets(i, j);
                    for (std::size_t j = 0; j < cols; ++j) {
                        ga(i, j) += s * (tmass * softmax(i, j) - targets(i, j));
                        gb(i, j) += s * (-std::log(softmax(i, j)));
                    }
                }
                break;
            }
        }
    }

    std::map<std::string, Matrix> grads;
    for (const Node& n : nodes_) {
        if (n.kind == OpKind::Input && !n.name.empty()) grads[n.name] = n.grad;
    }
    return grads;
}

std::string Graph::dump_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        nlohmann::json j{{"id", i}, {"op", op_name(n.kind)}, {"rows", n.rows}, {"cols", n.cols}};
        if (n.a >= 0) j["a"] = n.a;
        if (n.b >= 0) j["b"] = n.b;
        if (!n.name.empty()) j["name"] = n.name;
        if (n.kind == OpKind::Scale) j["factor"] = n.factor;
        nodes.push_back(std::move(j));
    }
    return nlohmann::json{{"output", output_}, {"nodes", nodes}}.dump();
}

double gradcheck(Graph& graph, const Bindings& bindings, double h,
                 const std::vector<std::string>& only) {
    if (!(h > 0.0)) throw std::invalid_argument("gradcheck: h must be positive");
    graph.evaluate(bindings);
    const auto analytic = graph.backward();

    double worst = 0.0;
    Bindings work = bindings;
    for (const auto& [name, grad] : analytic) {
        if (!only.empty() &&
            std::find(only.begin(), only.end(), name) == only.end()) {
            continue;
        }
        Matrix& value = work.at(name);
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double saved = value.data()[i];
            value.data()[i] = saved + h;
            const double fp = graph.evaluate(work);
            value.data()[i] = saved - h;
            const double fm = graph.evaluate(work);
            value.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double exact = grad.data()[i];
            const double denom = std::max({std::fabs(exact), std::fabs(numeric), 1e-12});
            worst = std::max(worst, std::fabs(exact - numeric) / denom);
        }
    }
    graph.evaluate(bindings);  // restore caches for the caller
    return worst;
}

}  // namespace cpcanet::tape
