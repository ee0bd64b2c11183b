#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cpcanet/matrix.hpp"

namespace cpcanet::tape {

enum class OpKind {
    Input,  // bound at evaluate time when named, fixed at build time otherwise
    Add,
    Sub,
    MatMul,
    Hadamard,
    Transpose,
    DiagExtract,
    DiagEmbed,
    Reciprocal,
    Log,
    Sigmoid,
    Relu,
    Scale,
    Sum,
    FrobeniusNorm,
    LinearSolve,
    SoftmaxCrossEntropy,
};

const char* op_name(OpKind k);

using NodeId = int;
using Bindings = std::map<std::string, Matrix>;

struct Node {
    OpKind kind;
    NodeId a = -1;
    NodeId b = -1;
    double factor = 0.0;  // Scale only
    std::string name;     // named Input only
    std::size_t rows = 0;
    std::size_t cols = 0;
    Matrix value;
    Matrix grad;
    Matrix aux;  // op-specific forward cache (softmax table, ...)
    std::unique_ptr<LuFactorization> lu;
};

/// Build-once compute graph over a fixed primitive set. Shapes are checked
/// at construction; evaluate caches forward values on every node; backward
/// accumulates adjoints in reverse topological (= construction) order.
///
/// Single-owner during evaluate/backward; distinct graphs are independent.
class Graph {
  public:
    NodeId input(const std::string& name, std::size_t rows, std::size_t cols);
    NodeId constant(Matrix value);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId matmul(NodeId a, NodeId b);
    NodeId hadamard(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId diag_extract(NodeId a);  // d x d -> d x 1
    NodeId diag_embed(NodeId a);    // d x 1 -> d x d
    NodeId reciprocal(NodeId a);
    NodeId log(NodeId a);
    NodeId sigmoid(NodeId a);
    NodeId relu(NodeId a);
    NodeId scale(NodeId a, double factor);
    NodeId sum(NodeId a);             // -> 1 x 1
    NodeId frobenius_norm(NodeId a);  // -> 1 x 1
    NodeId linear_solve(NodeId m, NodeId b);
    /// Mean over rows of -sum_c targets * log softmax(logits); fused and
    /// log-sum-exp stabilized. -> 1 x 1
    NodeId softmax_cross_entropy(NodeId logits, NodeId targets);

    void set_output(NodeId id);
    NodeId output() const { return output_; }

    double evaluate(const Bindings& bindings);
    /// d(output)/d(input) for every named input. Requires a prior evaluate.
    std::map<std::string, Matrix> backward();

    const Matrix& value_of(NodeId id) const { return nodes_[id].value; }
    const Matrix& grad_of(NodeId id) const;
    std::size_t node_count() const { return nodes_.size(); }
    std::string dump_json() const;

  private:
    NodeId push(Node node);
    void check_shape(NodeId id, std::size_t rows, std::size_t cols, const char* what) const;

    std::vector<Node> nodes_;
    NodeId output_ = -1;
    bool evaluated_ = false;
};

/// Worst relative error of backward against central differences with step h,
/// over every coordinate of every bound input (or of `only` when non-empty).
/// Denominator is max(|analytic|, |numeric|, 1e-12).
double gradcheck(Graph& graph, const Bindings& bindings, double h,
                 const std::vector<std::string>& only = {});

namespace debug {
/// Negative-control knob: perturbs the matmul adjoint so gradcheck must fail.
extern bool corrupt_matmul_adjoint;
}  // namespace debug

}  // namespace cpcanet::tape
