#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cpcanet/data.hpp"
#include "cpcanet/linalg.hpp"
#include "cpcanet/tape.hpp"
#include "cpcanet/unfold.hpp"

namespace cpcanet {

struct Dims {
    std::size_t p = 20;   // raw input width
    std::size_t D = 32;   // backbone feature width
    std::size_t d = 8;    // bottleneck / solver dimension
    std::size_t T = 3;    // unfolding stages
    std::size_t K = 3;    // training domains per batch
    std::size_t C = 4;    // classes
    std::size_t backbone_hidden = 64;
    std::size_t hyper_hidden = 64;
};

/// All learnable tensors, keyed by name. Weight layout follows the row-major
/// sample convention (outputs = inputs * W + b). The final layers of both
/// modulation MLPs start at exactly zero, which makes the whole network
/// coincide with the plain backbone+classifier pipeline at initialization.
struct ModelParams {
    Dims dims;
    std::map<std::string, Matrix> tensors;
    Matrix beta_buffer;  // d x d basis from the most recent training batch

    static ModelParams init(const Dims& dims, std::uint64_t seed);

    const Matrix& at(const std::string& name) const;
    Matrix& at(const std::string& name);
    static bool is_backbone(const std::string& name);
    static bool is_modulation(const std::string& name);
};

struct NetConfig {
    double lambda_cpca = 5e-3;
    double smoothing = 0.1;
    double unfold_eps = 1e-8;
    double unfold_eps_norm = 1e-12;
};

struct ForwardOutput {
    Matrix logits;                    // N x C
    OrthogonalBasis basis;            // beta_T
    std::vector<Matrix> covariances;  // per training domain
    std::vector<double> etas;         // length T, each in (0, 0.5)
    double task_loss = 0.0;
    double cpca = 0.0;
    double total = 0.0;
};

/// eta = sigmoid(H_phi(flattened covariances)) / 2; strictly inside (0, 0.5).
/// Throws WrongDomainCount when covs.size() != params.dims.K.
std::vector<double> hypernet_step_sizes(const CovarianceSet& covs, const ModelParams& params);

/// FiLM-style recalibration f~ = f (.) 2 sigmoid(MLP_gamma(u)) + MLP_df(u),
/// row-wise. Identity (bitwise) while the MLP final layers are zero.
Matrix modulate(const Matrix& f, const Matrix& u, const ModelParams& params);

Matrix erm_logits(const ModelParams& params, const Matrix& x);
/// Inference path: modulation conditioned on the stored basis buffer.
Matrix cpcanet_logits(const ModelParams& params, const Matrix& x);

Matrix smoothed_targets(const std::vector<int>& labels, std::size_t classes, double smoothing);
double task_loss(const Matrix& logits, const std::vector<int>& labels, double smoothing);
double accuracy(const Matrix& logits, const std::vector<int>& labels);

/// Full training-phase forward (no dropout): features, bottleneck,
/// per-domain covariances, hypernetwork step sizes, unfolded solver,
/// modulation, classifier, and both losses.
ForwardOutput cpcanet_forward(const DomainBatch& batch, const ModelParams& params,
                              const NetConfig& config);

/// L_task (recomputed from logits at the given smoothing) + lambda * L_CPCA.
double total_loss(const ForwardOutput& out, const std::vector<int>& labels, double lambda_cpca,
                  double smoothing);

/// Hypernetwork subgraph: the 1 x T step-size row from covariance nodes.
/// Creates inputs hyper.W1#k#l (contiguous row blocks of hyper.W1) plus
/// hyper.b1 / hyper.W2 / hyper.b2; `mask` (1 x hyper_hidden) gates the
/// hidden layer when non-negative.
tape::NodeId build_hypernet_etas(tape::Graph& g, const std::vector<tape::NodeId>& cov_nodes,
                                 const Dims& dims, tape::NodeId mask = -1);

/// Modulation subgraph f~ = f (.) 2 sigmoid(MLP_gamma(u)) + MLP_df(u);
/// creates the mlp_gamma.* / mlp_delta.* inputs.
tape::NodeId build_modulation(tape::Graph& g, tape::NodeId features, tape::NodeId u,
                              std::size_t rows, const Dims& dims, tape::NodeId mask_gamma = -1,
                              tape::NodeId mask_delta = -1);

void bind_hypernet(tape::Bindings& bindings, const ModelParams& params);
void bind_modulation(tape::Bindings& bindings, const ModelParams& params);

/// The per-batch compute graph, built once and rebound every step.
class TrainingProgram {
  public:
    enum class Mode { Erm, CpcaNet };

    TrainingProgram(Mode mode, const Dims& dims, std::vector<std::size_t> block_sizes,
                    const NetConfig& config);

    tape::Graph& graph() { return graph_; }
    Mode mode() const { return mode_; }

    /// Masks use inverted-dropout scaling; pass empty matrices for all-ones.
    tape::Bindings bind(const ModelParams& params, const Matrix& x, const Matrix& targets,
                        const Matrix& mask_hyper = {}, const Matrix& mask_gamma = {},
                        const Matrix& mask_delta = {}) const;

    /// Merge hyper.W1 block gradients back into whole-tensor gradients and
    /// drop non-parameter inputs.
    std::map<std::string, Matrix> parameter_gradients(
        const std::map<std::string, Matrix>& raw) const;

    ForwardOutput extract() const;  // requires a prior evaluate

    tape::NodeId logits_node() const { return logits_; }
    tape::NodeId task_node() const { return task_; }
    tape::NodeId basis_node() const { return basis_; }
    tape::NodeId bottleneck_node() const { return bottleneck_; }
    tape::NodeId projection_node() const { return projection_; }

  private:
    Mode mode_;
    Dims dims_;
    NetConfig config_;
    std::vector<std::size_t> blocks_;
    std::size_t batch_rows_ = 0;
    tape::Graph graph_;
    tape::NodeId x_ = -1, targets_ = -1;
    tape::NodeId mask_hyper_ = -1, mask_gamma_ = -1, mask_delta_ = -1;
    tape::NodeId logits_ = -1, task_ = -1, cpca_ = -1, total_ = -1;
    tape::NodeId basis_ = -1, eta_row_ = -1, bottleneck_ = -1, projection_ = -1;
    std::vector<tape::NodeId> cov_nodes_;
};

struct TrainerConfig {
    Dims dims;
    std::size_t batch_per_domain = 32;
    std::size_t steps = 1000;
    double lr_backbone = 1e-5;
    double lr_cpcanet = 1e-4;
    double lambda_cpca = 5e-3;
    double smoothing = 0.1;
    double dropout = 0.5;
    std::uint64_t seed = 0;
    std::size_t eval_interval = 100;
    bool erm_mode = false;
    bool freeze_modulation = false;
    double train_fraction = 0.75;
};

struct MetricsRow {
    std::size_t step = 0;
    double task = 0.0;
    double cpca = 0.0;
    double eta_mean = 0.0;
    double heldout_acc = 0.0;
    bool has_eval = false;
};

struct TrainResult {
    ModelParams params;
    std::vector<MetricsRow> metrics;
    double final_heldout_acc = 0.0;
    double final_indomain_acc = 0.0;
    double step0_cpca = 0.0;
    double final_cpca = 0.0;
    double eta_min = 1.0;
    double eta_max = 0.0;
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8, no weight decay) over two
/// learning-rate groups: backbone.* at lr_backbone, everything else at
/// lr_cpcanet. Deterministic in the seed: batch sampling, dropout, and
/// initialization each draw from an independent substream.
TrainResult train(const ToyDGDataset& dataset, const TrainerConfig& config);

double heldout_accuracy(const ModelParams& params, const ToyDGDataset& dataset, bool erm_mode);

struct SweepCell {
    std::size_t d = 0;
    std::size_t stages = 0;
    std::size_t seeds = 0;
    double acc_mean = 0.0;
    double acc_std = 0.0;
    double cpca_mean = 0.0;
    double cpca_std = 0.0;
};

/// (d, T) grid of full training runs; every cell draws its seeds from an
/// independent substream of base.seed, so cells are order- and
/// parallelism-independent. `jobs` > 1 runs cells on worker threads.
std::vector<SweepCell> run_sweep(const ToyDGDataset& dataset, const TrainerConfig& base,
                                 const std::vector<std::size_t>& d_values,
                                 const std::vector<std::size_t>& stage_values, std::size_t seeds,
                                 std::size_t jobs = 1);

std::vector<std::size_t> default_sweep_dims();    // includes the 256 picked at full scale
std::vector<std::size_t> default_sweep_stages();  // {1, 3, 5}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path);

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

void save_params(const ModelParams& params, const std::string& bin_path,
                 const std::string& manifest_path);
ModelParams load_params(const std::string& bin_path, const std::string& manifest_path);

}  // namespace cpcanet
