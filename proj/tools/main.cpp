#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "cpcanet/data.hpp"
#include "cpcanet/errors.hpp"
#include "cpcanet/fg.hpp"
#include "cpcanet/gradcheck_suites.hpp"
#include "cpcanet/io.hpp"
#include "cpcanet/net.hpp"
#include "cpcanet/rng.hpp"
#include "cpcanet/unfold.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNotConverged = 2;
constexpr int kExitGradcheck = 3;

bool g_quiet = false;

void info(const std::string& line) {
    if (!g_quiet) std::cout << line << '\n';
}

double elapsed_seconds(const std::chrono::steady_clock::time_point& from) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - from).count();
}

// Flat TOML subset: `key = value` lines, #-comments, strings/numbers/bools.
// Enough for the trainer configs; JSON configs are parsed as-is.
json parse_flat_toml(std::istream& in, const std::string& origin) {
    json out = json::object();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto first = s.find_first_not_of(" \t\r");
            if (first == std::string::npos) return std::string();
            const auto last = s.find_last_not_of(" \t\r");
            return s.substr(first, last - first + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw cpcanet::SchemaMismatch(origin + ":" + std::to_string(lineno) +
                                          ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw cpcanet::SchemaMismatch(origin + ":" + std::to_string(lineno) + ": empty key/value");
        }
        if (value.front() == '"' && value.back() == '"' && value.size() >= 2) {
            out[key] = value.substr(1, value.size() - 2);
        } else if (value == "true" || value == "false") {
            out[key] = value == "true";
        } else {
            try {
                std::size_t used = 0;
                const double v = std::stod(value, &used);
                if (used != value.size()) throw std::invalid_argument(value);
                if (v == std::floor(v) && std::fabs(v) < 9e15 &&
                    value.find_first_of(".eE") == std::string::npos) {
                    out[key] = static_cast<long long>(v);
                } else {
                    out[key] = v;
                }
            } catch (const std::exception&) {
                throw cpcanet::SchemaMismatch(origin + ":" + std::to_string(lineno) +
                                              ": unparsable value '" + value + "'");
            }
        }
    }
    return out;
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cpcanet::SchemaMismatch("cannot open config " + path);
    if (fs::path(path).extension() == ".json") {
        json j;
        in >> j;
        return j;
    }
    return parse_flat_toml(in, path);
}

struct TrainCli {
    cpcanet::TrainerConfig config;
    std::string dataset_manifest;
    std::size_t toy_n_per_domain = 400;
    double toy_strength = 0.8;  // the calibrated hard setting
    std::uint64_t toy_seed = 7;

    void apply(const json& j) {
        auto u64 = [&](const char* key, auto& slot) {
            if (j.contains(key)) slot = j.at(key).get<std::uint64_t>();
        };
        auto f64 = [&](const char* key, double& slot) {
            if (j.contains(key)) slot = j.at(key).get<double>();
        };
        u64("p", config.dims.p);
        u64("D", config.dims.D);
        u64("d", config.dims.d);
        u64("T", config.dims.T);
        u64("K", config.dims.K);
        u64("C", config.dims.C);
        u64("batch-per-domain", config.batch_per_domain);
        u64("steps", config.steps);
        f64("lr-backbone", config.lr_backbone);
        f64("lr-cpcanet", config.lr_cpcanet);
        f64("lambda-cpca", config.lambda_cpca);
        f64("smoothing", config.smoothing);
        f64("dropout", config.dropout);
        u64("seed", config.seed);
        u64("eval-interval", config.eval_interval);
        if (j.contains("mode")) config.erm_mode = j.at("mode").get<std::string>() == "erm";
        if (j.contains("freeze-modulation"))
            config.freeze_modulation = j.at("freeze-modulation").get<bool>();
        if (j.contains("dataset")) dataset_manifest = j.at("dataset").get<std::string>();
        u64("toy-n-per-domain", toy_n_per_domain);
        f64("toy-strength", toy_strength);
        u64("toy-seed", toy_seed);
    }
};

cpcanet::ToyDGDataset resolve_dataset(const TrainCli& cli) {
    if (!cli.dataset_manifest.empty()) {
        std::ifstream in(cli.dataset_manifest);
        if (!in) throw cpcanet::SchemaMismatch("cannot open manifest " + cli.dataset_manifest);
        json j;
        in >> j;
        const fs::path base = fs::path(cli.dataset_manifest).parent_path();
        std::vector<std::string> paths;
        for (const auto& entry : j.at("domains")) {
            paths.push_back((base / entry.get<std::string>()).string());
        }
        return cpcanet::load_domain_csv(paths, j.at("heldout").get<std::size_t>());
    }
    return cpcanet::gen_toy_dg(cli.config.dims.p, cli.config.dims.K + 1, cli.config.dims.C,
                               cli.toy_n_per_domain, cli.toy_strength, cli.toy_seed);
}

// Plain softmax regression by full-batch gradient descent; the readout used
// by the low-dimensional classifier diagnostic.
struct SoftmaxFit {
    cpcanet::Matrix w;
    cpcanet::Matrix b;
};

SoftmaxFit fit_softmax(const cpcanet::Matrix& x, const std::vector<int>& y, std::size_t classes,
                       std::size_t iters, double lr) {
    using cpcanet::Matrix;
    const std::size_t n = x.rows(), p = x.cols();
    SoftmaxFit fit{Matrix(p, classes, 0.0), Matrix(1, classes, 0.0)};
    for (std::size_t it = 0; it < iters; ++it) {
        Matrix logits = matmul(x, fit.w);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < classes; ++c) logits(i, c) += fit.b(0, c);
        Matrix gw(p, classes, 0.0);
        Matrix gb(1, classes, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double mx = logits(i, 0);
            for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits(i, c));
            double z = 0.0;
            for (std::size_t c = 0; c < classes; ++c) z += std::exp(logits(i, c) - mx);
            for (std::size_t c = 0; c < classes; ++c) {
                const double soft = std::exp(logits(i, c) - mx) / z;
                const double delta = (soft - (static_cast<int>(c) == y[i] ? 1.0 : 0.0)) /
                                     static_cast<double>(n);
                for (std::size_t a = 0; a < p; ++a) gw(a, c) += x(i, a) * delta;
                gb(0, c) += delta;
            }
        }
        for (std::size_t i = 0; i < gw.size(); ++i) fit.w.data()[i] -= lr * gw.data()[i];
        for (std::size_t c = 0; c < classes; ++c) fit.b(0, c) -= lr * gb(0, c);
    }
    return fit;
}

double softmax_accuracy(const SoftmaxFit& fit, const cpcanet::Matrix& x,
                        const std::vector<int>& y) {
    cpcanet::Matrix logits = matmul(x, fit.w);
    for (std::size_t i = 0; i < logits.rows(); ++i)
        for (std::size_t c = 0; c < logits.cols(); ++c) logits(i, c) += fit.b(0, c);
    return cpcanet::accuracy(logits, y);
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoul(item));
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Common principal component analysis: classical and unfolded solvers"};
    app.require_subcommand(1);
    app.add_flag("--quiet", g_quiet, "suppress progress output");

    // fg
    auto* cmd_fg = app.add_subcommand("fg", "classical pairwise-rotation CPCA fit");
    std::string fg_input, fg_out = "fg_result.json";
    cpcanet::FgConfig fg_config;
    cmd_fg->add_option("--input", fg_input, "covariance set JSON")->required();
    cmd_fg->add_option("--out", fg_out, "result JSON path");
    cmd_fg->add_option("--tol", fg_config.tol, "sweep rotation tolerance (radians)");
    cmd_fg->add_option("--max-sweeps", fg_config.max_sweeps, "sweep budget");

    // unfold
    auto* cmd_unfold = app.add_subcommand("unfold", "deep-unfolded CPCA solver");
    std::string unfold_input, unfold_out = "unfold_trace.json", unfold_etas;
    double unfold_eta = 0.0;
    std::size_t unfold_stages = 3;
    bool hyper_zeros = false;
    cpcanet::UnfoldConfig unfold_config;
    cmd_unfold->add_option("--input", unfold_input, "covariance set JSON")->required();
    cmd_unfold->add_option("--out", unfold_out, "trace JSON path");
    cmd_unfold->add_option("--etas", unfold_etas, "comma-separated per-stage step sizes");
    cmd_unfold->add_option("--eta", unfold_eta, "constant step size for all stages");
    cmd_unfold->add_option("--stages", unfold_stages, "number of stages T");
    cmd_unfold->add_flag("--hyper-zeros", hyper_zeros,
                         "use the zero-weight hypernetwork step size (0.25 per stage)");
    cmd_unfold->add_option("--eps", unfold_config.eps, "Omega denominator regularizer");

    // gradcheck
    auto* cmd_grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string grad_scope = "primitive";
    std::size_t grad_dim = 6, grad_stages = 3;
    std::uint64_t grad_seed = 1;
    bool corrupt = false;
    cmd_grad->add_option("--scope", grad_scope, "primitive | unfold | full")
        ->check(CLI::IsMember({"primitive", "unfold", "full"}));
    cmd_grad->add_option("--dim", grad_dim, "solver dimension (unfold scope)");
    cmd_grad->add_option("--stages", grad_stages, "unfold stages");
    cmd_grad->add_option("--seed", grad_seed, "seed");
    cmd_grad->add_flag("--corrupt-adjoint", corrupt, "negative control: perturb one adjoint rule")
        ->group("");  // hidden

    // gen
    auto* cmd_gen = app.add_subcommand("gen", "synthetic data generators");
    auto* gen_ensemble = cmd_gen->add_subcommand("ensemble", "commuting covariance family");
    std::size_t ens_d = 8, ens_k = 3;
    double ens_lo = 1.0, ens_hi = 10.0, ens_noise = 0.0;
    std::uint64_t ens_seed = 1;
    std::string ens_out = "covs.json";
    gen_ensemble->add_option("--d", ens_d, "dimension");
    gen_ensemble->add_option("--K", ens_k, "number of domains");
    gen_ensemble->add_option("--lo", ens_lo, "spectrum lower bound");
    gen_ensemble->add_option("--hi", ens_hi, "spectrum upper bound");
    gen_ensemble->add_option("--noise", ens_noise, "symmetric noise level");
    gen_ensemble->add_option("--seed", ens_seed, "seed");
    gen_ensemble->add_option("--out", ens_out, "covariance set JSON path");

    auto* gen_toydg = cmd_gen->add_subcommand("toydg", "multi-domain classification toy set");
    std::size_t dg_p = 20, dg_domains = 4, dg_classes = 4, dg_n = 400;
    double dg_strength = 0.8;
    std::uint64_t dg_seed = 7;
    std::string dg_out = "toydg";
    gen_toydg->add_option("--p", dg_p, "feature dimension");
    gen_toydg->add_option("--domains", dg_domains, "total domains (train + held-out)");
    gen_toydg->add_option("--classes", dg_classes, "classes");
    gen_toydg->add_option("--n", dg_n, "samples per domain");
    gen_toydg->add_option("--strength", dg_strength, "spurious correlation strength");
    gen_toydg->add_option("--seed", dg_seed, "seed");
    gen_toydg->add_option("--out", dg_out, "output directory");
    cmd_gen->require_subcommand(1);

    // train
    auto* cmd_train = app.add_subcommand("train", "end-to-end toy trainer");
    TrainCli train_cli;
    std::string train_config_path, train_out = "train_out", train_mode;
    long long train_seed_flag = -1, train_steps_flag = -1;
    double train_lambda_flag = -1.0;
    bool train_freeze = false;
    cmd_train->add_option("--config", train_config_path, "TOML or JSON trainer config");
    cmd_train->add_option("--out", train_out, "output directory");
    cmd_train->add_option("--seed", train_seed_flag, "override seed");
    cmd_train->add_option("--steps", train_steps_flag, "override step count");
    cmd_train->add_option("--lambda-cpca", train_lambda_flag, "override lambda");
    cmd_train->add_option("--mode", train_mode, "cpcanet | erm")
        ->check(CLI::IsMember({"cpcanet", "erm"}));
    cmd_train->add_flag("--freeze-modulation", train_freeze, "keep modulation MLPs at zero");

    // sweep
    auto* cmd_sweep = app.add_subcommand("sweep", "(d, T) grid of training runs");
    std::string sweep_config_path, sweep_out = "sweep.csv", sweep_d_csv, sweep_t_csv;
    std::size_t sweep_seeds = 3, sweep_jobs = 1;
    long long sweep_seed_flag = -1, sweep_steps_flag = -1;
    cmd_sweep->add_option("--config", sweep_config_path, "TOML or JSON trainer config");
    cmd_sweep->add_option("--out", sweep_out, "output CSV path");
    cmd_sweep->add_option("--d", sweep_d_csv, "comma-separated projection dims");
    cmd_sweep->add_option("--T", sweep_t_csv, "comma-separated stage counts");
    cmd_sweep->add_option("--seeds", sweep_seeds, "seeds per cell");
    cmd_sweep->add_option("--jobs", sweep_jobs, "parallel workers");
    cmd_sweep->add_option("--seed", sweep_seed_flag, "override base seed");
    cmd_sweep->add_option("--steps", sweep_steps_flag, "override step count");

    // bench
    auto* cmd_bench = app.add_subcommand("bench", "classical vs unfolded comparison");
    std::string bench_input, bench_out = "bench.json";
    std::size_t bench_stages = 50, bench_d = 8, bench_k = 3;
    double bench_eta = 0.25, bench_noise = 0.05;
    std::uint64_t bench_seed = 1;
    cmd_bench->add_option("--input", bench_input, "covariance set JSON (generated when absent)");
    cmd_bench->add_option("--out", bench_out, "report JSON path");
    cmd_bench->add_option("--stages", bench_stages, "unfold stages");
    cmd_bench->add_option("--eta", bench_eta, "unfold step size");
    cmd_bench->add_option("--d", bench_d, "generated ensemble dimension");
    cmd_bench->add_option("--K", bench_k, "generated ensemble domains");
    cmd_bench->add_option("--noise", bench_noise, "generated ensemble noise");
    cmd_bench->add_option("--seed", bench_seed, "seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_fg->parsed()) {
            const cpcanet::CovarianceSet covs = cpcanet::read_covariance_set_json(fg_input);
            const cpcanet::FgResult result = cpcanet::fg_fit(covs, fg_config);
            const double residual =
                cpcanet::ml_residual(result.basis, covs, fg_config.lambda_floor);
            cpcanet::write_fg_result_json(result, residual, fg_out);
            info("fg: sweeps=" + std::to_string(result.sweeps_used) +
                 " residual=" + cpcanet::format_double(residual));
            return result.converged(fg_config) ? kExitOk : kExitNotConverged;
        }

        if (cmd_unfold->parsed()) {
            const cpcanet::CovarianceSet covs = cpcanet::read_covariance_set_json(unfold_input);
            std::vector<double> etas;
            if (hyper_zeros) {
                etas.assign(unfold_stages, 0.25);
            } else if (!unfold_etas.empty()) {
                etas = parse_double_list(unfold_etas);
                unfold_stages = etas.size();
            } else if (unfold_eta > 0.0) {
                etas.assign(unfold_stages, unfold_eta);
            } else {
                std::cerr << "unfold: need --etas, --eta, or --hyper-zeros\n";
                return kExitUsage;
            }
            for (const double eta : etas) {
                if (!(eta > 0.0 && eta < 0.5)) {
                    std::cerr << "unfold: eta " << eta << " outside (0, 0.5)\n";
                    return kExitUsage;
                }
            }
            unfold_config.stages = unfold_stages;
            const cpcanet::UnfoldResult result = cpcanet::unfold_solve(covs, etas, unfold_config);
            cpcanet::write_trace_json(result.trace, covs.dim(), unfold_out);
            info("unfold: stages=" + std::to_string(unfold_stages) + " final offdiag=" +
                 cpcanet::format_double(result.trace.stages.back().offdiag));
            return kExitOk;
        }

        if (cmd_grad->parsed()) {
            cpcanet::tape::debug::corrupt_matmul_adjoint = corrupt;
            cpcanet::GradcheckReport report;
            if (grad_scope == "primitive") {
                report = cpcanet::gradcheck_primitives(grad_seed);
            } else if (grad_scope == "unfold") {
                report = cpcanet::gradcheck_unfold(grad_dim, grad_stages, grad_seed);
            } else {
                cpcanet::Dims dims;  // defaults d = 8
                if (grad_dim > 16) {
                    std::cerr << "gradcheck: full scope expects d <= 16\n";
                    return kExitUsage;
                }
                if (cmd_grad->count("--dim") > 0) dims.d = grad_dim;
                dims.T = grad_stages;
                report = cpcanet::gradcheck_full(dims, 20, grad_seed);
            }
            for (const auto& [name, err] : report.per_case) {
                std::cout << report.scope << ' ' << name << " max_rel_err="
                          << cpcanet::format_double(err) << '\n';
            }
            std::cout << report.scope << " worst=" << cpcanet::format_double(report.worst)
                      << " threshold=" << cpcanet::format_double(report.threshold)
                      << (report.passed() ? " PASS" : " FAIL") << '\n';
            return report.passed() ? kExitOk : kExitGradcheck;
        }

        if (gen_ensemble->parsed()) {
            const cpcanet::CommonBasisEnsemble ensemble =
                cpcanet::gen_common_ensemble(ens_d, ens_k, ens_lo, ens_hi, ens_noise, ens_seed);
            cpcanet::write_covariance_set_json(ensemble.covs, ens_out);
            info("gen ensemble: wrote " + ens_out);
            return kExitOk;
        }

        if (gen_toydg->parsed()) {
            const cpcanet::ToyDGDataset dataset =
                cpcanet::gen_toy_dg(dg_p, dg_domains, dg_classes, dg_n, dg_strength, dg_seed);
            fs::create_directories(dg_out);
            json domains = json::array();
            for (std::size_t k = 0; k < dataset.domains.size(); ++k) {
                const std::string name = "domain_" + std::to_string(k) + ".csv";
                const cpcanet::DomainData& dom = dataset.domains[k];
                cpcanet::Matrix with_labels(dom.features.rows(), dg_p + 1);
                for (std::size_t i = 0; i < dom.features.rows(); ++i) {
                    for (std::size_t j = 0; j < dg_p; ++j) with_labels(i, j) = dom.features(i, j);
                    with_labels(i, dg_p) = dom.labels[i];
                }
                cpcanet::write_matrix_csv(with_labels, (fs::path(dg_out) / name).string());
                domains.push_back(name);
            }
            const json manifest{{"p", dg_p},
                                {"C", dg_classes},
                                {"heldout", dataset.heldout},
                                {"domains", domains}};
            std::ofstream mout(fs::path(dg_out) / "manifest.json");
            mout << manifest.dump(2) << '\n';
            info("gen toydg: wrote " + dg_out);
            return kExitOk;
        }

        if (cmd_train->parsed()) {
            if (!train_config_path.empty()) train_cli.apply(load_config_file(train_config_path));
            if (train_seed_flag >= 0) train_cli.config.seed = static_cast<std::uint64_t>(train_seed_flag);
            if (train_steps_flag >= 0) train_cli.config.steps = static_cast<std::size_t>(train_steps_flag);
            if (train_lambda_flag >= 0.0) train_cli.config.lambda_cpca = train_lambda_flag;
            if (train_mode == "erm") train_cli.config.erm_mode = true;
            if (train_mode == "cpcanet") train_cli.config.erm_mode = false;
            if (train_freeze) train_cli.config.freeze_modulation = true;

            const cpcanet::ToyDGDataset dataset = resolve_dataset(train_cli);
            const auto t0 = std::chrono::steady_clock::now();
            const cpcanet::TrainResult result = cpcanet::train(dataset, train_cli.config);
            fs::create_directories(train_out);
            cpcanet::write_metrics_csv(result.metrics, (fs::path(train_out) / "metrics.csv").string());
            cpcanet::save_params(result.params, (fs::path(train_out) / "checkpoint.bin").string(),
                                 (fs::path(train_out) / "checkpoint.json").string());
            info("train: " + std::to_string(train_cli.config.steps) + " steps in " +
                 cpcanet::format_double(elapsed_seconds(t0)) + "s, heldout acc " +
                 cpcanet::format_double(result.final_heldout_acc));
            return kExitOk;
        }

        if (cmd_sweep->parsed()) {
            TrainCli sweep_cli;
            sweep_cli.config.steps = 400;
            sweep_cli.config.eval_interval = 200;
            if (!sweep_config_path.empty()) sweep_cli.apply(load_config_file(sweep_config_path));
            if (sweep_seed_flag >= 0) sweep_cli.config.seed = static_cast<std::uint64_t>(sweep_seed_flag);
            if (sweep_steps_flag >= 0) sweep_cli.config.steps = static_cast<std::size_t>(sweep_steps_flag);
            const std::vector<std::size_t> d_values =
                sweep_d_csv.empty() ? cpcanet::default_sweep_dims() : parse_size_list(sweep_d_csv);
            const std::vector<std::size_t> t_values = sweep_t_csv.empty()
                                                          ? cpcanet::default_sweep_stages()
                                                          : parse_size_list(sweep_t_csv);
            const cpcanet::ToyDGDataset dataset = resolve_dataset(sweep_cli);
            const auto cells = cpcanet::run_sweep(dataset, sweep_cli.config, d_values, t_values,
                                                  sweep_seeds, sweep_jobs);
            cpcanet::write_sweep_csv(cells, sweep_out);
            info("sweep: " + std::to_string(cells.size()) + " cells -> " + sweep_out);
            return kExitOk;
        }

        if (cmd_bench->parsed()) {
            cpcanet::CovarianceSet covs =
                bench_input.empty()
                    ? cpcanet::gen_common_ensemble(bench_d, bench_k, 1.0, 10.0, bench_noise,
                                                   bench_seed)
                          .covs
                    : cpcanet::read_covariance_set_json(bench_input);

            const auto t_fg = std::chrono::steady_clock::now();
            const cpcanet::FgResult fg = cpcanet::fg_fit(covs);
            const double fg_seconds = elapsed_seconds(t_fg);

            const auto t_unfold = std::chrono::steady_clock::now();
            cpcanet::UnfoldConfig ucfg;
            ucfg.stages = bench_stages;
            const cpcanet::UnfoldResult unfolded =
                cpcanet::unfold_solve(covs, std::vector<double>(bench_stages, bench_eta), ucfg);
            const double unfold_seconds = elapsed_seconds(t_unfold);

            // Low-dimensional readout diagnostic: fit the basis on raw
            // per-domain covariances, classify in the projected coordinates,
            // and compare against the same classifier on raw features.
            const cpcanet::ToyDGDataset toy = cpcanet::gen_toy_dg(16, 4, 4, 150, 2.0, bench_seed);
            std::vector<cpcanet::CovarianceMatrix> raw_covs;
            std::vector<double> raw_weights;
            cpcanet::Matrix pooled(0, 0);
            std::vector<int> pooled_y;
            std::size_t total_rows = 0;
            for (std::size_t k = 0; k < toy.domains.size(); ++k) {
                if (k == toy.heldout) continue;
                total_rows += toy.domains[k].features.rows();
            }
            pooled = cpcanet::Matrix(total_rows, toy.feature_dim);
            std::size_t row = 0;
            for (std::size_t k = 0; k < toy.domains.size(); ++k) {
                if (k == toy.heldout) continue;
                const auto& dom = toy.domains[k];
                raw_covs.push_back(cpcanet::covariance(dom.features));
                raw_weights.push_back(static_cast<double>(dom.features.rows() - 1));
                for (std::size_t i = 0; i < dom.features.rows(); ++i, ++row) {
                    for (std::size_t j = 0; j < toy.feature_dim; ++j)
                        pooled(row, j) = dom.features(i, j);
                    pooled_y.push_back(dom.labels[i]);
                }
            }
            const cpcanet::CovarianceSet raw_set(std::move(raw_covs), std::move(raw_weights));
            const cpcanet::FgResult raw_fg = cpcanet::fg_fit(raw_set);
            const cpcanet::Matrix projected = matmul(pooled, raw_fg.basis.matrix());
            const auto& held = toy.domains[toy.heldout];
            const cpcanet::Matrix held_projected = matmul(held.features, raw_fg.basis.matrix());

            const SoftmaxFit on_raw = fit_softmax(pooled, pooled_y, toy.class_count, 300, 0.5);
            const SoftmaxFit on_proj = fit_softmax(projected, pooled_y, toy.class_count, 300, 0.5);

            const json report{
                {"fg",
                 {{"seconds", fg_seconds},
                  {"sweeps", fg.sweeps_used},
                  {"residual", cpcanet::ml_residual(fg.basis, covs)},
                  {"offdiag", cpcanet::cpca_loss(fg.basis, covs)}}},
                {"unfold",
                 {{"seconds", unfold_seconds},
                  {"stages", bench_stages},
                  {"eta", bench_eta},
                  {"residual", cpcanet::ml_residual(unfolded.basis, covs)},
                  {"offdiag", unfolded.trace.stages.back().offdiag},
                  {"initial_offdiag", unfolded.trace.initial_offdiag}}},
                {"naive_classifier",
                 {{"raw_train_acc", softmax_accuracy(on_raw, pooled, pooled_y)},
                  {"raw_heldout_acc", softmax_accuracy(on_raw, held.features, held.labels)},
                  {"projected_train_acc", softmax_accuracy(on_proj, projected, pooled_y)},
                  {"projected_heldout_acc",
                   softmax_accuracy(on_proj, held_projected, held.labels)}}}};
            std::ofstream out(bench_out);
            if (!out) throw cpcanet::SchemaMismatch("bench: cannot open " + bench_out);
            out << report.dump(2) << '\n';
            info("bench: wrote " + bench_out);
            return kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
