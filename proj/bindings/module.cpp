#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cpcanet/data.hpp"
#include "cpcanet/fg.hpp"
#include "cpcanet/linalg.hpp"
#include "cpcanet/unfold.hpp"

namespace py = pybind11;
using namespace cpcanet;

namespace {

Matrix to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& array) {
    if (array.ndim() != 2) throw py::value_error("expected a 2-D array");
    Matrix m(static_cast<std::size_t>(array.shape(0)), static_cast<std::size_t>(array.shape(1)));
    std::memcpy(m.data(), array.data(), m.size() * sizeof(double));
    return m;
}

py::array_t<double> to_array(const Matrix& m) {
    py::array_t<double> out({m.rows(), m.cols()});
    std::memcpy(out.mutable_data(), m.data(), m.size() * sizeof(double));
    return out;
}

CovarianceSet to_covariance_set(const std::vector<py::array_t<double>>& covariances,
                                const std::vector<double>& weights) {
    std::vector<CovarianceMatrix> domains;
    domains.reserve(covariances.size());
    for (const auto& s : covariances) domains.emplace_back(to_matrix(s));
    return CovarianceSet(std::move(domains), weights);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Common principal component analysis: classical and unfolded solvers";

    m.def(
        "covariance",
        [](const py::array_t<double>& samples) {
            return to_array(covariance(to_matrix(samples)).matrix());
        },
        py::arg("samples"),
        "Unbiased sample covariance of an N x d sample matrix (rows are samples).");

    m.def(
        "cayley",
        [](const py::array_t<double>& skew) {
            return to_array(cayley(SkewMatrix(to_matrix(skew))).matrix());
        },
        py::arg("skew"),
        "Cayley retraction (I - A/2)(I + A/2)^-1 of a skew-symmetric matrix.");

    m.def(
        "offdiag_energy",
        [](const py::array_t<double>& matrix) { return offdiag_energy(to_matrix(matrix)); },
        py::arg("matrix"), "Mean normalized off-diagonal energy.");

    m.def(
        "frobenius_norm",
        [](const py::array_t<double>& matrix) { return frobenius_norm(to_matrix(matrix)); },
        py::arg("matrix"));

    m.def(
        "fg_fit",
        [](const std::vector<py::array_t<double>>& covariances,
           const std::vector<double>& weights, double tol, std::size_t max_sweeps) {
            FgConfig config;
            config.tol = tol;
            config.max_sweeps = max_sweeps;
            const CovarianceSet covs = to_covariance_set(covariances, weights);
            const FgResult result = fg_fit(covs, config);
            py::dict out;
            out["beta"] = to_array(result.basis.matrix());
            out["lambdas"] = to_array(result.lambdas);
            out["sweeps"] = result.sweeps_used;
            out["converged"] = result.converged(config);
            out["residual"] = ml_residual(result.basis, covs);
            return out;
        },
        py::arg("covariances"), py::arg("weights"), py::arg("tol") = 1e-10,
        py::arg("max_sweeps") = 100,
        "Classical pairwise-rotation estimate of the common basis.");

    m.def(
        "ml_residual",
        [](const py::array_t<double>& basis, const std::vector<py::array_t<double>>& covariances,
           const std::vector<double>& weights) {
            return ml_residual(OrthogonalBasis(to_matrix(basis)),
                               to_covariance_set(covariances, weights));
        },
        py::arg("basis"), py::arg("covariances"), py::arg("weights"));

    m.def(
        "negloglik",
        [](const py::array_t<double>& basis, const std::vector<py::array_t<double>>& covariances,
           const std::vector<double>& weights) {
            return negloglik(OrthogonalBasis(to_matrix(basis)),
                             to_covariance_set(covariances, weights));
        },
        py::arg("basis"), py::arg("covariances"), py::arg("weights"));

    m.def(
        "riemannian_gradient",
        [](const py::array_t<double>& basis, const std::vector<py::array_t<double>>& covariances,
           const std::vector<double>& weights, double eps) {
            return to_array(riemannian_gradient(OrthogonalBasis(to_matrix(basis)),
                                                to_covariance_set(covariances, weights), eps)
                                .matrix());
        },
        py::arg("basis"), py::arg("covariances"), py::arg("weights"), py::arg("eps") = 1e-8,
        "Skew tangent gradient of the negative log-likelihood.");

    m.def(
        "cpca_loss",
        [](const py::array_t<double>& basis, const std::vector<py::array_t<double>>& covariances,
           const std::vector<double>& weights) {
            return cpca_loss(OrthogonalBasis(to_matrix(basis)),
                             to_covariance_set(covariances, weights));
        },
        py::arg("basis"), py::arg("covariances"), py::arg("weights"),
        "Mean off-diagonal energy of the basis-transformed covariances.");

    m.def(
        "unfold_solve",
        [](const std::vector<py::array_t<double>>& covariances,
           const std::vector<double>& weights, const std::vector<double>& etas, double eps,
           double eps_norm) {
            UnfoldConfig config;
            config.stages = etas.size();
            config.eps = eps;
            config.eps_norm = eps_norm;
            const UnfoldResult result =
                unfold_solve(to_covariance_set(covariances, weights), etas, config);
            py::list stages;
            for (const UnfoldStage& stage : result.trace.stages) {
                py::dict s;
                s["eta"] = stage.eta;
                s["objective"] = stage.objective;
                s["offdiag"] = stage.offdiag;
                s["grad_norm"] = stage.grad_norm;
                stages.append(std::move(s));
            }
            py::dict out;
            out["beta"] = to_array(result.basis.matrix());
            out["initial_objective"] = result.trace.initial_objective;
            out["initial_offdiag"] = result.trace.initial_offdiag;
            out["stages"] = std::move(stages);
            return out;
        },
        py::arg("covariances"), py::arg("weights"), py::arg("etas"), py::arg("eps") = 1e-8,
        py::arg("eps_norm") = 1e-12,
        "Unfolded tangent-descent solve; one stage per entry of etas.");

    m.def(
        "gen_common_ensemble",
        [](std::size_t d, std::size_t domains, double spectra_lo, double spectra_hi,
           double noise_level, std::uint64_t seed) {
            const CommonBasisEnsemble ensemble =
                gen_common_ensemble(d, domains, spectra_lo, spectra_hi, noise_level, seed);
            py::list covariances;
            py::list weights;
            for (std::size_t k = 0; k < ensemble.covs.size(); ++k) {
                covariances.append(to_array(ensemble.covs.domain(k).matrix()));
                weights.append(ensemble.covs.weight(k));
            }
            py::dict out;
            out["basis"] = to_array(ensemble.truth.matrix());
            out["spectra"] = to_array(ensemble.spectra);
            out["covariances"] = std::move(covariances);
            out["weights"] = std::move(weights);
            return out;
        },
        py::arg("d"), py::arg("domains"), py::arg("spectra_lo") = 1.0,
        py::arg("spectra_hi") = 10.0, py::arg("noise_level") = 0.0, py::arg("seed") = 0,
        "Covariance family with a known planted common basis.");
}
