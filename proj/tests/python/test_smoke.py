"""Smoke tests for the python bindings, checked against numpy."""

import numpy as np

import cpcanet


def test_covariance_matches_numpy():
    rng = np.random.default_rng(0)
    samples = rng.normal(size=(40, 5))
    ours = cpcanet.covariance(samples)
    theirs = np.cov(samples, rowvar=False)
    assert np.allclose(ours, theirs, atol=1e-12)


def test_cayley_is_orthogonal_and_matches_numpy_solve():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(6, 6))
    skew = g - g.T
    beta = cpcanet.cayley(skew)
    eye = np.eye(6)
    assert np.linalg.norm(beta.T @ beta - eye) < 1e-10
    assert abs(np.linalg.det(beta) - 1.0) < 1e-8
    reference = np.linalg.solve(eye + skew / 2, eye - skew / 2)
    assert np.allclose(beta, reference, atol=1e-12)


def test_offdiag_energy_and_frobenius():
    m = np.array([[1.0, 3.0], [3.0, 1.0]])
    assert cpcanet.offdiag_energy(m) == 9.0
    assert cpcanet.frobenius_norm(np.array([[3.0, 4.0], [0.0, 0.0]])) == 5.0


def test_fg_recovers_a_planted_basis():
    ensemble = cpcanet.gen_common_ensemble(8, 3, seed=5)
    result = cpcanet.fg_fit(ensemble["covariances"], ensemble["weights"])
    assert result["converged"]
    assert result["residual"] < 1e-6
    # recovered columns match the planted ones up to signed permutation
    overlap = np.abs(ensemble["basis"].T @ result["beta"])
    assert np.allclose(np.sort(overlap.max(axis=0)), 1.0, atol=1e-9)
    assert cpcanet.cpca_loss(result["beta"], ensemble["covariances"],
                             ensemble["weights"]) < 1e-12


def test_unfold_descends_the_energy():
    ensemble = cpcanet.gen_common_ensemble(8, 3, seed=9)
    out = cpcanet.unfold_solve(ensemble["covariances"], ensemble["weights"], [0.1] * 50)
    assert out["stages"][-1]["offdiag"] < out["initial_offdiag"]
    beta = out["beta"]
    assert np.linalg.norm(beta.T @ beta - np.eye(8)) < 1e-10
    grad = cpcanet.riemannian_gradient(beta, ensemble["covariances"], ensemble["weights"])
    assert np.linalg.norm(grad + grad.T) == 0.0


def test_negloglik_and_residual_prefer_the_truth():
    ensemble = cpcanet.gen_common_ensemble(6, 3, seed=3)
    truth = ensemble["basis"]
    eye = np.eye(6)
    covs, weights = ensemble["covariances"], ensemble["weights"]
    assert cpcanet.ml_residual(truth, covs, weights) < 1e-10
    assert cpcanet.negloglik(truth, covs, weights) <= cpcanet.negloglik(eye, covs, weights)


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"{name}: ok")
    print("python smoke tests passed")
