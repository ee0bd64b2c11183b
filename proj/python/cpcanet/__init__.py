"""Common principal component analysis: classical and unfolded solvers."""

from cpcanet._core import (
    cayley,
    covariance,
    cpca_loss,
    fg_fit,
    frobenius_norm,
    gen_common_ensemble,
    ml_residual,
    negloglik,
    offdiag_energy,
    riemannian_gradient,
    unfold_solve,
)

__all__ = [
    "cayley",
    "covariance",
    "cpca_loss",
    "fg_fit",
    "frobenius_norm",
    "gen_common_ensemble",
    "ml_residual",
    "negloglik",
    "offdiag_energy",
    "riemannian_gradient",
    "unfold_solve",
]
