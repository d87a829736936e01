"""Minimal numerical core: linear algebra, seeded sampling, reverse-mode AD."""

from modeconnect.ndmath.autodiff import Tape, Var, backward, grad
from modeconnect.ndmath.linalg import (
    DEFAULT_RCOND,
    SvdConvergenceError,
    jacobi_svd,
    pseudo_inverse,
    svd,
)
from modeconnect.ndmath.random import Rng, make_rng, sample_gaussian, spawn

__all__ = [
    "DEFAULT_RCOND",
    "Rng",
    "SvdConvergenceError",
    "Tape",
    "Var",
    "backward",
    "grad",
    "jacobi_svd",
    "make_rng",
    "pseudo_inverse",
    "sample_gaussian",
    "spawn",
    "svd",
]
