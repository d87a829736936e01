"""Dense linear algebra: SVD and the Moore-Penrose pseudo-inverse."""

from __future__ import annotations

import numpy as np

DEFAULT_RCOND = 1e-10


class SvdConvergenceError(ArithmeticError):
    """Raised when no SVD routine converged within its iteration cap."""

    def __init__(self, iterations: int, shape: tuple[int, ...]):
        super().__init__(
            f"SVD of {shape[0]}x{shape[1]} matrix did not converge "
            f"after {iterations} Jacobi sweeps"
        )
        self.iterations = iterations
        self.shape = shape


def _check_finite(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def jacobi_svd(a: np.ndarray, max_sweeps: int = 60, tol: float = 1e-15):
    """Thin SVD by one-sided Jacobi rotations.

    Slower than LAPACK but with an explicit sweep cap; used as the fallback
    when the LAPACK driver fails to converge.
    """
    a = _check_finite(a)
    rows, cols = a.shape
    if rows < cols:
        v, s, ut = jacobi_svd(a.T, max_sweeps, tol)
        return ut.T, s, v.T
    u = a.copy()
    v = np.eye(cols)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise SvdConvergenceError(max_sweeps, a.shape)

    sing = np.linalg.norm(u, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    u = u[:, order]
    v = v[:, order]
    nz = sing > 0
    u[:, nz] /= sing[nz]
    if not np.all(nz):
        # complete the basis for zero singular values
        q, _ = np.linalg.qr(np.hstack([u[:, nz], np.eye(rows)]))
        u[:, ~nz] = q[:, np.count_nonzero(nz):cols]
    return u, sing, v.T


def svd(a: np.ndarray):
    """Thin SVD ``a = u @ diag(s) @ vt`` with non-increasing ``s``."""
    a = _check_finite(a)
    if a.size == 0:
        k = min(a.shape)
        return np.zeros((a.shape[0], k)), np.zeros(k), np.zeros((k, a.shape[1]))
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        return jacobi_svd(a)


def pseudo_inverse(a: np.ndarray, rcond: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudo-inverse.

    Singular values below ``rcond * max(rows, cols) * s_max`` are treated
    as zero.
    """
    if rcond < 0:
        raise ValueError("rcond must be non-negative")
    a = _check_finite(a)
    u, s, vt = svd(a)
    if s.size == 0:
        return np.zeros(a.T.shape)
    cutoff = rcond * max(a.shape) * s[0]
    keep = s > cutoff
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt[keep].T * inv[keep]) @ u[:, keep].T
