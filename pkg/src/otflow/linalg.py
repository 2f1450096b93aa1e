"""Jacobi-preconditioned conjugate gradients for SPD systems."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .errors import ConjugateGradientError

__all__ = ["CGResult", "jacobi_cg"]


class CGResult(NamedTuple):
    x: np.ndarray
    iterations: int
    relative_residual: float


def jacobi_cg(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    rtol: float,
    max_iters: int,
    diag: np.ndarray | None = None,
) -> CGResult:
    """Solve A x = b for SPD A, stopping at ||r|| <= rtol * ||b||.

    Raises ConjugateGradientError (carrying the final relative residual) when
    the iteration cap is reached first. Fully deterministic.
    """
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0)
    inv_diag = 1.0 / diag if diag is not None else None

    x = np.zeros_like(b)
    r = b.copy()
    z = r * inv_diag if inv_diag is not None else r.copy()
    p = z.copy()
    rz = float(r @ z)
    relres = 1.0
    for it in range(1, max_iters + 1):
        ap = matvec(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            raise ConjugateGradientError(
                f"non-positive curvature encountered at iteration {it}", relres, it
            )
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        relres = float(np.linalg.norm(r)) / bnorm
        if relres <= rtol:
            return CGResult(x, it, relres)
        z = r * inv_diag if inv_diag is not None else r.copy()
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConjugateGradientError(
        f"no convergence after {max_iters} iterations (relative residual {relres:.3e})",
        relres,
        max_iters,
    )
