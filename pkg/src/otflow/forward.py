"""Discrete forward model: operator-split advection-diffusion time stepping.

Each interval advances the density by a conservative particle deposit
(advection) followed by one backward-Euler diffusion solve:

    rho_star = S(v_n) @ rho_n
    (I - dt * A) rho_{n+1} = rho_star

Both half-steps conserve total mass; the diffusion solve additionally clamps
round-off negatives to zero so densities stay nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .errors import GridMismatchError
from .grid import CellGrid, ScalarField, VectorField
from .linalg import jacobi_cg
from .operators import (
    advection_interp_matrix,
    advection_weight_gradients,
    assemble_diffusion_operator,
)

__all__ = [
    "TimeGrid",
    "DensitySeries",
    "VelocitySeries",
    "ImplicitDiffusion",
    "advect_step",
    "diffuse_step",
    "forward",
    "advect_velocity_jacobian_apply",
]

# Relative residual for the diffusion CG solves. Tighter than the 1e-10
# contract so that mass drift and adjoint/finite-difference comparisons sit
# well below their tolerances.
DIFFUSION_CG_RTOL = 1e-12

# Negative values below this magnitude after a diffusion solve are treated as
# round-off and clamped to zero.
NEGATIVE_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time discretization: `steps` intervals of length `dt`."""

    steps: int
    dt: float

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError(f"need at least one time step, got {self.steps}")
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @classmethod
    def unit_horizon(cls, steps: int) -> "TimeGrid":
        """Time grid normalized so the horizon is exactly one."""
        return cls(steps, 1.0 / steps)


@dataclass(eq=False)
class DensitySeries:
    """Density trajectory: frames 0..steps as rows of `values` ((steps+1, s))."""

    grid: CellGrid
    time_grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expect = (self.time_grid.steps + 1, self.grid.cell_count)
        if vals.shape != expect:
            raise ValueError(f"expected values of shape {expect}, got {vals.shape}")
        self.values = vals

    def frame(self, n: int) -> ScalarField:
        return ScalarField(self.grid, self.values[n])

    def masses(self) -> np.ndarray:
        return self.values.sum(axis=1)


@dataclass(eq=False)
class VelocitySeries:
    """Velocity trajectory: one vector field per interval, `values` (steps, d, s)."""

    grid: CellGrid
    time_grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expect = (self.time_grid.steps, self.grid.ndim, self.grid.cell_count)
        if vals.shape != expect:
            raise ValueError(f"expected values of shape {expect}, got {vals.shape}")
        self.values = vals

    @classmethod
    def zeros(cls, grid: CellGrid, time_grid: TimeGrid) -> "VelocitySeries":
        return cls(grid, time_grid, np.zeros((time_grid.steps, grid.ndim, grid.cell_count)))

    def frame(self, n: int) -> VectorField:
        return VectorField(self.grid, self.values[n])

    def with_values(self, values: np.ndarray) -> "VelocitySeries":
        return VelocitySeries(self.grid, self.time_grid, values)


class ImplicitDiffusion:
    """Reusable backward-Euler diffusion solve (I - dt*A) x = b via CG.

    With a zero operator the solve degenerates to the identity and is skipped.
    """

    def __init__(
        self,
        A: sparse.csr_matrix | None,
        dt: float,
        rtol: float = DIFFUSION_CG_RTOL,
        max_iters: int | None = None,
    ):
        if dt <= 0:
            raise ValueError(f"time step must be positive, got {dt}")
        self.dt = float(dt)
        self.rtol = float(rtol)
        self.is_identity = A is None or A.nnz == 0
        if self.is_identity:
            self.system = None
            self.diag = None
            self.max_iters = 0
        else:
            n = A.shape[0]
            self.system = (sparse.identity(n, format="csr") - dt * A).tocsr()
            self.system.sort_indices()
            self.diag = self.system.diagonal()
            self.max_iters = int(max_iters) if max_iters is not None else 10 * n

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return np.array(rhs, dtype=float, copy=True)
        result = jacobi_cg(
            lambda x: self.system @ x,
            rhs,
            rtol=self.rtol,
            max_iters=self.max_iters,
            diag=self.diag,
        )
        return result.x


def _require_density(values: np.ndarray, what: str):
    if np.any(values < 0):
        raise ValueError(f"{what} must be nonnegative")


def advect_step(rho: ScalarField, v: VectorField, dt: float) -> ScalarField:
    """One conservative particle-deposit advection step."""
    if rho.grid != v.grid:
        raise GridMismatchError("density and velocity grids differ")
    _require_density(rho.values, "density")
    S = advection_interp_matrix(rho.grid, v, dt)
    return ScalarField(rho.grid, S @ rho.values)


def diffuse_step(rho_star: ScalarField, A: sparse.csr_matrix, dt: float) -> ScalarField:
    """One backward-Euler diffusion step, clamping round-off negatives to zero."""
    _require_density(rho_star.values, "density")
    solver = ImplicitDiffusion(A, dt)
    out = solver.apply(rho_star.values)
    if not solver.is_identity:
        if out.min() < -NEGATIVE_CLAMP_TOL:
            raise ValueError(
                f"diffusion produced a negative density ({out.min():.3e}); "
                "this indicates a broken operator, not round-off"
            )
        np.maximum(out, 0.0, out=out)
    return ScalarField(rho_star.grid, out)


def forward(v: VelocitySeries, rho0: ScalarField, sigma: float) -> DensitySeries:
    """Advance rho0 through all intervals of the velocity series."""
    if rho0.grid != v.grid:
        raise GridMismatchError("initial density and velocity grids differ")
    _require_density(rho0.values, "initial density")
    A = assemble_diffusion_operator(v.grid, sigma)
    diffusion = ImplicitDiffusion(A, v.time_grid.dt)
    frames = forward_frames(v.grid, v.time_grid, v.values, rho0.values, diffusion)
    return DensitySeries(v.grid, v.time_grid, frames)


def forward_frames(
    grid: CellGrid,
    time_grid: TimeGrid,
    v_values: np.ndarray,
    rho0_values: np.ndarray,
    diffusion: ImplicitDiffusion,
) -> np.ndarray:
    """Raw-array forward sweep shared by the public model and the optimizer."""
    frames = np.empty((time_grid.steps + 1, grid.cell_count))
    frames[0] = rho0_values
    for n in range(time_grid.steps):
        S = advection_interp_matrix(grid, VectorField(grid, v_values[n]), time_grid.dt)
        nxt = diffusion.apply(S @ frames[n])
        if not diffusion.is_identity:
            np.maximum(nxt, 0.0, out=nxt)
        frames[n + 1] = nxt
    return frames


def advect_velocity_jacobian_apply(
    rho: ScalarField, v: VectorField, dv: VectorField, dt: float
) -> ScalarField:
    """Directional derivative of S(v) @ rho with respect to v, direction dv.

    The deposit-cell assignment of each particle is held fixed, matching the
    piecewise-linear dependence of the deposit weights on the displacement.
    """
    if rho.grid != v.grid or dv.grid != v.grid:
        raise GridMismatchError("fields live on different grids")
    grads = advection_weight_gradients(rho.grid, v, dt)
    out = np.zeros(rho.grid.cell_count)
    for k, G in enumerate(grads):
        out += G @ (rho.values * dv.components[k])
    return ScalarField(rho.grid, out)
