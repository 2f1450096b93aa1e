"""Velocity recovery between density snapshots.

Minimizes, over the velocity trajectory, the transport energy

    0.5 * cell_volume * dt * sum_n <rho_n, |v_n|^2>

plus an alpha-weighted data misfit sum_{observed n>0} <w_n, (rho_n - obs_n)^2>,
where the trajectory rho is produced by the operator-split forward model with
rho_0 pinned to the initial observation. The gradient comes from a backward
adjoint sweep; steps are Gauss-Newton directions (misfit curvature plus the
diagonal energy curvature in v) solved matrix-free by inner CG, safeguarded by
Armijo backtracking, so the objective is non-increasing across iterations.

A restricted mode reproduces the classical fixed-endpoint transport baseline:
densities normalized to unit total mass, no diffusion, and the endpoint
enforced through a large penalty weight.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import GridMismatchError
from .forward import (
    DensitySeries,
    ImplicitDiffusion,
    TimeGrid,
    VelocitySeries,
    forward_frames,
)
from .grid import CellGrid, ScalarField, VectorField
from .operators import (
    advection_interp_matrix,
    advection_weight_gradients,
    assemble_diffusion_operator,
)

__all__ = [
    "ObservationEntry",
    "ObservationSet",
    "SolverConfig",
    "IterationRecord",
    "SolveResult",
    "objective",
    "gradient",
    "solve",
    "solve_baseline",
    "registration_errors",
    "rmse_between_series",
    "BASELINE_ALPHA_FACTOR",
]

# Penalty multiplier standing in for the baseline's hard endpoint constraint.
BASELINE_ALPHA_FACTOR = 1.0e6


@dataclass(eq=False)
class ObservationEntry:
    """One observed density at a time index, with per-cell fidelity weights."""

    time_index: int
    observed: ScalarField
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.time_index = int(self.time_index)
        if self.time_index < 0:
            raise ValueError(f"time index must be nonnegative, got {self.time_index}")
        if self.weight is None:
            self.weight = np.ones(self.observed.grid.cell_count)
        else:
            w = np.asarray(self.weight, dtype=float).ravel()
            if w.shape != (self.observed.grid.cell_count,):
                raise ValueError("weight length must match the grid cell count")
            if np.any(w <= 0):
                raise ValueError("fidelity weights must be strictly positive")
            self.weight = w


@dataclass(eq=False)
class ObservationSet:
    """Observed densities anchoring the solve, plus the fidelity weight alpha.

    The entry at time index 0 is the pinned initial condition; at least one
    later entry must be present to give the solver something to fit.
    """

    entries: list[ObservationEntry]
    alpha: float

    def __post_init__(self):
        if not self.entries:
            raise ValueError("observation set is empty")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        self.entries = sorted(self.entries, key=lambda e: e.time_index)
        indices = [e.time_index for e in self.entries]
        if len(set(indices)) != len(indices):
            raise ValueError(f"duplicate observation time indices: {indices}")
        if indices[0] != 0:
            raise ValueError("an observation at time index 0 is required")
        if len(indices) < 2:
            raise ValueError("need at least one observation after time index 0")
        grid = self.entries[0].observed.grid
        if any(e.observed.grid != grid for e in self.entries):
            raise GridMismatchError("observations live on different grids")
        self.alpha = float(self.alpha)

    @property
    def grid(self) -> CellGrid:
        return self.entries[0].observed.grid

    @property
    def initial(self) -> ScalarField:
        return self.entries[0].observed

    def interior(self) -> dict[int, ObservationEntry]:
        """Entries that contribute to the misfit (everything after index 0)."""
        return {e.time_index: e for e in self.entries if e.time_index > 0}

    def max_index(self) -> int:
        return self.entries[-1].time_index


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the Gauss-Newton solve."""

    sigma: float = 0.0
    alpha: float = 1.0
    time_steps: int = 4
    max_gn_iters: int = 50
    gn_cg_tolerance: float = 1e-2
    gn_cg_max_iters: int = 50
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 25
    stop_tolerance: float = 1e-6
    baseline_mode: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.time_steps < 1:
            raise ValueError("need at least one time step")
        if self.max_gn_iters < 1:
            raise ValueError("need at least one Gauss-Newton iteration")
        for name in ("gn_cg_tolerance", "stop_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.armijo_c <= 0.5:
            raise ValueError(f"armijo_c must lie in (0, 0.5], got {self.armijo_c}")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.gn_cg_max_iters < 1 or self.max_backtracks < 1:
            raise ValueError("iteration caps must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    phi: float
    energy: float
    misfit: float
    grad_norm: float
    step_length: float


@dataclass(eq=False)
class SolveResult:
    """Recovered velocity, the matching clean density trajectory, and diagnostics."""

    velocity: VelocitySeries
    densities: DensitySeries
    diagnostics: list[IterationRecord]
    converged: bool
    termination: str  # 'gradient' | 'max_iters' | 'line_search'

    def diagnostics_csv(self) -> str:
        lines = ["iter,phi,energy,misfit,grad_norm,step_length"]
        for r in self.diagnostics:
            lines.append(
                f"{r.iteration},{r.phi!r},{r.energy!r},{r.misfit!r},"
                f"{r.grad_norm!r},{r.step_length!r}"
            )
        return "\n".join(lines) + "\n"


class ObjectiveValue(NamedTuple):
    total: float
    energy: float
    misfit: float
    densities: DensitySeries


@dataclass(eq=False)
class _Linearization:
    """Forward trajectory plus the per-step deposit matrices and their v-derivatives."""

    frames: np.ndarray          # (m+1, s)
    S: list                     # deposit matrix per step
    S_T: list                   # transposes, CSR
    G: list                     # per step: list of d weight-gradient matrices
    G_T: list                   # transposes, CSR


def _linearize(
    grid: CellGrid,
    time_grid: TimeGrid,
    v_values: np.ndarray,
    rho0_values: np.ndarray,
    diffusion: ImplicitDiffusion,
) -> _Linearization:
    m = time_grid.steps
    frames = np.empty((m + 1, grid.cell_count))
    frames[0] = rho0_values
    S_list, ST_list, G_list, GT_list = [], [], [], []
    for n in range(m):
        vf = VectorField(grid, v_values[n])
        S = advection_interp_matrix(grid, vf, time_grid.dt)
        G = advection_weight_gradients(grid, vf, time_grid.dt)
        nxt = diffusion.apply(S @ frames[n])
        if not diffusion.is_identity:
            np.maximum(nxt, 0.0, out=nxt)
        frames[n + 1] = nxt
        S_list.append(S)
        ST_list.append(S.T.tocsr())
        G_list.append(G)
        GT_list.append([g.T.tocsr() for g in G])
    return _Linearization(frames, S_list, ST_list, G_list, GT_list)


def _objective_terms(
    grid: CellGrid,
    time_grid: TimeGrid,
    v_values: np.ndarray,
    frames: np.ndarray,
    obs: ObservationSet,
) -> tuple[float, float, float]:
    speed_sq = (v_values**2).sum(axis=1)  # (m, s)
    energy = 0.5 * grid.cell_volume * time_grid.dt * float((frames[:-1] * speed_sq).sum())
    residual = 0.0
    for idx, entry in obs.interior().items():
        r = frames[idx] - entry.observed.values
        residual += float((entry.weight * r * r).sum())
    misfit = obs.alpha * residual
    return energy + misfit, energy, misfit


def _gradient_values(
    grid: CellGrid,
    time_grid: TimeGrid,
    v_values: np.ndarray,
    lin: _Linearization,
    obs: ObservationSet,
    diffusion: ImplicitDiffusion,
) -> np.ndarray:
    """Adjoint sweep through the split steps.

    The adjoint state accumulates the misfit residuals and the density
    sensitivity of the energy term; the diffusion solve is its own transpose
    and the deposit matrices enter through their transposes.
    """
    m, d, _ = v_values.shape
    coef = grid.cell_volume * time_grid.dt
    interior = obs.interior()
    g = np.empty_like(v_values)
    lam = np.zeros(grid.cell_count)
    if m in interior:
        e = interior[m]
        lam = 2.0 * obs.alpha * e.weight * (lin.frames[m] - e.observed.values)
    for n in range(m - 1, -1, -1):
        mu = diffusion.apply(lam)
        rho_n = lin.frames[n]
        for k in range(d):
            g[n, k] = coef * rho_n * v_values[n, k] + rho_n * (lin.G_T[n][k] @ mu)
        if n > 0:
            lam = lin.S_T[n] @ mu + 0.5 * coef * (v_values[n] ** 2).sum(axis=0)
            if n in interior:
                e = interior[n]
                lam = lam + 2.0 * obs.alpha * e.weight * (lin.frames[n] - e.observed.values)
    return g


def _gn_hessian_apply(
    grid: CellGrid,
    time_grid: TimeGrid,
    dv: np.ndarray,
    lin: _Linearization,
    obs: ObservationSet,
    diffusion: ImplicitDiffusion,
) -> np.ndarray:
    """Gauss-Newton curvature product: misfit J^T W J plus the diagonal energy block.

    Cross terms through the density's dependence on v inside the energy are
    dropped, which keeps the operator symmetric positive semidefinite.
    """
    m, d, s = dv.shape
    coef = grid.cell_volume * time_grid.dt
    interior = obs.interior()
    # linearized forward sweep
    drho = np.zeros((m + 1, s))
    for n in range(m):
        inj = np.zeros(s)
        for k in range(d):
            inj += lin.G[n][k] @ (lin.frames[n] * dv[n, k])
        drho[n + 1] = diffusion.apply(lin.S[n] @ drho[n] + inj)
    out = coef * lin.frames[:-1][:, None, :] * dv
    # weighted-residual adjoint sweep
    lam = np.zeros(s)
    if m in interior:
        lam = 2.0 * obs.alpha * interior[m].weight * drho[m]
    for n in range(m - 1, -1, -1):
        mu = diffusion.apply(lam)
        for k in range(d):
            out[n, k] += lin.frames[n] * (lin.G_T[n][k] @ mu)
        if n > 0:
            lam = lin.S_T[n] @ mu
            if n in interior:
                lam = lam + 2.0 * obs.alpha * interior[n].weight * drho[n]
    return out


def _gn_step(
    hess_apply: Callable[[np.ndarray], np.ndarray],
    grad: np.ndarray,
    tol: float,
    max_iters: int,
) -> np.ndarray:
    """Truncated CG on the Gauss-Newton normal equations H p = -g.

    Stops early on the relative-residual target or on a flat/singular
    direction; whatever iterate is reached is still a descent direction.
    """
    b = -grad
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float((r * r).sum())
    for _ in range(max_iters):
        hp = hess_apply(p)
        curv = float((p * hp).sum())
        if curv <= 1e-16 * float((p * p).sum()):
            break
        a = rs / curv
        x += a * p
        r -= a * hp
        rs_new = float((r * r).sum())
        if np.sqrt(rs_new) <= tol * bnorm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def _validate_problem(rho0: ScalarField, obs: ObservationSet, config: SolverConfig):
    if rho0.grid != obs.grid:
        raise GridMismatchError("initial density and observations live on different grids")
    if np.any(rho0.values < 0):
        raise ValueError("initial density must be nonnegative")
    if obs.max_index() > config.time_steps:
        raise ValueError(
            f"observation at index {obs.max_index()} exceeds time_steps={config.time_steps}"
        )


def objective(
    v: VelocitySeries, rho0: ScalarField, obs: ObservationSet, config: SolverConfig
) -> ObjectiveValue:
    """Evaluate the transport energy, the data misfit, and their sum at v."""
    _validate_problem(rho0, obs, config)
    A = assemble_diffusion_operator(v.grid, config.sigma)
    diffusion = ImplicitDiffusion(A, v.time_grid.dt)
    frames = forward_frames(v.grid, v.time_grid, v.values, rho0.values, diffusion)
    total, energy, misfit = _objective_terms(v.grid, v.time_grid, v.values, frames, obs)
    return ObjectiveValue(total, energy, misfit, DensitySeries(v.grid, v.time_grid, frames))


def gradient(
    v: VelocitySeries, rho0: ScalarField, obs: ObservationSet, config: SolverConfig
) -> VelocitySeries:
    """Adjoint gradient of the objective with respect to the velocity trajectory."""
    _validate_problem(rho0, obs, config)
    A = assemble_diffusion_operator(v.grid, config.sigma)
    diffusion = ImplicitDiffusion(A, v.time_grid.dt)
    lin = _linearize(v.grid, v.time_grid, v.values, rho0.values, diffusion)
    g = _gradient_values(v.grid, v.time_grid, v.values, lin, obs, diffusion)
    return VelocitySeries(v.grid, v.time_grid, g)


def solve(rho0: ScalarField, obs: ObservationSet, config: SolverConfig) -> SolveResult:
    """Gauss-Newton minimization of the objective, starting from zero velocity."""
    _validate_problem(rho0, obs, config)
    grid = rho0.grid
    time_grid = TimeGrid.unit_horizon(config.time_steps)
    A = assemble_diffusion_operator(grid, config.sigma)
    diffusion = ImplicitDiffusion(A, time_grid.dt)

    v = np.zeros((time_grid.steps, grid.ndim, grid.cell_count))
    lin = _linearize(grid, time_grid, v, rho0.values, diffusion)
    phi, energy, misfit = _objective_terms(grid, time_grid, v, lin.frames, obs)
    g = _gradient_values(grid, time_grid, v, lin, obs, diffusion)
    gnorm = float(np.linalg.norm(g))
    gnorm0 = gnorm
    records = [IterationRecord(0, phi, energy, misfit, gnorm, 0.0)]

    converged = gnorm0 == 0.0
    termination = "gradient" if converged else "max_iters"
    if not converged:
        for it in range(1, config.max_gn_iters + 1):
            step = _gn_step(
                lambda dv: _gn_hessian_apply(grid, time_grid, dv, lin, obs, diffusion),
                g,
                config.gn_cg_tolerance,
                config.gn_cg_max_iters,
            )
            slope = float((g * step).sum())
            if slope >= 0.0:
                step = -g
                slope = -gnorm * gnorm
            # Armijo backtracking on the true objective
            t = 1.0
            accepted = False
            for _ in range(config.max_backtracks + 1):
                trial_v = v + t * step
                trial_frames = forward_frames(grid, time_grid, trial_v, rho0.values, diffusion)
                trial_phi, trial_e, trial_m = _objective_terms(
                    grid, time_grid, trial_v, trial_frames, obs
                )
                if np.isfinite(trial_phi) and trial_phi <= phi + config.armijo_c * t * slope:
                    accepted = True
                    break
                t *= config.backtrack_factor
            if not accepted:
                termination = "line_search"
                break
            v = trial_v
            lin = _linearize(grid, time_grid, v, rho0.values, diffusion)
            phi, energy, misfit = trial_phi, trial_e, trial_m
            g = _gradient_values(grid, time_grid, v, lin, obs, diffusion)
            gnorm = float(np.linalg.norm(g))
            records.append(IterationRecord(it, phi, energy, misfit, gnorm, t))
            if gnorm <= config.stop_tolerance * gnorm0:
                converged = True
                termination = "gradient"
                break

    return SolveResult(
        velocity=VelocitySeries(grid, time_grid, v),
        densities=DensitySeries(grid, time_grid, lin.frames),
        diagnostics=records,
        converged=converged,
        termination=termination,
    )


def solve_baseline(
    rho0: ScalarField, rhoT_obs: ScalarField, config: SolverConfig
) -> SolveResult:
    """Classical fixed-endpoint transport baseline.

    Both densities are normalized to unit total mass, diffusion is switched
    off, and the endpoint is pinned through a large penalty weight; the same
    optimizer then runs unchanged.
    """
    if rho0.grid != rhoT_obs.grid:
        raise GridMismatchError("endpoint densities live on different grids")
    mass0 = rho0.total_mass()
    massT = rhoT_obs.total_mass()
    if mass0 <= 0 or massT <= 0:
        raise ValueError("baseline endpoints must carry positive total mass")
    start = ScalarField(rho0.grid, rho0.values / mass0)
    target = ScalarField(rho0.grid, rhoT_obs.values / massT)
    baseline_config = dataclasses.replace(config, sigma=0.0, baseline_mode=True)
    obs = ObservationSet(
        entries=[
            ObservationEntry(0, start),
            ObservationEntry(baseline_config.time_steps, target),
        ],
        alpha=config.alpha * BASELINE_ALPHA_FACTOR,
    )
    return solve(start, obs, baseline_config)


def registration_errors(result_final: ScalarField, target: ScalarField) -> tuple[float, float]:
    """Mean squared error and infinity norm between two fields on one grid."""
    if result_final.grid != target.grid:
        raise GridMismatchError("fields live on different grids")
    diff = result_final.values - target.values
    mse = float((diff * diff).mean())
    inf_norm = float(np.abs(diff).max())
    return mse, inf_norm


def rmse_between_series(a: DensitySeries, b: DensitySeries) -> np.ndarray:
    """Per-step root mean square difference for steps 1..m."""
    if a.grid != b.grid:
        raise GridMismatchError("series live on different grids")
    if a.time_grid.steps != b.time_grid.steps:
        raise ValueError("series have different step counts")
    diff = a.values[1:] - b.values[1:]
    return np.sqrt((diff * diff).mean(axis=1))
