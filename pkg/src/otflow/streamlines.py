"""Streamline tracing through a recovered velocity trajectory.

The velocity is piecewise constant in time over each solver interval and
multilinearly interpolated in space. Trajectories are advanced with classical
fourth-order Runge-Kutta at a fixed time step, halting at the domain boundary,
at a stagnation point, or at the step cap. Per-voxel streamline counts give
the global pathway picture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySeedsError, OutsideDomainError
from .forward import VelocitySeries
from .grid import CellGrid, ScalarField, interpolate_components

__all__ = [
    "Streamline",
    "PathwayMap",
    "seed_points",
    "trace_streamline",
    "pathway_density",
    "STAGNATION_SPEED",
]

STAGNATION_SPEED = 1e-12


@dataclass(eq=False)
class Streamline:
    seed: np.ndarray
    points: np.ndarray  # (npoints, ndim), all inside the closed domain
    step_size: float

    def __post_init__(self):
        self.seed = np.asarray(self.seed, dtype=float)
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.step_size = float(self.step_size)


@dataclass(eq=False)
class PathwayMap:
    """Number of distinct streamlines passing through each cell."""

    grid: CellGrid
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64).ravel()
        if counts.shape != (self.grid.cell_count,):
            raise ValueError("counts length must match the grid cell count")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        self.counts = counts


def seed_points(density: ScalarField, threshold_quantile: float) -> np.ndarray:
    """Cell centers of the cells above a quantile of the positive density values.

    Ties at the quantile are included; cells with zero density never seed.
    Returns points in canonical cell order, shape (nseeds, ndim).
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {threshold_quantile}")
    vals = density.values
    if np.any(vals < 0):
        raise ValueError("density must be nonnegative")
    positive = vals[vals > 0]
    if positive.size == 0:
        raise EmptySeedsError("density has no positive cells to seed from")
    # "lower" keeps the threshold on an actual data point, so a quantile below
    # 1/count recovers the full positive support
    threshold = float(np.quantile(positive, threshold_quantile, method="lower"))
    mask = vals >= threshold
    if not mask.any():
        raise EmptySeedsError("no cell reaches the seeding threshold")
    return density.grid.cell_centers()[mask]


def _sample_clamped(grid: CellGrid, components: np.ndarray, point: np.ndarray) -> np.ndarray:
    pos = grid.clamp_points(point[None, :])
    return interpolate_components(grid, components, pos)[0]


def trace_streamline(
    v: VelocitySeries, seed, step_size: float, max_steps: int
) -> Streamline:
    """Integrate one trajectory of dx/dt = v(t, x) from t=0 to the horizon.

    Runge-Kutta steps never straddle an interval boundary, so each step sees a
    single frozen velocity frame. Intermediate stage positions are clamped to
    the domain for sampling; a step whose endpoint leaves the closed domain
    truncates the streamline instead.
    """
    grid = v.grid
    seed = np.asarray(seed, dtype=float)
    if not grid.contains(seed):
        raise OutsideDomainError(f"seed {seed.tolist()} is outside the domain")
    if step_size <= 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")

    points = [seed.copy()]
    x = seed.copy()
    dt = v.time_grid.dt
    tiny = dt * 1e-12
    steps_taken = 0
    for n in range(v.time_grid.steps):
        comp = v.values[n]
        remaining = dt
        while remaining > tiny and steps_taken < max_steps:
            h = min(step_size, remaining)
            k1 = _sample_clamped(grid, comp, x)
            if np.linalg.norm(k1) < STAGNATION_SPEED:
                return Streamline(seed, np.array(points), step_size)
            k2 = _sample_clamped(grid, comp, x + 0.5 * h * k1)
            k3 = _sample_clamped(grid, comp, x + 0.5 * h * k2)
            k4 = _sample_clamped(grid, comp, x + h * k3)
            y = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not grid.contains(y):
                return Streamline(seed, np.array(points), step_size)
            x = y
            points.append(x.copy())
            remaining -= h
            steps_taken += 1
        if steps_taken >= max_steps:
            break
    return Streamline(seed, np.array(points), step_size)


def pathway_density(streamlines: list[Streamline], grid: CellGrid) -> PathwayMap:
    """Count, per cell, how many streamlines visit it (each at most once)."""
    counts = np.zeros(grid.cell_count, dtype=np.int64)
    for sl in streamlines:
        cells = np.unique(grid.cells_of_points(sl.points))
        counts[cells] += 1
    return PathwayMap(grid, counts)
