"""Command-line pipeline: synth -> solve -> fpa -> compare.

`solve` recovers the velocity trajectory and clean densities from observed
volumes; `fpa` turns a solve's outputs into streamlines, a pathway volume,
and streamline clusters; `synth` writes synthetic ground truth plus noisy
observations; `compare` reports registration errors between volumes or
density series. Every subcommand validates its inputs under --dry-run
without computing, and all outputs are byte-deterministic.

Exit codes: 0 success, 1 input/validation/runtime failure, 2 solve finished
without reaching its convergence tolerance (outputs still written).
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

import numpy as np

from .bundles import cluster_label_volume, quickbundles, resample_track, significant_clusters
from .dataio import (
    RunConfig,
    read_config,
    read_synth_spec,
    read_velocity_series,
    read_volume,
    write_clusters_json,
    write_streamlines_jsonl,
    write_velocity_series,
    write_volume,
)
from .errors import GridMismatchError, OTFlowError
from .forward import DensitySeries, TimeGrid
from .solver import (
    ObservationEntry,
    ObservationSet,
    registration_errors,
    rmse_between_series,
    solve,
    solve_baseline,
)
from .streamlines import pathway_density, seed_points, trace_streamline
from .synth import add_noise, true_density

__all__ = ["main"]


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _load_observations(cfg: RunConfig):
    grid = None
    fields = {}
    for ref in cfg.observations:
        g, field = read_volume(ref.path)
        if grid is None:
            grid = g
        elif g != grid:
            raise GridMismatchError(
                f"{ref.path} has grid {g.dims}, expected {grid.dims}"
            )
        weight = np.full(grid.cell_count, ref.weight)
        fields[ref.time_index] = (field, weight)
    return grid, fields


def cmd_solve(args) -> int:
    cfg = read_config(args.config)
    out = Path(cfg.output_dir)
    if args.dry_run:
        print(cfg.to_json(), end="")
        print(f"plan: read {len(cfg.observations)} observation volumes, "
              f"write clean_t0..clean_t{cfg.time_steps}.nii, velocity series, "
              f"diagnostics.csv and resolved_config.json under {out}")
        for ref in cfg.observations:
            if not Path(ref.path).exists():
                return _fail(f"observation volume not found: {ref.path}")
        return 0
    grid, fields = _load_observations(cfg)
    rho0 = fields[0][0]
    solver_config = cfg.solver_config()
    if cfg.baseline_mode:
        final_index = max(fields)
        result = solve_baseline(rho0, fields[final_index][0], solver_config)
    else:
        entries = [
            ObservationEntry(idx, field, weight)
            for idx, (field, weight) in sorted(fields.items())
        ]
        obs = ObservationSet(entries, alpha=cfg.alpha)
        result = solve(rho0, obs, solver_config)

    out.mkdir(parents=True, exist_ok=True)
    for n in range(cfg.time_steps + 1):
        write_volume(out / f"clean_t{n}.nii", grid, result.densities.values[n])
    write_velocity_series(out / "velocity", result.velocity)
    (out / "diagnostics.csv").write_text(result.diagnostics_csv())
    (out / "resolved_config.json").write_text(cfg.to_json())
    if args.verbose:
        last = result.diagnostics[-1]
        print(f"solve: {len(result.diagnostics) - 1} iterations, "
              f"phi={last.phi:.6e}, termination={result.termination}")
    return 0 if result.converged else 2


def cmd_fpa(args) -> int:
    cfg = read_config(args.config)
    out = Path(cfg.output_dir)
    step = cfg.streamline_step
    threshold = cfg.qb_threshold
    if args.dry_run:
        print(cfg.to_json(), end="")
        print(f"plan: read solve outputs under {out}, write streamlines.jsonl, "
              "pathways.nii, clusters.json and cluster_labels.nii")
        for name in ("clean_t0.nii", "velocity_manifest.json"):
            if not (out / name).exists():
                return _fail(f"solve output not found: {out / name}")
        return 0
    stage = "load"
    try:
        velocity = read_velocity_series(out / "velocity")
        grid, rho0 = read_volume(out / "clean_t0.nii")
        if grid != velocity.grid:
            raise GridMismatchError("clean_t0.nii and velocity series grids differ")
        if step is None:
            step = grid.min_spacing / 2.0
        if threshold is None:
            threshold = 4.0 * grid.min_spacing

        stage = "seed"
        seeds = seed_points(rho0, cfg.seed_quantile)

        stage = "trace"
        lines = [
            trace_streamline(velocity, seed, step, cfg.max_streamline_steps)
            for seed in seeds
        ]
        write_streamlines_jsonl(out / "streamlines.jsonl", lines)

        stage = "pathways"
        pathways = pathway_density(lines, grid)
        write_volume(out / "pathways.nii", grid, pathways.counts.astype(float))

        stage = "cluster"
        tracks = [resample_track(sl, cfg.qb_points) for sl in lines]
        clusters = significant_clusters(
            quickbundles(tracks, threshold), cfg.min_cluster_size
        )
        write_clusters_json(out / "clusters.json", clusters)
        labels = cluster_label_volume(clusters, grid)
        write_volume(out / "cluster_labels.nii", grid, labels.astype(float))
    except (OTFlowError, OSError) as exc:
        print(f"error in stage '{stage}': {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        print(f"fpa: {len(lines)} streamlines, {len(clusters.clusters)} significant clusters")
    return 0


def cmd_synth(args) -> int:
    spec = read_synth_spec(args.spec)
    out = Path(args.out)
    if args.dry_run:
        for i, t in enumerate(spec.observe_times):
            print(f"plan: write truth_t{i}.nii and obs_t{i}.nii for time {t} under {out}")
        print(f"plan: write truth_manifest.json under {out}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    grid = spec.grid
    volumes = []
    for i, t in enumerate(spec.observe_times):
        truth = true_density(spec, t)
        noise_seed = spec.rng_seed + i
        observed = add_noise(truth, spec.noise_std, noise_seed)
        write_volume(out / f"truth_t{i}.nii", grid, truth)
        write_volume(out / f"obs_t{i}.nii", grid, observed)
        volumes.append(
            {
                "time": t,
                "truth": f"truth_t{i}.nii",
                "observed": f"obs_t{i}.nii",
                "noise_seed": noise_seed,
            }
        )
    from .dataio import _json_dump  # deterministic dump shared with other writers

    manifest = {
        "total_mass": spec.total_mass(),
        "noise_std": spec.noise_std,
        "rng_seed": spec.rng_seed,
        "volumes": volumes,
    }
    (out / "truth_manifest.json").write_text(_json_dump(manifest))
    if args.verbose:
        print(f"synth: wrote {2 * len(volumes)} volumes under {out}")
    return 0


_CLEAN_RE = re.compile(r"clean_t(\d+)\.nii$")


def _read_series_dir(path: Path) -> DensitySeries:
    frames = {}
    grid = None
    for f in sorted(path.iterdir()):
        match = _CLEAN_RE.match(f.name)
        if not match:
            continue
        g, field = read_volume(f)
        if grid is None:
            grid = g
        elif g != grid:
            raise GridMismatchError(f"{f} grid differs from the rest of the series")
        frames[int(match.group(1))] = field.values
    if len(frames) < 2 or sorted(frames) != list(range(len(frames))):
        raise OTFlowError(f"{path} does not hold a contiguous clean_t*.nii series")
    values = np.stack([frames[n] for n in range(len(frames))])
    return DensitySeries(grid, TimeGrid.unit_horizon(len(frames) - 1), values)


def cmd_compare(args) -> int:
    result_path = Path(args.result)
    target_path = Path(args.target)
    if args.dry_run:
        for p in (result_path, target_path):
            if not p.exists():
                return _fail(f"input not found: {p}")
        print(f"plan: compare {result_path} against {target_path}")
        return 0
    rows = []  # (label, metric, step, value)
    if result_path.is_dir() and target_path.is_dir():
        series_a = _read_series_dir(result_path)
        series_b = _read_series_dir(target_path)
        for n, value in enumerate(rmse_between_series(series_a, series_b), start=1):
            rows.append(("result", "rmse", str(n), float(value)))
        final_a = series_a.frame(series_a.time_grid.steps)
        final_b = series_b.frame(series_b.time_grid.steps)
    else:
        _, final_a = read_volume(result_path)
        _, final_b = read_volume(target_path)
    mse, inf_norm = registration_errors(final_a, final_b)
    rows.append(("result", "mse", "", mse))
    rows.append(("result", "inf_norm", "", inf_norm))

    if args.baseline:
        if not args.config:
            return _fail("--baseline needs --config to locate the observations")
        cfg = read_config(args.config)
        _, fields = _load_observations(cfg)
        rho0 = fields[0][0]
        target_obs = fields[max(fields)][0]
        baseline = solve_baseline(rho0, target_obs, cfg.solver_config())
        final = baseline.densities.frame(baseline.densities.time_grid.steps)
        b_mse, b_inf = registration_errors(final, final_b)
        rows.append(("baseline", "mse", "", b_mse))
        rows.append(("baseline", "inf_norm", "", b_inf))

    lines = ["label,metric,step,value"]
    for label, metric, step, value in rows:
        lines.append(f"{label},{metric},{step},{value!r}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if args.csv:
        Path(args.csv).write_text(report)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dry-run", action="store_true",
                        help="validate inputs and print the plan without computing")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (results are independent of this)")
    common.add_argument("--verbose", action="store_true", help="chatty progress output")

    parser = argparse.ArgumentParser(
        prog="otflow",
        description="Recover flow between density volumes and map its pathways.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", parents=[common],
                             help="recover velocity and clean densities")
    p_solve.add_argument("--config", required=True, help="run configuration JSON")
    p_solve.set_defaults(func=cmd_solve)

    p_fpa = sub.add_parser("fpa", parents=[common],
                           help="streamlines, pathways and clusters from a solve")
    p_fpa.add_argument("--config", required=True, help="run configuration JSON")
    p_fpa.set_defaults(func=cmd_fpa)

    p_synth = sub.add_parser("synth", parents=[common],
                             help="generate synthetic truth and observations")
    p_synth.add_argument("spec", help="synthetic spec JSON")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=cmd_synth)

    p_cmp = sub.add_parser("compare", parents=[common],
                           help="registration errors between volumes or series")
    p_cmp.add_argument("result", help="volume or clean-series directory")
    p_cmp.add_argument("target", help="volume or clean-series directory")
    p_cmp.add_argument("--csv", default=None, help="also write the report here")
    p_cmp.add_argument("--baseline", action="store_true",
                       help="rerun the fixed-endpoint baseline and report it alongside")
    p_cmp.add_argument("--config", default=None, help="configuration for --baseline")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _apply_thread_cap(args.threads)
    try:
        return args.func(args)
    except (OTFlowError, OSError, ValueError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
