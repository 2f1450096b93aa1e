"""File formats: NIfTI-1 volumes, JSON configs and manifests, JSON-lines
streamlines, cluster JSON, and CSV diagnostics.

The volume format is a minimal single-file NIfTI-1 subset: 348-byte
little-endian header, magic "n+1", data at offset 352, float32 payload in
canonical cell order (axis 0 fastest, matching the format's own layout).
Readers also accept int16 payloads (converted to float) and gzip-compressed
files. All writers are deterministic: identical inputs produce identical
bytes, and gzip streams carry no timestamp.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    GridMismatchError,
    HeaderError,
    TruncatedDataError,
    UnsupportedDatatypeError,
)
from .forward import TimeGrid, VelocitySeries
from .grid import CellGrid, ScalarField
from .solver import SolverConfig
from .streamlines import Streamline
from .synth import Blob, SynthSpec, VelocityModel

__all__ = [
    "read_volume",
    "write_volume",
    "write_velocity_series",
    "read_velocity_series",
    "write_streamlines_jsonl",
    "read_streamlines_jsonl",
    "write_clusters_json",
    "ObservationRef",
    "RunConfig",
    "read_config",
    "read_synth_spec",
]

# NIfTI-1 header layout (348 bytes, little-endian), offsets per the standard.
_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),      # 0; must be 348
        ("data_type", "S10"),       # 4; unused
        ("db_name", "S18"),         # 14; unused
        ("extents", "<i4"),         # 32; unused
        ("session_error", "<i2"),   # 36; unused
        ("regular", "S1"),          # 38; unused
        ("dim_info", "u1"),         # 39
        ("dim", "<i2", (8,)),       # 40; dim[0] = ndim, dim[1..] = sizes
        ("intent_p1", "<f4"),       # 56
        ("intent_p2", "<f4"),       # 60
        ("intent_p3", "<f4"),       # 64
        ("intent_code", "<i2"),     # 68
        ("datatype", "<i2"),        # 70; 16 = float32, 4 = int16
        ("bitpix", "<i2"),          # 72
        ("slice_start", "<i2"),     # 74
        ("pixdim", "<f4", (8,)),    # 76; pixdim[1..] = spacings
        ("vox_offset", "<f4"),      # 108; byte offset of the data section
        ("scl_slope", "<f4"),       # 112
        ("scl_inter", "<f4"),       # 116
        ("slice_end", "<i2"),       # 120
        ("slice_code", "u1"),       # 122
        ("xyzt_units", "u1"),       # 123
        ("cal_max", "<f4"),         # 124
        ("cal_min", "<f4"),         # 128
        ("slice_duration", "<f4"),  # 132
        ("toffset", "<f4"),         # 136
        ("glmax", "<i4"),           # 140
        ("glmin", "<i4"),           # 144
        ("descrip", "S80"),         # 148
        ("aux_file", "S24"),        # 228
        ("qform_code", "<i2"),      # 252
        ("sform_code", "<i2"),      # 254
        ("quatern_b", "<f4"),       # 256
        ("quatern_c", "<f4"),       # 260
        ("quatern_d", "<f4"),       # 264
        ("qoffset_x", "<f4"),       # 268
        ("qoffset_y", "<f4"),       # 272
        ("qoffset_z", "<f4"),       # 276
        ("srow_x", "<f4", (4,)),    # 280
        ("srow_y", "<f4", (4,)),    # 296
        ("srow_z", "<f4", (4,)),    # 312
        ("intent_name", "S16"),     # 328
        ("magic", "S4"),            # 344; "n+1\0" for single-file volumes
    ]
)
assert _HEADER_DTYPE.itemsize == 348

_HEADER_SIZE = 348
_DATA_OFFSET = 352
_DT_FLOAT32 = 16
_DT_INT16 = 4


def _read_bytes(path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def _write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        buf = io.BytesIO()
        # mtime=0 and an empty name keep the stream byte-deterministic
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as zf:
            zf.write(blob)
        blob = buf.getvalue()
    path.write_bytes(blob)


def write_volume(path, grid: CellGrid, field) -> None:
    """Write a scalar field as a single-file NIfTI-1 float32 volume."""
    values = field.values if isinstance(field, ScalarField) else np.asarray(field)
    values = np.asarray(values, dtype=float).ravel()
    if values.shape != (grid.cell_count,):
        raise ValueError("field length does not match the grid")
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = _HEADER_SIZE
    dim = np.ones(8, dtype=np.int16)
    dim[0] = grid.ndim
    dim[1 : 1 + grid.ndim] = grid.dims
    hdr["dim"] = dim
    hdr["datatype"] = _DT_FLOAT32
    hdr["bitpix"] = 32
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1 : 1 + grid.ndim] = grid.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = float(_DATA_OFFSET)
    hdr["scl_slope"] = 1.0
    # identity orientation: scaled diagonal affine, origin at zero
    hdr["sform_code"] = 1
    srow = np.zeros((3, 4), dtype=np.float32)
    for k in range(3):
        srow[k, k] = grid.spacing[k] if k < grid.ndim else 1.0
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = srow
    hdr["magic"] = b"n+1"
    payload = values.astype("<f4").tobytes()
    _write_bytes(path, hdr.tobytes() + b"\x00\x00\x00\x00" + payload)


def read_volume(path) -> tuple[CellGrid, ScalarField]:
    """Read a single-file NIfTI-1 volume (optionally gzipped)."""
    raw = _read_bytes(path)
    if len(raw) < _HEADER_SIZE:
        raise HeaderError(
            f"{path}: file holds {len(raw)} bytes, shorter than a NIfTI-1 header"
        )
    hdr = np.frombuffer(raw[:_HEADER_SIZE], dtype=_HEADER_DTYPE)[0]
    magic = bytes(hdr["magic"])
    if magic != b"n+1":
        raise BadMagicError(f"{path}: not a single-file NIfTI-1 volume (magic {magic!r})")
    if int(hdr["sizeof_hdr"]) != _HEADER_SIZE:
        raise HeaderError(
            f"{path}: header size field is {int(hdr['sizeof_hdr'])}; "
            "corrupt file or unsupported byte order"
        )
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 3:
        raise HeaderError(f"{path}: unsupported dimensionality {ndim}")
    dims = tuple(int(x) for x in hdr["dim"][1 : 1 + ndim])
    if any(n < 1 for n in dims):
        raise HeaderError(f"{path}: nonpositive dimension in {dims}")
    spacing = tuple(float(x) for x in hdr["pixdim"][1 : 1 + ndim])
    if any(not np.isfinite(h) or h <= 0 for h in spacing):
        raise HeaderError(f"{path}: nonpositive voxel spacing in {spacing}")
    code = int(hdr["datatype"])
    if code == _DT_FLOAT32:
        dtype = np.dtype("<f4")
    elif code == _DT_INT16:
        dtype = np.dtype("<i2")
    else:
        raise UnsupportedDatatypeError(
            f"{path}: datatype code {code}; only float32 (16) and int16 (4) are supported"
        )
    offset = int(round(float(hdr["vox_offset"])))
    if offset < _HEADER_SIZE:
        raise HeaderError(f"{path}: data offset {offset} overlaps the header")
    grid = CellGrid(dims, spacing)
    need = grid.cell_count * dtype.itemsize
    data = raw[offset : offset + need]
    if len(data) < need:
        raise TruncatedDataError(
            f"{path}: data section holds {len(data)} bytes, expected {need}"
        )
    values = np.frombuffer(data, dtype=dtype).astype(np.float64)
    return grid, ScalarField(grid, values)


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_velocity_series(path_prefix, v: VelocitySeries) -> None:
    """One volume per component per interval plus a JSON manifest.

    Files are named <prefix>_t<n>_c<k>.nii; the manifest records the grid and
    time discretization needed to reassemble the series.
    """
    prefix = Path(path_prefix)
    grid = v.grid
    for n in range(v.time_grid.steps):
        for k in range(grid.ndim):
            write_volume(f"{prefix}_t{n}_c{k}.nii", grid, v.values[n, k])
    manifest = {
        "time_steps": v.time_grid.steps,
        "dt": v.time_grid.dt,
        "components": grid.ndim,
        "dims": list(grid.dims),
        # volumes carry float32 pixdim, so the manifest records the same precision
        "spacing": [float(np.float32(h)) for h in grid.spacing],
    }
    Path(f"{prefix}_manifest.json").write_text(_json_dump(manifest))


def read_velocity_series(path_prefix) -> VelocitySeries:
    prefix = Path(path_prefix)
    manifest = json.loads(Path(f"{prefix}_manifest.json").read_text())
    grid = CellGrid(tuple(manifest["dims"]), tuple(manifest["spacing"]))
    time_grid = TimeGrid(int(manifest["time_steps"]), float(manifest["dt"]))
    values = np.empty((time_grid.steps, grid.ndim, grid.cell_count))
    for n in range(time_grid.steps):
        for k in range(grid.ndim):
            file_grid, comp = read_volume(f"{prefix}_t{n}_c{k}.nii")
            if file_grid != grid:
                raise GridMismatchError(
                    f"{prefix}_t{n}_c{k}.nii does not match the manifest grid"
                )
            values[n, k] = comp.values
    return VelocitySeries(grid, time_grid, values)


def write_streamlines_jsonl(path, streamlines: list[Streamline]) -> None:
    """One streamline per line: seed, step size, and the point array."""
    lines = []
    for sl in streamlines:
        lines.append(
            json.dumps(
                {
                    "seed": sl.seed.tolist(),
                    "step_size": sl.step_size,
                    "points": sl.points.tolist(),
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_streamlines_jsonl(path) -> list[Streamline]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(Streamline(rec["seed"], rec["points"], rec["step_size"]))
    return out


def write_clusters_json(path, cluster_set) -> None:
    payload = {
        "threshold": cluster_set.threshold,
        "clusters": [
            {
                "centroid": c.centroid.points.tolist(),
                "member_ids": list(c.member_ids),
            }
            for c in cluster_set.clusters
        ],
    }
    Path(path).write_text(_json_dump(payload))


# ---------------------------------------------------------------------------
# Run configuration

@dataclass(frozen=True)
class ObservationRef:
    time_index: int
    path: str
    weight: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """Validated pipeline configuration (solver knobs plus FPA parameters)."""

    output_dir: str
    observations: tuple[ObservationRef, ...]
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
    seed_quantile: float = 0.9
    streamline_step: float | None = None  # default: min spacing / 2, set at run time
    max_streamline_steps: int = 10000
    qb_points: int = 12
    qb_threshold: float | None = None  # default: 4 * min spacing, set at run time
    min_cluster_size: int = 5

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            sigma=self.sigma,
            alpha=self.alpha,
            time_steps=self.time_steps,
            max_gn_iters=self.max_gn_iters,
            gn_cg_tolerance=self.gn_cg_tolerance,
            gn_cg_max_iters=self.gn_cg_max_iters,
            armijo_c=self.armijo_c,
            backtrack_factor=self.backtrack_factor,
            max_backtracks=self.max_backtracks,
            stop_tolerance=self.stop_tolerance,
            baseline_mode=self.baseline_mode,
        )

    def to_json(self) -> str:
        doc = {
            "output_dir": self.output_dir,
            "observations": [
                {"time_index": o.time_index, "path": o.path, "weight": o.weight}
                for o in self.observations
            ],
        }
        for key in _SCALAR_KEYS:
            doc[key] = getattr(self, key)
        return _json_dump(doc)


# key -> (expected types, default); required keys carry no default
_SCALAR_KEYS = {
    "sigma": ((int, float), 0.0),
    "alpha": ((int, float), 1.0),
    "time_steps": (int, 4),
    "max_gn_iters": (int, 50),
    "gn_cg_tolerance": ((int, float), 1e-2),
    "gn_cg_max_iters": (int, 50),
    "armijo_c": ((int, float), 1e-4),
    "backtrack_factor": ((int, float), 0.5),
    "max_backtracks": (int, 25),
    "stop_tolerance": ((int, float), 1e-6),
    "baseline_mode": (bool, False),
    "seed_quantile": ((int, float), 0.9),
    "streamline_step": ((int, float, type(None)), None),
    "max_streamline_steps": (int, 10000),
    "qb_points": (int, 12),
    "qb_threshold": ((int, float, type(None)), None),
    "min_cluster_size": (int, 5),
}


def _typecheck(value, types, key: str):
    if not isinstance(types, tuple):
        types = (types,)
    # bool is an int subclass; only accept it where bool is explicitly listed
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"key {key!r} has wrong type (expected {_typenames(types)})", key)
    if not isinstance(value, types):
        raise ConfigError(f"key {key!r} has wrong type (expected {_typenames(types)})", key)
    return value


def _typenames(types) -> str:
    return "/".join("null" if t is type(None) else t.__name__ for t in types)


def _load_json_object(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: {what} must be a JSON object")
    return doc


def read_config(path) -> RunConfig:
    """Read and fully validate a run configuration.

    Missing optional keys get their documented defaults; unknown keys and type
    mismatches are rejected with the offending key path.
    """
    doc = _load_json_object(path, "run configuration")
    known = set(_SCALAR_KEYS) | {"output_dir", "observations"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", key)
    if "output_dir" not in doc:
        raise ConfigError("missing required key 'output_dir'", "output_dir")
    output_dir = _typecheck(doc["output_dir"], str, "output_dir")
    if "observations" not in doc:
        raise ConfigError("missing required key 'observations'", "observations")
    entries = doc["observations"]
    if not isinstance(entries, list) or not entries:
        raise ConfigError("'observations' must be a nonempty list", "observations")

    refs = []
    for i, entry in enumerate(entries):
        where = f"observations[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where} must be an object", where)
        for key in entry:
            if key not in ("time_index", "path", "weight"):
                raise ConfigError(f"unknown key {where}.{key!r}", f"{where}.{key}")
        if "time_index" not in entry or "path" not in entry:
            raise ConfigError(f"{where} needs 'time_index' and 'path'", where)
        idx = _typecheck(entry["time_index"], int, f"{where}.time_index")
        p = _typecheck(entry["path"], str, f"{where}.path")
        w = _typecheck(entry.get("weight", 1.0), (int, float), f"{where}.weight")
        if w <= 0:
            raise ConfigError(f"{where}.weight must be positive", f"{where}.weight")
        refs.append(ObservationRef(idx, p, float(w)))

    indices = [r.time_index for r in refs]
    if len(set(indices)) != len(indices):
        raise ConfigError(f"duplicate observation time indices {indices}", "observations")
    if 0 not in indices:
        raise ConfigError("an observation at time_index 0 is required", "observations")
    if max(indices) < 1:
        raise ConfigError("need at least one observation after time_index 0", "observations")

    kwargs = {}
    for key, (types, default) in _SCALAR_KEYS.items():
        value = _typecheck(doc.get(key, default), types, key)
        kwargs[key] = value
    cfg = RunConfig(
        output_dir=output_dir,
        observations=tuple(sorted(refs, key=lambda r: r.time_index)),
        **kwargs,
    )
    if max(indices) > cfg.time_steps:
        raise ConfigError(
            f"observation time_index {max(indices)} exceeds time_steps={cfg.time_steps}",
            "observations",
        )
    cfg.solver_config()  # validates the solver knobs, raising ValueError on bad values
    return cfg


def read_synth_spec(path) -> SynthSpec:
    """Read a synthetic-instance description from JSON."""
    doc = _load_json_object(path, "synthetic spec")
    known = {
        "dims", "spacing", "blobs", "velocity",
        "sigma_true", "noise_std", "rng_seed", "observe_times",
    }
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", key)
    for key in ("dims", "spacing", "blobs", "velocity"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}", key)
    blobs = []
    for i, b in enumerate(doc["blobs"]):
        where = f"blobs[{i}]"
        if not isinstance(b, dict):
            raise ConfigError(f"{where} must be an object", where)
        try:
            blobs.append(Blob(tuple(b["center"]), float(b["width"]), float(b["mass"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}", where) from exc
    vel = doc["velocity"]
    if not isinstance(vel, dict) or "kind" not in vel:
        raise ConfigError("'velocity' must be an object with a 'kind'", "velocity")
    try:
        model = VelocityModel(
            kind=vel["kind"],
            value=tuple(vel["value"]) if "value" in vel else None,
            center=tuple(vel["center"]) if "center" in vel else None,
            rate=float(vel.get("rate", 0.0)),
        )
        return SynthSpec(
            dims=tuple(doc["dims"]),
            spacing=tuple(doc["spacing"]),
            blobs=tuple(blobs),
            velocity=model,
            sigma_true=float(doc.get("sigma_true", 0.0)),
            noise_std=float(doc.get("noise_std", 0.0)),
            rng_seed=int(doc.get("rng_seed", 0)),
            observe_times=tuple(doc.get("observe_times", (0.0, 1.0))),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
