import gzip
import json
import struct

import numpy as np
import pytest

from otflow import (
    BadMagicError,
    ConfigError,
    HeaderError,
    ScalarField,
    TimeGrid,
    TruncatedDataError,
    UnsupportedDatatypeError,
    VelocitySeries,
    build_grid,
)
from otflow.dataio import (
    read_config,
    read_streamlines_jsonl,
    read_synth_spec,
    read_velocity_series,
    read_volume,
    write_clusters_json,
    write_streamlines_jsonl,
    write_velocity_series,
    write_volume,
)
from otflow.bundles import quickbundles, ResampledTrack
from otflow.streamlines import Streamline

from conftest import philox


def f4(values):
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def make_volume(seed, dims, spacing):
    grid = build_grid(dims, spacing)
    vals = f4(philox(seed).standard_normal(grid.cell_count))
    return grid, ScalarField(grid, vals)


def craft_nifti_bytes(dims, spacing, payload, datatype=16, bitpix=32, magic=b"n+1\x00",
                      sizeof_hdr=348, vox_offset=352.0):
    """Byte-level fixture built directly from the header field offsets."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, sizeof_hdr)
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = [1.0] + list(spacing) + [0.0] * (7 - len(spacing))
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, vox_offset)
    struct.pack_into("<4s", hdr, 344, magic)
    return bytes(hdr) + b"\x00" * 4 + payload


class TestVolumeRoundTrip:
    @pytest.mark.parametrize("dims,spacing", [
        ([7], [0.5]), ([5, 3], [0.5, 0.25]), ([4, 3, 2], [0.5, 0.25, 1.0]),
    ])
    def test_round_trip_bit_exact(self, tmp_path, dims, spacing):
        grid, field = make_volume(sum(dims), dims, spacing)
        path = tmp_path / "vol.nii"
        write_volume(path, grid, field)
        got_grid, got = read_volume(path)
        assert got_grid == grid
        assert np.array_equal(got.values, field.values)

    def test_round_trip_gzip(self, tmp_path):
        grid, field = make_volume(9, [6, 6], [0.125, 0.125])
        path = tmp_path / "vol.nii.gz"
        write_volume(path, grid, field)
        raw = path.read_bytes()
        assert raw[:2] == b"\x1f\x8b"
        got_grid, got = read_volume(path)
        assert got_grid == grid
        assert np.array_equal(got.values, field.values)

    def test_gzip_bytes_deterministic(self, tmp_path):
        grid, field = make_volume(10, [4, 4], [0.25, 0.25])
        a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_volume(a, grid, field)
        write_volume(b, grid, field)
        assert a.read_bytes() == b.read_bytes()

    def test_header_constants(self, tmp_path):
        grid, field = make_volume(11, [4, 3, 2], [0.5, 0.25, 1.0])
        path = tmp_path / "vol.nii"
        write_volume(path, grid, field)
        raw = path.read_bytes()
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        dim = struct.unpack_from("<8h", raw, 40)
        assert dim[0] == 3 and dim[1:4] == (4, 3, 2)
        assert struct.unpack_from("<h", raw, 70)[0] == 16  # float32
        assert struct.unpack_from("<f", raw, 108)[0] == 352.0
        assert raw[344:347] == b"n+1"

    def test_pathway_counts_exact(self, tmp_path):
        grid = build_grid([8, 8], [1.0, 1.0])
        counts = philox(12).integers(0, 2**20, grid.cell_count).astype(float)
        path = tmp_path / "counts.nii"
        write_volume(path, grid, counts)
        _, got = read_volume(path)
        assert np.array_equal(got.values, counts)


class TestHandCraftedAndMalformed:
    def test_hand_crafted_2x2x2(self, tmp_path):
        values = [1.5, -2.0, 3.25, 0.0, 42.0, -0.125, 7.0, 9.5]
        payload = struct.pack("<8f", *values)
        blob = craft_nifti_bytes([2, 2, 2], [1.0, 2.0, 4.0], payload)
        path = tmp_path / "crafted.nii"
        path.write_bytes(blob)
        grid, field = read_volume(path)
        assert grid.dims == (2, 2, 2)
        assert grid.spacing == (1.0, 2.0, 4.0)
        np.testing.assert_array_equal(field.values, values)

    def test_int16_converted(self, tmp_path):
        payload = struct.pack("<4h", -3, 0, 7, 32000)
        blob = craft_nifti_bytes([4], [0.5], payload, datatype=4, bitpix=16)
        path = tmp_path / "short.nii"
        path.write_bytes(blob)
        _, field = read_volume(path)
        np.testing.assert_array_equal(field.values, [-3.0, 0.0, 7.0, 32000.0])

    def test_wrong_magic(self, tmp_path):
        blob = craft_nifti_bytes([4], [0.5], b"\x00" * 16, magic=b"abc\x00")
        path = tmp_path / "bad_magic.nii"
        path.write_bytes(blob)
        with pytest.raises(BadMagicError, match="not a single-file NIfTI-1"):
            read_volume(path)

    def test_pair_style_magic_rejected(self, tmp_path):
        blob = craft_nifti_bytes([4], [0.5], b"\x00" * 16, magic=b"ni1\x00")
        path = tmp_path / "pair.nii"
        path.write_bytes(blob)
        with pytest.raises(BadMagicError):
            read_volume(path)

    def test_short_header(self, tmp_path):
        path = tmp_path / "short.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(HeaderError, match="shorter"):
            read_volume(path)

    def test_byteswapped_header_size(self, tmp_path):
        swapped = struct.unpack("<i", struct.pack(">i", 348))[0]
        blob = craft_nifti_bytes([4], [0.5], b"\x00" * 16, sizeof_hdr=swapped)
        path = tmp_path / "swapped.nii"
        path.write_bytes(blob)
        with pytest.raises(HeaderError, match="byte order"):
            read_volume(path)

    def test_unsupported_datatype(self, tmp_path):
        blob = craft_nifti_bytes([4], [0.5], b"\x00" * 32, datatype=64, bitpix=64)
        path = tmp_path / "f64.nii"
        path.write_bytes(blob)
        with pytest.raises(UnsupportedDatatypeError, match="datatype code 64"):
            read_volume(path)

    def test_truncated_data(self, tmp_path):
        payload = struct.pack("<2f", 1.0, 2.0)  # header promises 4 values
        blob = craft_nifti_bytes([4], [0.5], payload)
        path = tmp_path / "trunc.nii"
        path.write_bytes(blob)
        with pytest.raises(TruncatedDataError, match="expected 16"):
            read_volume(path)

    def test_bad_dimensionality(self, tmp_path):
        blob = craft_nifti_bytes([2, 2, 2], [1.0, 1.0, 1.0], b"\x00" * 32)
        mutated = bytearray(blob)
        struct.pack_into("<h", mutated, 40, 5)  # dim[0] = 5
        path = tmp_path / "dim5.nii"
        path.write_bytes(bytes(mutated))
        with pytest.raises(HeaderError, match="dimensionality"):
            read_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_volume(tmp_path / "nope.nii")


class TestVelocitySeries:
    def test_file_count_and_manifest(self, tmp_path):
        grid = build_grid([4, 3], [0.25, 0.5])
        tg = TimeGrid.unit_horizon(1)
        v = VelocitySeries(grid, tg, f4(philox(13).standard_normal((1, 2, 12))))
        prefix = tmp_path / "velocity"
        write_velocity_series(prefix, v)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == [
            "velocity_manifest.json", "velocity_t0_c0.nii", "velocity_t0_c1.nii",
        ]
        manifest = json.loads((tmp_path / "velocity_manifest.json").read_text())
        assert manifest["time_steps"] * manifest["dt"] == pytest.approx(1.0, abs=1e-12)
        assert manifest["components"] == 2

    def test_round_trip(self, tmp_path):
        grid = build_grid([5, 4], [0.5, 0.25])
        tg = TimeGrid.unit_horizon(3)
        v = VelocitySeries(grid, tg, f4(philox(14).standard_normal((3, 2, 20))))
        prefix = tmp_path / "velocity"
        write_velocity_series(prefix, v)
        got = read_velocity_series(prefix)
        assert got.grid == grid
        assert got.time_grid == tg
        assert np.array_equal(got.values, v.values)


class TestStreamlineAndClusterFiles:
    def test_streamlines_jsonl_round_trip(self, tmp_path):
        rng = philox(15)
        lines = [
            Streamline(pts[0], pts, 0.01)
            for pts in (rng.uniform(0, 1, (int(rng.integers(1, 9)), 2)) for _ in range(5))
        ]
        path = tmp_path / "streamlines.jsonl"
        write_streamlines_jsonl(path, lines)
        got = read_streamlines_jsonl(path)
        assert len(got) == len(lines)
        for a, b in zip(got, lines):
            assert np.array_equal(a.points, b.points)
            assert a.step_size == b.step_size

    def test_clusters_json_shape(self, tmp_path):
        xs = np.linspace(0, 1, 12)
        tracks = [
            ResampledTrack(np.stack([xs, np.full(12, y)], axis=1))
            for y in (0.0, 0.01, 5.0)
        ]
        cs = quickbundles(tracks, 0.5)
        path = tmp_path / "clusters.json"
        write_clusters_json(path, cs)
        doc = json.loads(path.read_text())
        assert doc["threshold"] == 0.5
        assert [c["member_ids"] for c in doc["clusters"]] == [[0, 1], [2]]
        assert len(doc["clusters"][0]["centroid"]) == 12


MINIMAL_CONFIG = {
    "output_dir": "out",
    "observations": [
        {"time_index": 0, "path": "rho0.nii"},
        {"time_index": 4, "path": "rhoT.nii"},
    ],
}


class TestRunConfig:
    def test_minimal_config_gets_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(MINIMAL_CONFIG))
        cfg = read_config(path)
        assert cfg.time_steps == 4
        assert cfg.seed_quantile == 0.9
        assert cfg.qb_points == 12
        assert cfg.alpha == 1.0
        assert cfg.streamline_step is None

    def test_type_error_names_key(self, tmp_path):
        doc = dict(MINIMAL_CONFIG, alpha="high")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="'alpha'"):
            read_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        doc = dict(MINIMAL_CONFIG, alhpa=2.0)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="'alhpa'"):
            read_config(path)

    def test_unknown_observation_key_names_path(self, tmp_path):
        doc = json.loads(json.dumps(MINIMAL_CONFIG))
        doc["observations"][1]["wieght"] = 2.0
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match=r"observations\[1\]"):
            read_config(path)

    def test_requires_initial_observation(self, tmp_path):
        doc = {"output_dir": "out",
               "observations": [{"time_index": 4, "path": "rhoT.nii"}]}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="time_index 0"):
            read_config(path)

    def test_observation_index_within_horizon(self, tmp_path):
        doc = dict(MINIMAL_CONFIG, time_steps=2)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="exceeds time_steps"):
            read_config(path)

    def test_resolved_dump_idempotent(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(dict(MINIMAL_CONFIG, sigma=0.02, qb_threshold=0.3)))
        cfg = read_config(path)
        resolved = tmp_path / "resolved.json"
        resolved.write_text(cfg.to_json())
        again = read_config(resolved)
        assert again == cfg
        assert again.to_json() == cfg.to_json()

    def test_bool_not_accepted_as_number(self, tmp_path):
        doc = dict(MINIMAL_CONFIG, alpha=True)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="'alpha'"):
            read_config(path)

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            read_config(path)


class TestSynthSpecFile:
    def test_read_spec(self, tmp_path):
        doc = {
            "dims": [16, 16], "spacing": [0.0625, 0.0625],
            "blobs": [{"center": [0.4, 0.5], "width": 0.1, "mass": 2.0}],
            "velocity": {"kind": "constant", "value": [0.1, 0.0]},
            "noise_std": 0.01, "rng_seed": 5,
        }
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(doc))
        spec = read_synth_spec(path)
        assert spec.total_mass() == 2.0
        assert spec.velocity.kind == "constant"
        assert spec.observe_times == (0.0, 1.0)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"dims": [4], "spacing": [1.0], "blobs": [],
                                    "velocity": {"kind": "constant", "value": [0.0]},
                                    "bogus": 1}))
        with pytest.raises(ConfigError, match="'bogus'"):
            read_synth_spec(path)

    def test_missing_velocity(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"dims": [4], "spacing": [1.0],
                                    "blobs": [{"center": [2.0], "width": 1.0, "mass": 1.0}]}))
        with pytest.raises(ConfigError, match="'velocity'"):
            read_synth_spec(path)
