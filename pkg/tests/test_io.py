import gzip
import json
import math
import os
import struct

import numpy as np
import pytest

from volseg import checkpoint
from volseg.checkpoint import CheckpointError
from volseg.config import ConfigError, RunConfig, load_run_config, parse_run_config
from volseg.metrics import MetricReport, binary_metrics, surface
from volseg.network import init_params, preset, scale_width
from volseg.nifti import (
    BadMagicError,
    NiftiError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    encode_nifti,
    read_nifti,
    write_nifti,
)
from volseg.preprocess import normalize_intensity
from volseg.synthetic import SynthConfig, generate_synthetic_dataset
from volseg.tensor import Volume

from oracles import surface_points


# --- NIfTI --------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_float_roundtrip_bitwise(tmp_path, rng, suffix):
    data = rng.standard_normal((3, 7, 5, 4)).astype(np.float32)
    data[0, 0, 0, 0] = -0.0
    path = tmp_path / f"v{suffix}"
    write_nifti(Volume(data, (0.9, 1.2, 3.0)), path)
    vol = read_nifti(path)
    assert vol.data.dtype == np.float32
    assert vol.data.tobytes() == data.tobytes()
    assert vol.spacing == pytest.approx((0.9, 1.2, 3.0))


def test_nifti_int_types_preserved(tmp_path, rng):
    labels = rng.integers(-300, 300, (6, 5, 4)).astype(np.int16)
    write_nifti(Volume(labels), tmp_path / "l.nii")
    out = read_nifti(tmp_path / "l.nii").data
    assert out.dtype == np.int16 and np.array_equal(out[0], labels)
    mask = rng.random((4, 4, 4)) > 0.5
    write_nifti(Volume(mask), tmp_path / "m.nii")
    out = read_nifti(tmp_path / "m.nii").data
    assert out.dtype == np.uint8 and np.array_equal(out[0], mask)


def test_nifti_is_fortran_ordered(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
    raw = encode_nifti(Volume(data))
    body = np.frombuffer(raw[352:], "<f4")
    assert body[:3].tolist() == [data[0, 0, 0, 0], data[0, 1, 0, 0], data[0, 0, 1, 0]]


def test_nifti_deterministic_gzip(tmp_path, rng):
    v = Volume(rng.standard_normal((5, 5, 5)).astype(np.float32))
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def header_with(raw, offset, fmt, value):
    b = bytearray(raw)
    struct.pack_into(fmt, b, offset, value)
    return bytes(b)


def test_nifti_errors(tmp_path):
    raw = encode_nifti(Volume(np.zeros((1, 3, 3, 3), np.float32)))
    cases = {
        "magic.nii": (raw[:344] + b"ni1\x00" + raw[348:], BadMagicError),
        "dtype.nii": (header_with(raw, 70, "<h", 64), UnsupportedDatatypeError),
        "short.nii": (raw[:-10], TruncatedFileError),
        "header.nii": (raw[:200], TruncatedFileError),
        "dims.nii": (header_with(raw, 40, "<h", 6), NiftiError),
        "zip.nii.gz": (gzip.compress(raw)[:-20], TruncatedFileError),
    }
    for name, (buf, err) in cases.items():
        (tmp_path / name).write_bytes(buf)
        with pytest.raises(err):
            read_nifti(tmp_path / name)
    assert not issubclass(BadMagicError, UnsupportedDatatypeError)
    with pytest.raises(UnsupportedDatatypeError):
        encode_nifti(Volume(np.zeros((2, 2, 2), np.complex64)))


def test_nifti_scaling_applied(tmp_path):
    raw = encode_nifti(Volume(np.full((2, 2, 2), 3, np.int16)))
    raw = header_with(header_with(raw, 112, "<f", 0.5), 116, "<f", 1.0)
    (tmp_path / "s.nii").write_bytes(raw)
    assert np.all(read_nifti(tmp_path / "s.nii").data == 2.5)


# --- checkpoints --------------------------------------------------------------

@pytest.fixture
def params():
    return init_params(scale_width(preset("deepmedic", 2, 3), 0.2), seed=9)


def test_checkpoint_roundtrip_bitwise(tmp_path, params):
    rng = np.random.default_rng(0)
    for _, _, a in params.arrays():
        a[...] = rng.standard_normal(a.shape)
    path = tmp_path / "c.vmd"
    checkpoint.save(params, path, {"epoch": 3})
    loaded, meta = checkpoint.load(path)
    assert meta == {"epoch": 3} and loaded.seed == 9
    assert loaded.spec == params.spec
    for (n1, k1, a), (n2, k2, b) in zip(params.arrays(), loaded.arrays()):
        assert (n1, k1) == (n2, k2) and a.tobytes() == b.tobytes()
    checkpoint.save(loaded, tmp_path / "d.vmd", {"epoch": 3})
    assert (tmp_path / "c.vmd").read_bytes() == (tmp_path / "d.vmd").read_bytes()


def test_no_truncated_checkpoint_loads(params):
    buf = checkpoint.encode(params)
    for cut in list(range(0, 64)) + list(range(64, len(buf), 97)) + [len(buf) - 1]:
        with pytest.raises(CheckpointError):
            checkpoint.decode(buf[:cut])
    with pytest.raises(CheckpointError):
        checkpoint.decode(buf + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"XXXX" + buf[4:])


def test_checkpoint_spec_mismatch_rejected(params):
    other = init_params(scale_width(preset("deepmedic", 2, 3), 0.3), seed=9)
    header = json.dumps({"spec": params.spec.to_dict(), "seed": 9, "meta": {}}, sort_keys=True).encode()
    body = checkpoint.encode(other)
    (hlen,) = struct.unpack("<I", body[8:12])
    forged = body[:8] + struct.pack("<I", len(header)) + header + body[12 + hlen:]
    with pytest.raises(CheckpointError, match="spec"):
        checkpoint.decode(forged)


def test_crash_during_save_keeps_previous_file(tmp_path, params, monkeypatch):
    path = tmp_path / "c.vmd"
    checkpoint.save(params, path, {"epoch": 1})
    before = path.read_bytes()

    def crash(fd):
        raise OSError("disk gone")

    monkeypatch.setattr(os, "fsync", crash)
    with pytest.raises(OSError):
        checkpoint.save(params, path, {"epoch": 2})
    assert path.read_bytes() == before
    assert checkpoint.load(path)[1] == {"epoch": 1}
    assert os.listdir(tmp_path) == ["c.vmd"]


# --- run config ---------------------------------------------------------------

def full_config():
    return {
        "schema_version": 1,
        "seed": 7,
        "network": {"preset": "deepmedic", "width": 0.5, "input_channels": 2, "class_count": 3},
        "training": {"epochs": 3, "batches_per_epoch": 4, "tile": [33, 33, 33],
                     "sampler": {"fg_prob": 0.3, "out_dims": [9, 9, 9], "fg_classes": [1, 2]},
                     "optimizer": {"lr": 0.002, "momentum": 0.5}},
        "crf": {"w1": 0.1, "sigma_gamma": [1.0, 2.0], "backend": "exact"},
        "data": {"train": [{"name": "a", "channels": ["a/c0.nii", "a/c1.nii"], "label": "a/l.nii", "mask": None}],
                 "val": []},
        "output_dir": "out",
    }


def test_config_roundtrip_fixed_point():
    cfg = parse_run_config(full_config())
    once = json.loads(cfg.dumps())
    again = parse_run_config(once)
    assert again == cfg
    assert json.loads(again.dumps()) == once
    assert cfg.training.seed == 7 and cfg.training.sampler.fg_prob == 0.3
    spec = cfg.network_spec()
    assert spec.class_count == 3 and spec.input_channels == 2


def test_config_inline_spec():
    d = full_config()
    spec = scale_width(preset("deep", 1, 2), 0.3)
    d["network"] = {"spec": spec.to_dict()}
    assert parse_run_config(json.loads(parse_run_config(d).dumps())).network_spec() == spec


@pytest.mark.parametrize("change", [
    {"schema_version": 2}, {"bogus": 1}, {"seed": "x"}, {"network": {"preset": "nope"}},
    {"training": {"epochs": 1, "sampler": {"fg_prob": 2}}}, {"crf": {"iterations": 0}},
])
def test_config_rejected(change):
    d = full_config()
    d.update(change)
    with pytest.raises(ConfigError):
        parse_run_config(d)


def test_config_files_and_seed(tmp_path):
    d = full_config()
    path = tmp_path / "run.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="do not exist"):
        load_run_config(path)
    (tmp_path / "a").mkdir()
    for f in ("c0.nii", "c1.nii", "l.nii"):
        (tmp_path / "a" / f).write_bytes(b"")
    cfg = load_run_config(path, require_seed=True)
    assert cfg.resolve("a/l.nii") == str(tmp_path / "a" / "l.nii")
    del d["seed"]
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="seed"):
        load_run_config(path, require_seed=True)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(path)
    assert isinstance(RunConfig().network_spec().name, str)


# --- normalization ------------------------------------------------------------

def test_normalize_intensity(rng):
    data = rng.normal(5, 3, (2, 8, 8, 8))
    mask = rng.random((8, 8, 8)) > 0.3
    out = normalize_intensity(Volume(data), mask).data
    for ch in out:
        assert abs(ch[mask].mean()) < 1e-6 and abs(ch[mask].std() - 1) < 1e-6
        assert not ch[~mask].any()
    again = normalize_intensity(Volume(out), mask).data
    assert np.abs(again - out).max() < 1e-6
    const = normalize_intensity(Volume(np.full((1, 4, 4, 4), 7.0)), np.ones((4, 4, 4), bool)).data
    assert not const.any()
    with pytest.raises(ValueError):
        normalize_intensity(Volume(data), np.zeros((8, 8, 8), bool))


# --- metrics ------------------------------------------------------------------

def brute_hausdorff(a, b, spacing):
    pa = surface_points(a) * np.asarray(spacing)
    pb = surface_points(b) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return max(d.min(1).max(), d.min(0).max()), (d.min(1).sum() + d.min(0).sum()) / (len(pa) + len(pb))


def test_metrics_identical_and_disjoint(rng):
    m = rng.random((10, 10, 10)) > 0.6
    r = binary_metrics(m, m)
    assert r["dsc"] == 1 and r["assd"] == 0 and r["hausdorff"] == 0
    a = np.zeros((10, 10, 10), bool)
    b = a.copy()
    a[:3], b[6:] = True, True
    r = binary_metrics(a, b)
    assert r["dsc"] == 0 and r["precision"] == 0 and r["sensitivity"] == 0


def test_offset_cubes_hausdorff():
    a = np.zeros((16, 12, 12), bool)
    b = a.copy()
    a[2:7, 3:8, 3:8] = True
    b[5:10, 3:8, 3:8] = True
    r = binary_metrics(a, b)
    hd, assd = brute_hausdorff(a, b, (1, 1, 1))
    assert r["hausdorff"] == pytest.approx(3.0) and hd == pytest.approx(3.0)
    assert r["assd"] == pytest.approx(assd)
    assert r["dsc"] == pytest.approx(2 * 50 / 250)


@pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (0.5, 2.0, 1.5)])
def test_surface_distances_match_brute_force(rng, spacing):
    from scipy import ndimage
    a = ndimage.gaussian_filter(rng.standard_normal((14, 14, 14)), 2) > 0.05
    b = ndimage.gaussian_filter(rng.standard_normal((14, 14, 14)), 2) > 0.05
    r = binary_metrics(a, b, spacing)
    hd, assd = brute_hausdorff(a, b, spacing)
    assert r["hausdorff"] == pytest.approx(hd) and r["assd"] == pytest.approx(assd)
    assert r["assd"] <= r["hausdorff"]
    assert np.array_equal(np.argwhere(surface(a)), surface_points(a))


def test_metric_empty_conventions():
    e = np.zeros((5, 5, 5), bool)
    f = e.copy()
    f[2, 2, 2] = True
    r = binary_metrics(e, e)
    assert r["dsc"] == 1 and r["assd"] == 0 and r["hausdorff"] == 0
    r = binary_metrics(e, f)
    assert r["dsc"] == 0 and math.isnan(r["hausdorff"]) and math.isnan(r["assd"])
    with pytest.raises(ValueError):
        binary_metrics(e, np.zeros((5, 5, 4), bool))


def test_hausdorff_percentile(rng):
    a = np.zeros((20, 20, 20), bool)
    a[5:15, 5:15, 5:15] = True
    b = a.copy()
    b[15:18, 9, 9] = True
    assert binary_metrics(a, b)["hausdorff"] == pytest.approx(3.0)
    assert binary_metrics(a, b, hausdorff_percentile=95)["hausdorff"] < 3.0


def test_metric_report():
    rep = MetricReport()
    rep.add("a", {"dsc": 0.5, "precision": 1, "sensitivity": 0.5, "specificity": 1, "assd": 1, "hausdorff": 2})
    rep.add("b", {"dsc": 1.0, "precision": 1, "sensitivity": 1, "specificity": 1, "assd": math.nan,
                  "hausdorff": math.nan})
    s = rep.summary()
    assert s["dsc"] == {"mean": 0.75, "std": 0.25}
    assert s["hausdorff"]["mean"] == 2
    assert len(rep.lines()) == 5
    assert json.loads(json.dumps(rep.to_dict()))["cases"][0]["name"] == "a"


# --- synthetic data -----------------------------------------------------------

def test_synthetic_deterministic():
    cfg = SynthConfig(dims=(24, 24, 24))
    a = generate_synthetic_dataset(cfg, 7, 3)
    b = generate_synthetic_dataset(cfg, 7, 3)
    c = generate_synthetic_dataset(cfg, 8, 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.labels, y.labels)
    assert not np.array_equal(a[0].image, c[0].image)
    assert a[0].image.shape == (2, 24, 24, 24) and a[0].image.dtype == np.float32
    assert 1 <= a[0].info["lesions"] <= 4


def test_synthetic_lesion_fraction():
    cases = generate_synthetic_dataset(SynthConfig(lesion_fraction=0.01), 3, 20)
    for c in cases:
        frac = (c.labels > 0).sum() / c.mask.sum()
        assert 0.005 <= frac <= 0.02
        assert not (c.labels[~c.mask]).any()


def test_synthetic_nested_core_inside_lesion():
    from scipy import ndimage
    cases = generate_synthetic_dataset(SynthConfig(dims=(40, 40, 40), nested=True, lesion_fraction=0.05), 5, 6)
    for c in cases:
        core = c.labels == 2
        assert core.any()
        # every core voxel and its 6-neighbours are lesion
        grown = ndimage.binary_dilation(core)
        assert np.all(c.labels[grown] >= 1)


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(lesion_fraction=0)
    with pytest.raises(ValueError):
        SynthConfig(min_lesions=3, max_lesions=2)
