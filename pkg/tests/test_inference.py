import numpy as np
import pytest

from volseg.inference import (
    SoftSegmentation,
    argmax_labels,
    dump_feature_maps,
    effective_tile,
    ensemble_average,
    layer_names,
    merge_foreground,
    segment_volume,
)
from volseg.network import (
    LayerSpec,
    NetworkSpec,
    extract_inputs,
    forward,
    geometry_report,
    init_params,
    input_layout,
    preset,
    scale_width,
)


@pytest.fixture(scope="module")
def dual_params():
    return init_params(scale_width(preset("deepmedic", 2, 3), 0.2), seed=3)


@pytest.fixture(scope="module")
def volume40():
    return np.random.default_rng(40).standard_normal((2, 40, 40, 40)).astype(np.float32)


def assert_simplex(probs, tol=1e-5):
    assert probs.min() >= 0 and probs.max() <= 1
    assert np.abs(probs.sum(0) - 1).max() < tol


def test_tiling_invariance(dual_params, volume40):
    a = segment_volume(dual_params, volume40, (9, 9, 9))
    b = segment_volume(dual_params, volume40, (15, 15, 15))
    assert a.probs.shape == (3, 40, 40, 40)
    assert np.abs(a.probs - b.probs).max() < 1e-5
    assert_simplex(a.probs)


def test_whole_volume_tile_matches_repeated_run(dual_params, volume40):
    a = segment_volume(dual_params, volume40, (42, 42, 42))
    b = segment_volume(dual_params, volume40, (42, 42, 42))
    assert np.array_equal(a.probs, b.probs)
    c = segment_volume(dual_params, volume40, (12, 12, 12), batch_tiles=4)
    assert np.abs(a.probs - c.probs).max() < 1e-5


def test_tile_rounded_to_downsampling_factor(dual_params):
    assert effective_tile(dual_params, 35) == (36, 36, 36)
    assert effective_tile(dual_params, (9, 10, 1)) == (9, 12, 3)
    single = init_params(scale_width(preset("deep", 1), 0.2), 0)
    assert effective_tile(single, 35) == (35, 35, 35)
    with pytest.raises(ValueError):
        effective_tile(single, 0)


def test_interior_matches_unpadded_dense_pass(dual_params):
    image = np.random.default_rng(5).standard_normal((2, 60, 60, 60)).astype(np.float32)
    soft = segment_volume(dual_params, image, (12, 12, 12))
    layout = input_layout(dual_params.spec, (9, 9, 9))
    origin = (27, 27, 27)
    assert min(origin) >= max(layout.margin_before)
    assert 60 - origin[0] - 9 >= max(layout.margin_after)
    norm, low = extract_inputs(image, origin, layout)
    direct = forward(dual_params, norm, low).probs[0]
    assert np.abs(soft.probs[:, 27:36, 27:36, 27:36] - direct).max() < 1e-5


def test_zero_classifier_gives_uniform(volume40):
    params = init_params(scale_width(preset("deepmedic", 2, 4), 0.2), 1)
    for v in params.layers["cls"].values():
        v[...] = 0
    soft = segment_volume(params, volume40, (21, 21, 21))
    assert np.abs(soft.probs - 0.25).max() < 1e-6


def test_channel_mismatch_rejected(dual_params):
    with pytest.raises(ValueError, match="channels"):
        segment_volume(dual_params, np.zeros((1, 20, 20, 20), np.float32))


def test_provenance_and_spacing(dual_params):
    from volseg.tensor import Volume
    vol = Volume(np.zeros((2, 10, 10, 10), np.float32), (1.0, 2.0, 3.0))
    soft = segment_volume(dual_params, vol, 10)
    assert soft.spacing == (1.0, 2.0, 3.0)
    assert soft.provenance["tile"] == [12, 12, 12] and soft.provenance["seed"] == 3


# --- ensemble / labels --------------------------------------------------------

def soft(values):
    return SoftSegmentation(np.asarray(values, np.float64).reshape(len(values), 1, 1, -1))


def test_ensemble():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=50).T.reshape(3, 5, 5, 2)
    one = SoftSegmentation(p)
    assert np.array_equal(ensemble_average([one]).probs, p)
    avg = ensemble_average([soft([1, 0]), soft([0, 1])])
    assert avg.probs.ravel().tolist() == [0.5, 0.5]
    q = rng.dirichlet(np.ones(3), size=50).T.reshape(3, 5, 5, 2)
    r = ensemble_average([one, SoftSegmentation(q), SoftSegmentation(p)])
    assert np.abs(r.probs.sum(0) - 1).max() < 1e-6
    with pytest.raises(ValueError):
        ensemble_average([one, soft([1, 0])])
    with pytest.raises(ValueError):
        ensemble_average([])


def test_argmax_rules():
    assert argmax_labels(soft([0.9, 0.1])).item() == 0
    assert argmax_labels(soft([0.5, 0.5])).item() == 0
    assert argmax_labels(soft([0.2, 0.4, 0.4])).item() == 1
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=64).T.reshape(4, 4, 4, 4)
    scale = rng.uniform(0.01, 100, (4, 4, 4))
    assert np.array_equal(argmax_labels(p), argmax_labels(p * scale))
    assert argmax_labels(p).dtype == np.int16


def test_merge_foreground():
    rng = np.random.default_rng(2)
    p = SoftSegmentation(rng.dirichlet(np.ones(5), size=27).T.reshape(5, 3, 3, 3))
    all_fg = merge_foreground(p, [1, 2, 3, 4])
    assert np.allclose(all_fg.probs[1], 1 - p.probs[0])
    single = merge_foreground(p, {2})
    assert np.array_equal(single.probs[1], p.probs[2])
    assert np.allclose(merge_foreground(p, [1, 3]).probs.sum(0), 1)
    for bad in ([0, 1], [5], []):
        with pytest.raises(ValueError):
            merge_foreground(p, bad)


# --- feature-map dumps --------------------------------------------------------

def test_impulse_first_layer_is_flipped_kernel():
    spec = NetworkSpec((LayerSpec(2, 3, batch_norm=False, activation="none"),
                        LayerSpec(2, 3, batch_norm=False, activation="none")))
    params = init_params(spec, 0, dtype=np.float64)
    image = np.zeros((1, 9, 9, 9))
    image[0, 4, 4, 4] = 1.0
    fms = dump_feature_maps(params, image, ["norm.0"])["norm.0"]
    assert len(fms) == 2 and fms[0].data.shape == (1, 7, 7, 7)
    w, b = params.layers["norm.0"]["W"], params.layers["norm.0"]["b"]
    for o, vol in enumerate(fms):
        expect = np.full((7, 7, 7), b[o])
        expect[2:5, 2:5, 2:5] += w[o, 0, ::-1, ::-1, ::-1]
        assert np.allclose(vol.data[0], expect, atol=1e-12)
        assert vol.meta["offset"] == [1, 1, 1]


def test_classifier_dump_is_logits(dual_params, volume40):
    names = layer_names(dual_params)
    out = dump_feature_maps(dual_params, volume40, [len(names), "1"])
    logits = np.stack([v.data[0] for v in out["cls"]])
    assert logits.shape[0] == 3
    probs = np.exp(logits - logits.max(0))
    probs /= probs.sum(0)
    # same output block as a direct dense pass on the mirror-padded image
    off = out["cls"][0].meta["offset"]
    layout = input_layout(dual_params.spec, logits.shape[1:])
    before = layout.margin_before
    padded = np.pad(volume40, [(0, 0)] + list(zip(before, layout.margin_after)), mode="reflect")
    norm, low = extract_inputs(padded, tuple(o + b for o, b in zip(off, before)), layout)
    direct = forward(dual_params, norm, low).probs[0]
    assert np.abs(direct - probs).max() < 1e-5


def test_dump_dims_match_geometry_report(dual_params, volume40):
    names = layer_names(dual_params)
    out = dump_feature_maps(dual_params, volume40, names)
    rep = geometry_report(dual_params.spec, out["cls"][0].data.shape[1:])
    assert rep.in_norm == (40, 40, 40)
    for name, _, fms, _, delta in rep.layers:
        assert len(out[name]) == fms
        assert out[name][0].data.shape[1:] == delta


def test_dump_rejects_bad_selector(dual_params, volume40):
    with pytest.raises(ValueError):
        dump_feature_maps(dual_params, volume40, [0])
    with pytest.raises(ValueError):
        dump_feature_maps(dual_params, volume40, ["low.0"])
