"""Architecture description, geometry calculus and the dense forward/backward pass.

A network is one or two identical convolutional pathways (normal resolution and,
optionally, a low-resolution pathway fed with a block-averaged copy of the image),
followed by position-wise hidden layers (1x1x1 convolutions) and a 1x1x1
classification layer. All convolutions are valid and unit-stride, so feeding an
input larger than the receptive field yields a dense grid of predictions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .tensor import (
    ShapeError,
    concat_fms,
    conv3d_backward,
    conv3d_valid,
    crop_center,
    crop_center_backward,
    downsample_block_average,
    prelu,
    prelu_backward,
    softmax_channels,
    upsample_repeat,
    upsample_repeat_backward,
)

BN_EPS = 1e-5
BN_DECAY = 0.9
PRELU_INIT = 0.25
LEGACY_STD = 0.01


class GeometryError(ValueError):
    pass


def as_triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class LayerSpec:
    fms: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    batch_norm: bool = True
    dropout: float = 0.0
    # "fm" drops whole feature maps, "voxel" drops individual activations
    dropout_mode: str = "fm"
    activation: str = "prelu"

    def __post_init__(self):
        object.__setattr__(self, "kernel", as_triple(self.kernel))
        if self.fms < 1:
            raise ValueError(f"fm count must be positive, got {self.fms}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel sizes must be odd and positive, got {self.kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.activation not in ("prelu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.dropout_mode not in ("fm", "voxel"):
            raise ValueError(f"unknown dropout mode {self.dropout_mode!r}")


@dataclass(frozen=True)
class NetworkSpec:
    pathway: tuple[LayerSpec, ...]
    hidden: tuple[LayerSpec, ...] = ()
    class_count: int = 2
    input_channels: int = 1
    low_res_pathway: bool = False
    downsample_factor: int = 3
    init_scheme: str = "he"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "pathway", tuple(self.pathway))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not self.pathway:
            raise ValueError("a network needs at least one convolutional layer")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.init_scheme not in ("he", "legacy_gaussian"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        for h in self.hidden:
            if h.kernel != (1, 1, 1):
                raise ValueError("hidden layers after the pathways must use 1x1x1 kernels")

    @property
    def classifier(self) -> LayerSpec:
        return LayerSpec(self.class_count, (1, 1, 1), batch_norm=False, activation="none")

    def layers(self) -> list[tuple[str, LayerSpec, int]]:
        """``(name, spec, input_fms)`` for every layer in declaration order."""
        out = []
        prefixes = ["norm"] + (["low"] if self.low_res_pathway else [])
        for prefix in prefixes:
            c = self.input_channels
            for i, ls in enumerate(self.pathway):
                out.append((f"{prefix}.{i}", ls, c))
                c = ls.fms
        c = self.pathway[-1].fms * len(prefixes)
        for i, ls in enumerate(self.hidden):
            out.append((f"fc.{i}", ls, c))
            c = ls.fms
        out.append(("cls", self.classifier, c))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pathway"] = [asdict(l) for l in self.pathway]
        d["hidden"] = [asdict(l) for l in self.hidden]
        for l in d["pathway"] + d["hidden"]:
            l["kernel"] = list(l["kernel"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["pathway"] = tuple(LayerSpec(**l) for l in d["pathway"])
        d["hidden"] = tuple(LayerSpec(**l) for l in d.get("hidden", ()))
        return cls(**d)


# ---------------------------------------------------------------------------
# presets

_SHALLOW_FMS = (30, 40, 40, 50)
_DEEP_FMS = (30, 30, 40, 40, 40, 40, 50, 50)
_BIG_FMS = (60, 60, 80, 80, 80, 80, 100, 100)
PRESET_NAMES = ("shallow", "shallow_plus", "deep", "deep_plus", "big_deep_plus", "deepmedic")


def preset(name: str, input_channels: int = 1, class_count: int = 2, conv_dropout: float | None = None) -> NetworkSpec:
    """Architectures of the 3D model family (shallow baseline through the dual-pathway model).

    ``conv_dropout`` overrides the FM-dropout rate on the convolutional layers
    (the dual-pathway preset defaults to 2%, the others to none).
    """
    def conv_layers(fms, k, bn, drop):
        return tuple(LayerSpec(f, (k, k, k), batch_norm=bn, dropout=drop) for f in fms)

    hidden = tuple(LayerSpec(150, (1, 1, 1), dropout=0.5, dropout_mode="voxel") for _ in range(2))
    common = dict(input_channels=input_channels, class_count=class_count, name=name)
    drop = 0.0 if conv_dropout is None else conv_dropout
    if name == "shallow":
        return NetworkSpec(conv_layers(_SHALLOW_FMS, 5, False, drop), init_scheme="legacy_gaussian", **common)
    if name == "shallow_plus":
        return NetworkSpec(conv_layers(_SHALLOW_FMS, 5, True, drop), **common)
    if name == "deep":
        return NetworkSpec(conv_layers(_DEEP_FMS, 3, False, drop), init_scheme="legacy_gaussian", **common)
    if name == "deep_plus":
        return NetworkSpec(conv_layers(_DEEP_FMS, 3, True, drop), **common)
    if name == "big_deep_plus":
        return NetworkSpec(conv_layers(_BIG_FMS, 3, True, drop), hidden, **common)
    if name == "deepmedic":
        drop = 0.02 if conv_dropout is None else conv_dropout
        return NetworkSpec(conv_layers(_DEEP_FMS, 3, True, drop), hidden, low_res_pathway=True,
                           downsample_factor=3, **common)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def scale_width(spec: NetworkSpec, factor: float) -> NetworkSpec:
    """Same topology with every FM count multiplied by ``factor`` (at least 1)."""
    def sc(ls):
        return replace(ls, fms=max(1, int(round(ls.fms * factor))))
    return replace(spec, pathway=tuple(map(sc, spec.pathway)), hidden=tuple(map(sc, spec.hidden)))


# ---------------------------------------------------------------------------
# geometry

def receptive_field(spec: NetworkSpec) -> list[tuple[int, int, int]]:
    """Receptive field after each layer of a pathway, hidden layers and classifier."""
    phi = np.ones(3, dtype=int)
    out = []
    for ls in list(spec.pathway) + list(spec.hidden) + [spec.classifier]:
        phi = phi + (np.array(ls.kernel) - 1)
        out.append(tuple(int(v) for v in phi))
    return out


def fm_dims(spec: NetworkSpec, input_dims) -> list[tuple[int, int, int]]:
    input_dims = np.array(as_triple(input_dims))
    phis = receptive_field(spec)
    need = np.array(phis[-1])
    if np.any(input_dims < need):
        raise GeometryError(f"input {tuple(input_dims)} is smaller than the receptive field; "
                            f"minimum is {tuple(int(v) for v in need)}")
    return [tuple(int(v) for v in input_dims - np.array(phi) + 1) for phi in phis]


def dual_pathway_geometry(spec: NetworkSpec, out_dims):
    """Input sizes for both pathways that yield ``out_dims`` predictions.

    Returns ``(in_norm, in_low, low_out)``.
    """
    out = np.array(as_triple(out_dims))
    if np.any(out < 1):
        raise GeometryError(f"output dims must be positive, got {tuple(out)}")
    phi = np.array(receptive_field(spec)[len(spec.pathway) - 1])
    in1 = phi + out - 1
    if not spec.low_res_pathway:
        return tuple(int(v) for v in in1), None, None
    f = spec.downsample_factor
    low_out = -(-out // f)
    in2 = phi + low_out - 1
    return tuple(int(v) for v in in1), tuple(int(v) for v in in2), tuple(int(v) for v in low_out)


def layer_weight_count(c_in: int, c_out: int, kernel) -> int:
    return int(c_in * c_out * np.prod(as_triple(kernel)))


def param_count(spec: NetworkSpec) -> dict:
    per_layer = {}
    biases = bn = slopes = 0
    for name, ls, c_in in spec.layers():
        per_layer[name] = layer_weight_count(c_in, ls.fms, ls.kernel)
        biases += ls.fms
        if ls.batch_norm:
            bn += 2 * ls.fms
        if ls.activation == "prelu":
            slopes += ls.fms
    return {"weights": sum(per_layer.values()), "per_layer": per_layer,
            "biases": biases, "batch_norm": bn, "prelu": slopes}


@dataclass
class GeometryReport:
    layers: list = field(default_factory=list)  # (name, kernel, fms, phi, delta)
    in_norm: tuple = ()
    in_low: tuple | None = None
    low_out: tuple | None = None
    out: tuple = ()
    context_low: tuple | None = None
    params: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        def fmt(t):
            return "x".join(str(v) for v in t)
        rows = [f"{'layer':<8} {'kernel':>7} {'fms':>5} {'rf':>9} {'dims':>9} {'weights':>9}"]
        for name, kernel, fms, phi, delta in self.layers:
            rows.append(f"{name:<8} {fmt(kernel):>7} {fms:>5} {fmt(phi):>9} {fmt(delta):>9} "
                        f"{self.params['per_layer'][name]:>9}")
        rows.append(f"normal-resolution input: {fmt(self.in_norm)}")
        if self.in_low is not None:
            rows.append(f"low-resolution input: {fmt(self.in_low)} (pathway output {fmt(self.low_out)}, "
                        f"context {fmt(self.context_low)})")
        rows.append(f"output: {fmt(self.out)}")
        p = self.params
        rows.append(f"weights: {p['weights']}  biases: {p['biases']}  bn: {p['batch_norm']}  prelu: {p['prelu']}")
        return rows


def geometry_report(spec: NetworkSpec, out_dims) -> GeometryReport:
    in1, in2, low_out = dual_pathway_geometry(spec, out_dims)
    phis = receptive_field(spec)
    deltas = fm_dims(spec, in1)
    names = [n for n, _, _ in spec.layers() if not n.startswith("low.")]
    lspecs = list(spec.pathway) + list(spec.hidden) + [spec.classifier]
    rep = GeometryReport(in_norm=in1, in_low=in2, low_out=low_out, out=deltas[-1], params=param_count(spec))
    for name, ls, phi, delta in zip(names, lspecs, phis, deltas):
        rep.layers.append((name, ls.kernel, ls.fms, phi, delta))
    if spec.low_res_pathway:
        phi_l = phis[len(spec.pathway) - 1]
        rep.context_low = tuple(p * spec.downsample_factor for p in phi_l)
    return rep


@dataclass(frozen=True)
class InputLayout:
    """Where the inputs of a dense pass lie relative to the first predicted voxel.

    Offsets are per axis, in normal-resolution voxels. The low-resolution input
    is the block average (factor ``factor``) of a region of ``low_extent`` voxels
    starting at ``low_offset``.
    """

    out_dims: tuple
    norm_offset: tuple
    norm_dims: tuple
    factor: int = 1
    low_offset: tuple | None = None
    low_extent: tuple | None = None
    low_dims: tuple | None = None

    @property
    def margin_before(self) -> tuple:
        offs = [self.norm_offset] + ([self.low_offset] if self.low_offset else [])
        return tuple(max(-o[i] for o in offs) for i in range(3))

    @property
    def margin_after(self) -> tuple:
        ends = [tuple(o + n for o, n in zip(self.norm_offset, self.norm_dims))]
        if self.low_offset:
            ends.append(tuple(o + n for o, n in zip(self.low_offset, self.low_extent)))
        return tuple(max(max(e[i] for e in ends) - self.out_dims[i], 0) for i in range(3))


def input_layout(spec: NetworkSpec, out_dims) -> InputLayout:
    out = as_triple(out_dims)
    in1, in2, low_out = dual_pathway_geometry(spec, out)
    phi = receptive_field(spec)[len(spec.pathway) - 1]
    half = tuple((p - 1) // 2 for p in phi)
    norm_offset = tuple(-h for h in half)
    if not spec.low_res_pathway:
        return InputLayout(out, norm_offset, in1)
    f = spec.downsample_factor
    # upsampled low-res FMs are center-cropped; c0 is the crop offset
    c0 = tuple((f * lo - o) // 2 for lo, o in zip(low_out, out))
    low_offset = tuple(-(f * h + c) for h, c in zip(half, c0))
    low_extent = tuple(f * n for n in in2)
    return InputLayout(out, norm_offset, in1, f, low_offset, low_extent, in2)


def extract_inputs(image: np.ndarray, origin, layout: InputLayout):
    """Slice the network inputs for the output block starting at ``origin``.

    ``image`` is ``(C, X, Y, Z)`` and must already contain the required margins.
    Returns ``(norm, low)`` with a leading batch axis; ``low`` is None for
    single-pathway networks.
    """
    def take(offset, dims):
        start = [o + d for o, d in zip(origin, offset)]
        if min(start) < 0 or any(s + n > m for s, n, m in zip(start, dims, image.shape[1:])):
            raise GeometryError(f"input block at {start} size {dims} falls outside the image {image.shape[1:]}")
        return image[:, start[0]:start[0] + dims[0], start[1]:start[1] + dims[1], start[2]:start[2] + dims[2]]

    norm = take(layout.norm_offset, layout.norm_dims)[None]
    low = None
    if layout.low_offset is not None:
        region = take(layout.low_offset, layout.low_extent)
        low = downsample_block_average(region, layout.factor)[None]
    return norm, low


# ---------------------------------------------------------------------------
# parameters

@dataclass
class NetworkParams:
    spec: NetworkSpec
    layers: dict  # name -> {"W", "b", "slope"?, "gamma"?, "beta"?, "mean"?, "var"?}
    seed: int | None = None

    TRAINABLE = ("W", "b", "slope", "gamma", "beta")

    @property
    def dtype(self):
        return self.layers["cls"]["W"].dtype

    def arrays(self):
        """``(layer, key, array)`` in declaration order."""
        for name, _, _ in self.spec.layers():
            for key in ("W", "b", "slope", "gamma", "beta", "mean", "var"):
                if key in self.layers[name]:
                    yield name, key, self.layers[name][key]

    def trainable(self):
        for name, key, arr in self.arrays():
            if key in self.TRAINABLE:
                yield name, key, arr

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {n: {k: v.copy() for k, v in d.items()} for n, d in self.layers.items()},
                             self.seed)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.spec, {n: {k: v.astype(dtype) for k, v in d.items()}
                                         for n, d in self.layers.items()}, self.seed)


def init_params(spec: NetworkSpec, seed: int, scheme: str | None = None, dtype=np.float32) -> NetworkParams:
    """Kernel weights from N(0, std) with std = sqrt(2 / n_in) ("he") or 0.01 ("legacy_gaussian")."""
    scheme = scheme or spec.init_scheme
    if scheme not in ("he", "legacy_gaussian"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    layers = {}
    for name, ls, c_in in spec.layers():
        shape = (ls.fms, c_in) + ls.kernel
        n_in = c_in * int(np.prod(ls.kernel))
        std = math.sqrt(2.0 / n_in) if scheme == "he" else LEGACY_STD
        p = {"W": (rng.standard_normal(shape) * std).astype(dtype), "b": np.zeros(ls.fms, dtype)}
        if ls.activation == "prelu":
            p["slope"] = np.full(ls.fms, PRELU_INIT, dtype)
        if ls.batch_norm:
            p["gamma"] = np.ones(ls.fms, dtype)
            p["beta"] = np.zeros(ls.fms, dtype)
            p["mean"] = np.zeros(ls.fms, dtype)
            p["var"] = np.ones(ls.fms, dtype)
        layers[name] = p
    return NetworkParams(spec, layers, seed)


# ---------------------------------------------------------------------------
# batch normalization

def _bcast(v, dtype):
    return v.reshape(1, -1, 1, 1, 1).astype(dtype, copy=False)


def batch_norm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None, eps=BN_EPS):
    """Per-FM normalization over batch and spatial axes.

    Returns ``(y, cache, (batch_mean, batch_var))``; the stats are None in infer mode.
    """
    if mode == "train":
        m = x.shape[0] * int(np.prod(x.shape[2:]))
        if m < 2:
            raise ShapeError("batch normalization in train mode needs at least 2 samples per FM")
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        stats = (mean, var)
    else:
        mean, var, stats = running_mean, running_var, None
    inv_std = 1.0 / np.sqrt(var.astype(x.dtype) + x.dtype.type(eps))
    xhat = (x - _bcast(mean, x.dtype)) * _bcast(inv_std, x.dtype)
    y = xhat * _bcast(gamma, x.dtype) + _bcast(beta, x.dtype)
    return y, (mode, xhat, inv_std, gamma), stats


def batch_norm_backward(cache, grad_out):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    mode, xhat, inv_std, gamma = cache
    axes = (0, 2, 3, 4)
    g_gamma = (grad_out * xhat).sum(axis=axes)
    g_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * _bcast(gamma, grad_out.dtype)
    if mode != "train":
        return gxhat * _bcast(inv_std, grad_out.dtype), g_gamma, g_beta
    m = grad_out.shape[0] * int(np.prod(grad_out.shape[2:]))
    s1 = gxhat.sum(axis=axes)
    s2 = (gxhat * xhat).sum(axis=axes)
    gx = (gxhat - _bcast(s1 / m, gxhat.dtype) - xhat * _bcast(s2 / m, gxhat.dtype)) * _bcast(inv_std, gxhat.dtype)
    return gx, g_gamma, g_beta


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardResult:
    probs: np.ndarray
    logits: np.ndarray
    activations: dict
    bn_stats: dict
    cache: dict | None = None
    mode: str = "infer"


def _layer_forward(x, p, ls: LayerSpec, mode, rng, keep):
    z = conv3d_valid(x, p["W"], p["b"])
    bn_cache = stats = None
    zn = z
    if ls.batch_norm:
        zn, bn_cache, stats = batch_norm_forward(z, p["gamma"], p["beta"], mode, p.get("mean"), p.get("var"))
    a = prelu(zn, p["slope"]) if ls.activation == "prelu" else zn
    mask = None
    if mode == "train" and ls.dropout > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        keep_p = 1.0 - ls.dropout
        shape = a.shape[:2] + (1, 1, 1) if ls.dropout_mode == "fm" else a.shape
        mask = (rng.random(shape) < keep_p).astype(a.dtype) / a.dtype.type(keep_p)
        a = a * mask
    cache = (x, zn, bn_cache, mask) if keep else None
    return a, cache, stats


def _layer_backward(g, p, ls: LayerSpec, cache, need_input_grad):
    x, zn, bn_cache, mask = cache
    grads = {}
    if mask is not None:
        g = g * mask
    if ls.activation == "prelu":
        g, grads["slope"] = prelu_backward(zn, p["slope"], g)
    if ls.batch_norm:
        g, grads["gamma"], grads["beta"] = batch_norm_backward(bn_cache, g)
    gx, grads["W"], grads["b"] = conv3d_backward(x, p["W"], g, need_input_grad)
    return gx, grads


def _check_geometry(spec: NetworkSpec, x_norm, x_low):
    if x_norm.ndim != 5 or x_norm.shape[1] != spec.input_channels:
        raise GeometryError(f"normal-resolution input must be (B, {spec.input_channels}, X, Y, Z), "
                            f"got {x_norm.shape}")
    out = fm_dims(spec, x_norm.shape[2:])[-1]
    if not spec.low_res_pathway:
        return
    if x_low is None:
        raise GeometryError("dual-pathway network needs a low-resolution input")
    _, in2, _ = dual_pathway_geometry(spec, out)
    if tuple(x_low.shape[2:]) != in2 or x_low.shape[:2] != x_norm.shape[:2]:
        raise GeometryError(f"low-resolution input must have spatial dims {in2} for output {out}, "
                            f"got {x_low.shape}")


def forward(params: NetworkParams, x_norm, x_low=None, mode: str = "infer", rng=None,
            keep_cache: bool | None = None) -> ForwardResult:
    """Dense forward pass.

    In train mode batch statistics drive batch normalization and dropout masks
    are drawn from ``rng``; infer mode uses running statistics and no dropout.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = params.spec
    dtype = params.dtype
    x_norm = np.asarray(x_norm, dtype=dtype)
    if x_low is not None:
        x_low = np.asarray(x_low, dtype=dtype)
    _check_geometry(spec, x_norm, x_low)
    keep = (mode == "train") if keep_cache is None else keep_cache
    acts, stats, cache = {}, {}, {}

    def run(prefix, x):
        for i, ls in enumerate(spec.pathway):
            name = f"{prefix}.{i}"
            x, cache[name], s = _layer_forward(x, params.layers[name], ls, mode, rng, keep)
            acts[name] = x
            if s is not None:
                stats[name] = s
        return x

    h = run("norm", x_norm)
    if spec.low_res_pathway:
        low = run("low", x_low)
        up = upsample_repeat(low, spec.downsample_factor)
        cache["merge"] = (h.shape[1], up.shape[2:])
        h = concat_fms(h, crop_center(up, h.shape[2:]))
    for i, ls in enumerate(spec.hidden):
        name = f"fc.{i}"
        h, cache[name], s = _layer_forward(h, params.layers[name], ls, mode, rng, keep)
        acts[name] = h
        if s is not None:
            stats[name] = s
    logits, cache["cls"], _ = _layer_forward(h, params.layers["cls"], spec.classifier, mode, rng, keep)
    acts["cls"] = logits
    return ForwardResult(softmax_channels(logits), logits, acts, stats, cache if keep else None, mode)


def backward(params: NetworkParams, result: ForwardResult, grad_logits, input_grad: bool = False) -> dict:
    """Gradients of every trainable array given dLoss/dlogits.

    With ``input_grad`` the result also holds ``{"input": {"norm": ..., "low": ...}}``.
    """
    if result.cache is None:
        raise ValueError("forward pass was run without keep_cache")
    spec = params.spec
    cache = result.cache
    grads = {}
    g, grads["cls"] = _layer_backward(grad_logits, params.layers["cls"], spec.classifier, cache["cls"], True)
    for i in reversed(range(len(spec.hidden))):
        name = f"fc.{i}"
        g, grads[name] = _layer_backward(g, params.layers[name], spec.hidden[i], cache[name], True)
    branches = [("norm", g)]
    if spec.low_res_pathway:
        c_norm, up_dims = cache["merge"]
        g_low = upsample_repeat_backward(crop_center_backward(g[:, c_norm:], up_dims), spec.downsample_factor)
        branches = [("norm", g[:, :c_norm]), ("low", g_low)]
    for prefix, g in branches:
        for i in reversed(range(len(spec.pathway))):
            name = f"{prefix}.{i}"
            g, grads[name] = _layer_backward(g, params.layers[name], spec.pathway[i], cache[name],
                                             i > 0 or input_grad)
        if input_grad:
            grads.setdefault("input", {})[prefix] = g
    return grads


def update_running_stats(params: NetworkParams, result: ForwardResult, decay: float = BN_DECAY):
    """Exponential moving average of batch statistics into the BN running estimates."""
    for name, (mean, var) in result.bn_stats.items():
        p = params.layers[name]
        p["mean"] = (decay * p["mean"] + (1 - decay) * mean).astype(p["mean"].dtype)
        p["var"] = (decay * p["var"] + (1 - decay) * var).astype(p["var"].dtype)
