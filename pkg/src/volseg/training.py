"""Segment sampling, the dense loss, the optimizer and the training loop."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .network import (
    InputLayout,
    NetworkParams,
    NetworkSpec,
    backward,
    extract_inputs,
    forward,
    init_params,
    input_layout,
    update_running_stats,
    as_triple,
)

log = logging.getLogger(__name__)

LOSS_EPS = 1e-7


# ---------------------------------------------------------------------------
# data

@dataclass
class Case:
    """One training volume: normalized image ``(C, X, Y, Z)``, integer labels and a validity mask."""

    image: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None
    name: str = ""
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 3:
            self.image = self.image[None]
        self.labels = np.asarray(self.labels)
        if self.mask is None:
            self.mask = np.ones(self.labels.shape, bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.shape[1:] != self.labels.shape or self.mask.shape != self.labels.shape:
            raise ValueError(f"case {self.name!r}: image, labels and mask dims differ "
                             f"({self.image.shape[1:]}, {self.labels.shape}, {self.mask.shape})")


@dataclass
class SamplerConfig:
    out_dims: tuple = (9, 9, 9)
    fg_prob: float = 0.5
    # None means "any nonzero label"
    fg_classes: tuple | None = None
    # "mask": centers restricted to the validity mask; "all": anywhere in the volume
    centers: str = "mask"

    def __post_init__(self):
        self.out_dims = as_triple(self.out_dims)
        if not 0.0 <= self.fg_prob <= 1.0:
            raise ValueError(f"fg_prob must be in [0, 1], got {self.fg_prob}")
        if self.centers not in ("mask", "all"):
            raise ValueError(f"unknown center policy {self.centers!r}")
        if self.fg_classes is not None:
            self.fg_classes = tuple(int(c) for c in self.fg_classes)


@dataclass
class SegmentBatch:
    norm: np.ndarray
    low: np.ndarray | None
    labels: np.ndarray
    # (case index, center voxel, drawn as foreground)
    provenance: list = field(default_factory=list)


def _pad(a, before, after, mode="reflect"):
    pad = [(0, 0)] * (a.ndim - 3) + list(zip(before, after))
    return np.pad(a, pad, mode=mode)


class PreparedCase:
    """A case mirror-padded for a given input layout, with center lists per category."""

    def __init__(self, case: Case, layout: InputLayout, config: SamplerConfig):
        self.case = case
        self.layout = layout
        out = np.array(layout.out_dims)
        half = (out - 1) // 2
        self.half = tuple(int(h) for h in half)
        # margins are relative to the output block, which extends half a block around each center
        self.before = tuple(m + h for m, h in zip(layout.margin_before, half))
        self.after = tuple(m + o - 1 - h for m, o, h in zip(layout.margin_after, out, half))
        self.image = _pad(case.image, self.before, self.after)
        self.labels = _pad(case.labels, self.before, self.after)
        valid = case.mask if config.centers == "mask" else np.ones(case.labels.shape, bool)
        fg = foreground(case.labels, config.fg_classes)
        self.centers = {True: np.argwhere(valid & fg), False: np.argwhere(valid & ~fg)}

    def origin(self, center) -> tuple:
        """Output-block origin in padded coordinates."""
        return tuple(int(c) - h + b for c, h, b in zip(center, self.half, self.before))

    def label_block(self, center):
        o = self.origin(center)
        d = self.layout.out_dims
        return self.labels[o[0]:o[0] + d[0], o[1]:o[1] + d[1], o[2]:o[2] + d[2]]


def foreground(labels, fg_classes=None):
    if fg_classes is None:
        return labels > 0
    return np.isin(labels, fg_classes)


def prepare_cases(cases, spec: NetworkSpec, config: SamplerConfig) -> list[PreparedCase]:
    layout = input_layout(spec, config.out_dims)
    return [PreparedCase(c, layout, config) for c in cases]


def _category(pc: PreparedCase, want_fg: bool) -> bool:
    if len(pc.centers[want_fg]):
        return want_fg
    if not len(pc.centers[not want_fg]):
        raise ValueError(f"case {pc.case.name!r} has no valid centers")
    log.warning("case %r has no %s centers; sampling %s instead", pc.case.name,
                "foreground" if want_fg else "background", "background" if want_fg else "foreground")
    return not want_fg


def sample_segments(prepared: list[PreparedCase], config: SamplerConfig, n: int, rng,
                    with_inputs: bool = True) -> SegmentBatch:
    """Draw ``n`` segments: pick a case, flip a coin for fg/bg, pick a center uniformly in that category."""
    norms, lows, labels, prov = [], [], [], []
    for _ in range(n):
        ci = int(rng.integers(len(prepared)))
        pc = prepared[ci]
        want_fg = bool(rng.random() < config.fg_prob)
        cat = _category(pc, want_fg)
        pool = pc.centers[cat]
        center = tuple(int(v) for v in pool[rng.integers(len(pool))])
        labels.append(pc.label_block(center))
        prov.append((ci, center, cat))
        if with_inputs:
            norm, low = extract_inputs(pc.image, pc.origin(center), pc.layout)
            norms.append(norm[0])
            if low is not None:
                lows.append(low[0])
    norm = np.stack(norms) if norms else None
    low = np.stack(lows) if lows else None
    return SegmentBatch(norm, low, np.stack(labels), prov)


def _box_counts(onehot: np.ndarray, dims) -> np.ndarray:
    """Sum of every ``dims`` box, for all box origins, via an integral image (exact in int64)."""
    s = onehot.astype(np.int64)
    for ax in range(1, 4):
        s = np.cumsum(s, axis=ax)
        s = np.concatenate([np.zeros_like(s.take([0], axis=ax)), s], axis=ax)
    dx, dy, dz = dims
    return (s[:, dx:, dy:, dz:] - s[:, :-dx, dy:, dz:] - s[:, dx:, :-dy, dz:] - s[:, dx:, dy:, :-dz]
            + s[:, :-dx, :-dy, dz:] + s[:, :-dx, dy:, :-dz] + s[:, dx:, :-dy, :-dz] - s[:, :-dx, :-dy, :-dz])


@dataclass
class CaptureReport:
    real: np.ndarray
    captured: np.ndarray

    def lines(self) -> list[str]:
        k = len(self.real)
        head = "".join(f"{c:>9}" for c in range(k))
        rows = [f"{'class':<10}{head}"]
        for name, v in (("Real", self.real), ("Captured", self.captured)):
            rows.append(f"{name:<10}" + "".join(f"{100 * x:>9.2f}" for x in v))
        return rows


def expected_capture(prepared: list[PreparedCase], config: SamplerConfig, n_classes: int) -> np.ndarray:
    """Exact expected class distribution of sampled label blocks, enumerating every valid center."""
    total = np.zeros(n_classes)
    for pc in prepared:
        onehot = np.stack([pc.labels == c for c in range(n_classes)])
        counts = _box_counts(onehot, pc.layout.out_dims)
        per_cat = {}
        for cat, centers in pc.centers.items():
            if len(centers):
                o = (centers - np.array(pc.half) + np.array(pc.before)).T
                h = counts[:, o[0], o[1], o[2]].sum(axis=1)
                per_cat[cat] = h / h.sum()
        fg = per_cat.get(True, per_cat.get(False))
        bg = per_cat.get(False, per_cat.get(True))
        total += config.fg_prob * fg + (1 - config.fg_prob) * bg
    return total / len(prepared)


def class_capture_stats(cases, spec: NetworkSpec, config: SamplerConfig, n_classes: int | None = None) -> CaptureReport:
    prepared = cases if cases and isinstance(cases[0], PreparedCase) else prepare_cases(cases, spec, config)
    n_classes = n_classes or spec.class_count
    real = np.zeros(n_classes)
    for pc in prepared:
        lab = pc.case.labels[pc.case.mask]
        real += np.bincount(lab.ravel(), minlength=n_classes)[:n_classes]
    return CaptureReport(real / real.sum(), expected_capture(prepared, config, n_classes))


# ---------------------------------------------------------------------------
# augmentation

def augment_reflect(image, labels, axis: int = 0):
    """Mirror image ``(C, X, Y, Z)`` and labels ``(X, Y, Z)`` along a spatial axis."""
    return np.flip(image, axis=axis + 1).copy(), np.flip(labels, axis=axis).copy()


def augment_intensity_shift(blocks, sigma, rng, std: float = 0.1):
    """Add ``r_c * sigma_c`` to every channel of each segment, r_c ~ N(0, std).

    ``blocks`` is a list of arrays ``(B, C, ...)`` that belong to the same
    segments (normal and low-resolution inputs get the same shift).
    """
    b, c = blocks[0].shape[:2]
    shift = rng.normal(0.0, std, (b, c)) * np.asarray(sigma, dtype=np.float64)
    out = [blk + shift.reshape(b, c, 1, 1, 1).astype(blk.dtype) for blk in blocks]
    return out, shift


# ---------------------------------------------------------------------------
# loss

def dense_loss(probs: np.ndarray, labels: np.ndarray, eps: float = LOSS_EPS):
    """Mean negative log-likelihood over all B*V predicted voxels and its gradient w.r.t. the logits."""
    if probs.shape[0] != labels.shape[0] or probs.shape[2:] != labels.shape[1:]:
        raise ValueError(f"probability maps {probs.shape} and labels {labels.shape} do not match")
    c = probs.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label ids must be in [0, {c}), got range {labels.min()}..{labels.max()}")
    onehot = np.moveaxis(np.eye(c, dtype=probs.dtype)[labels], -1, 1)
    p_true = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    n = labels.size
    loss = float(-np.log(np.maximum(p_true.astype(np.float64), eps)).sum() / n)
    grad = (probs - onehot) / probs.dtype.type(n)
    # where the clamp is active, log(eps) is constant
    grad *= (p_true >= eps)[:, None]
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    momentum: float = 0.6
    rho: float = 0.9
    eps: float = 1e-6
    l1: float = 1e-6
    l2: float = 1e-4
    batch_size: int = 10
    patience: int = 4
    min_delta: float = 1e-3
    lr_floor: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1 or not 0 < self.rho < 1 or self.batch_size < 1:
            raise ValueError("optimizer config out of range: need lr > 0, 0 <= momentum < 1, 0 < rho < 1, batch_size >= 1")


@dataclass
class OptimizerState:
    accum: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    steps: int = 0
    rejected: int = 0


def rmsprop_nesterov_step(params: NetworkParams, grads: dict, state: OptimizerState, config: OptimizerConfig,
                          lr: float | None = None, update_accumulator: bool = True) -> bool:
    """One RMSProp update with Nesterov momentum, in place.

    With ``d = lr * g / (sqrt(s) + eps)`` the update is ``v <- m v - d`` and
    ``theta <- theta + m v - d`` (the look-ahead form of Nesterov momentum).
    L1/L2 penalties act on kernel weights only. Returns False (and changes
    nothing) when any gradient is non-finite.
    """
    lr = config.lr if lr is None else lr
    for name, d in grads.items():
        for key, g in d.items():
            if not np.all(np.isfinite(g)):
                state.rejected += 1
                log.warning("non-finite gradient in %s/%s; step rejected", name, key)
                return False
    m = config.momentum
    for name, d in grads.items():
        for key, g in d.items():
            theta = params.layers[name][key]
            g = g.astype(np.float64)
            if key == "W":
                g = g + config.l1 * np.sign(theta) + config.l2 * theta
            k = (name, key)
            s = state.accum.get(k)
            if s is None:
                s = np.zeros_like(g)
            if update_accumulator:
                s = config.rho * s + (1 - config.rho) * g * g
            state.accum[k] = s
            step = lr * g / (np.sqrt(s) + config.eps)
            v = m * state.velocity.get(k, np.zeros_like(g)) - step
            state.velocity[k] = v
            params.layers[name][key] = (theta + m * v - step).astype(theta.dtype)
    state.steps += 1
    return True


def lr_plateau_schedule(history, lr0: float, patience: int = 4, min_delta: float = 1e-3,
                        floor: float = 1e-6, factor: float = 0.5) -> float:
    """Learning rate after replaying a validation-metric history (higher is better)."""
    if not len(history):
        raise ValueError("metric history is empty")
    lr, best, wait = lr0, -math.inf, 0
    for v in history:
        if v > best + min_delta:
            best, wait = v, 0
        else:
            wait += 1
            if wait >= patience:
                lr, wait = max(lr * factor, floor), 0
    return lr


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    epochs: int = 20
    batches_per_epoch: int = 50
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    reflect: bool = True
    reflect_axis: int = 0
    intensity_shift_std: float = 0.1
    eval_every: int = 1
    tile: tuple = (36, 36, 36)
    checkpoint_every: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["sampler"] = SamplerConfig(**d.get("sampler", {}))
        d["optimizer"] = OptimizerConfig(**d.get("optimizer", {}))
        if "tile" in d:
            d["tile"] = as_triple(d["tile"])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, params):
        super().__init__(msg)
        self.params = params


@dataclass
class TrainResult:
    params: NetworkParams
    log: list
    checkpoints: list
    lr: float


def format_record(rec: dict) -> str:
    parts = []
    for k, v in rec.items():
        if isinstance(v, float):
            v = f"{v:.9g}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


def dice(pred, ref) -> float:
    p = np.asarray(pred, bool)
    r = np.asarray(ref, bool)
    denom = p.sum() + r.sum()
    return 1.0 if denom == 0 else float(2 * (p & r).sum() / denom)


def _validation_dsc(params, val_cases, tile, fg_classes):
    from .inference import argmax_labels, segment_volume

    scores = []
    for c in val_cases:
        soft = segment_volume(params, c.image, tile)
        pred = argmax_labels(soft)
        scores.append(dice(foreground(pred, fg_classes), foreground(c.labels, fg_classes)))
    return float(np.mean(scores))


def train(spec: NetworkSpec, cases, config: TrainConfig, val_cases=(), out_dir=None, log_path=None,
          params: NetworkParams | None = None) -> TrainResult:
    """Train on sampled segments, evaluating validation DSC every ``eval_every`` epochs.

    Randomness is split from ``config.seed`` into independent streams for
    initialization, sampling, dropout and augmentation, so runs are repeatable.
    """
    if not cases:
        raise ValueError("need at least one training case")
    init_ss, sample_ss, drop_ss, aug_ss = np.random.SeedSequence(config.seed).spawn(4)
    if params is None:
        params = init_params(spec, int(init_ss.generate_state(1)[0]))
    sample_rng = np.random.default_rng(sample_ss)
    drop_rng = np.random.default_rng(drop_ss)
    aug_rng = np.random.default_rng(aug_ss)

    cases = list(cases)
    if config.reflect:
        cases += [Case(*augment_reflect(c.image, c.labels, config.reflect_axis),
                       np.flip(c.mask, config.reflect_axis).copy(), c.name + ":reflected", c.spacing)
                  for c in cases]
    prepared = prepare_cases(cases, spec, config.sampler)
    # images are normalized per channel under the mask, so the shift scale is the masked std
    sigma = np.mean([[c.image[ch][c.mask].std() for ch in range(c.image.shape[0])] for c in cases], axis=0)

    opt = config.optimizer
    state = OptimizerState()
    lr = opt.lr
    dsc_history, records, ckpts = [], [], []
    good = params.copy()
    log_file = open(log_path, "w") if log_path else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def emit(rec):
        records.append(rec)
        if log_file:
            log_file.write(format_record(rec) + "\n")
            log_file.flush()

    try:
        for epoch in range(1, config.epochs + 1):
            for b in range(1, config.batches_per_epoch + 1):
                batch = sample_segments(prepared, config.sampler, opt.batch_size, sample_rng)
                blocks = [batch.norm] + ([batch.low] if batch.low is not None else [])
                if config.intensity_shift_std > 0:
                    blocks, _ = augment_intensity_shift(blocks, sigma, aug_rng, config.intensity_shift_std)
                res = forward(params, blocks[0], blocks[1] if len(blocks) > 1 else None, "train", drop_rng)
                loss, g = dense_loss(res.probs, batch.labels)
                if not math.isfinite(loss):
                    emit({"kind": "abort", "epoch": epoch, "batch": b, "loss": loss})
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}", good)
                grads = backward(params, res, g)
                if rmsprop_nesterov_step(params, grads, state, opt, lr):
                    update_running_stats(params, res)
                counts = np.bincount(batch.labels.ravel(), minlength=spec.class_count) / batch.labels.size
                rec = {"kind": "batch", "epoch": epoch, "batch": b, "loss": loss, "lr": lr}
                rec.update({f"capture_{c}": float(v) for c, v in enumerate(counts)})
                emit(rec)
            good = params.copy()
            if val_cases and epoch % config.eval_every == 0:
                dsc = _validation_dsc(params, val_cases, config.tile, config.sampler.fg_classes)
                dsc_history.append(dsc)
                lr = lr_plateau_schedule(dsc_history, opt.lr, opt.patience, opt.min_delta, opt.lr_floor)
                emit({"kind": "eval", "epoch": epoch, "dsc": dsc, "lr": lr})
            if out_dir and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
                path = os.path.join(out_dir, f"epoch_{epoch:03d}.vmd")
                checkpoint.save(params, path, {"epoch": epoch})
                ckpts.append(path)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params, records, ckpts, lr)
