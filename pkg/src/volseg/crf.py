"""Fully connected 3D CRF with Gaussian smoothness and appearance kernels.

Pairwise potentials use the Potts model with
``k(f_i, f_j) = w1 k1(f_i, f_j) + w2 k2(f_i, f_j)``: k1 compares positions
(scaled by sigma_alpha), k2 compares positions (sigma_beta) and channel
intensities (sigma_gamma). Inference is mean field; the message passing step is
a Gaussian filter, either exact (quadratic cost) or on a permutohedral lattice.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .lattice import PermutohedralLattice

UNARY_EPS = 1e-7
EXACT_MAX_VOXELS = 20000


class CrfError(RuntimeError):
    pass


@dataclass
class CrfConfig:
    w1: float = 0.02
    w2: float = 0.02
    sigma_alpha: tuple = (2.0, 2.0, 2.0)
    sigma_beta: tuple = (4.0, 4.0, 4.0)
    sigma_gamma: tuple = (1.0,)
    iterations: int = 5
    backend: str = "lattice"
    tol: float = 1e-4
    lattice_passes: int = 4
    lattice_rings: int = 4

    def __post_init__(self):
        self.sigma_alpha = tuple(float(s) for s in np.broadcast_to(self.sigma_alpha, 3))
        self.sigma_beta = tuple(float(s) for s in np.broadcast_to(self.sigma_beta, 3))
        self.sigma_gamma = tuple(float(s) for s in np.atleast_1d(self.sigma_gamma))
        if min(self.sigma_alpha + self.sigma_beta + self.sigma_gamma) <= 0:
            raise ValueError("all kernel widths must be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.backend not in ("exact", "lattice"):
            raise ValueError(f"unknown filter backend {self.backend!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sigma_alpha", "sigma_beta", "sigma_gamma"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrfConfig":
        return cls(**d)


@dataclass
class CrfState:
    q: np.ndarray            # (L, X, Y, Z)
    labels: np.ndarray       # (X, Y, Z)
    unaries: np.ndarray      # (L, X, Y, Z)
    iterations: int = 0
    deltas: list = field(default_factory=list)


def unary_from_posteriors(probs, eps: float = UNARY_EPS) -> np.ndarray:
    return -np.log(np.maximum(np.asarray(probs, dtype=np.float64), eps))


def gaussian_filter_exact(features, values, chunk: int = 1024) -> np.ndarray:
    """``out_i = sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j`` with features already divided by sigma."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    v = np.asarray(values, dtype=np.float64)
    flat = v.reshape(len(f), -1)
    out = np.empty_like(flat)
    sq = (f * f).sum(1)
    for s in range(0, len(f), chunk):
        fi = f[s:s + chunk]
        d2 = sq[s:s + chunk, None] + sq[None, :] - 2 * fi @ f.T
        k = np.exp(-0.5 * np.maximum(d2, 0))
        k[np.arange(len(fi)), np.arange(s, s + len(fi))] = 0
        # column by column, so each class channel is filtered with identical arithmetic
        for c in range(flat.shape[1]):
            out[s:s + chunk, c] = k @ flat[:, c]
    return out.reshape(v.shape)


def kernel_features(shape, image, config: CrfConfig, index=None):
    """Feature vectors of both kernels for the voxels listed in ``index`` (``(N, 3)``; all voxels if None)."""
    if index is None:
        index = np.argwhere(np.ones(shape, bool))
    pos = index.astype(np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.shape[0] != len(config.sigma_gamma):
        raise ValueError(f"image has {img.shape[0]} channels but {len(config.sigma_gamma)} sigma_gamma values")
    inten = img[:, index[:, 0], index[:, 1], index[:, 2]].T
    f1 = pos / np.array(config.sigma_alpha)
    f2 = np.concatenate([pos / np.array(config.sigma_beta), inten / np.array(config.sigma_gamma)], axis=1)
    return f1, f2


class _Filter:
    def __init__(self, features, config: CrfConfig):
        self.f = features
        self.lattice = None
        if config.backend == "lattice":
            self.lattice = PermutohedralLattice(features, config.lattice_passes, config.lattice_rings)
        elif len(features) > EXACT_MAX_VOXELS:
            raise ValueError(f"exact filtering of {len(features)} voxels is too expensive; use the lattice backend")

    def __call__(self, v):
        if self.lattice is not None:
            return self.lattice.filter(v)
        return gaussian_filter_exact(self.f, v)


def _sorted_sum(a):
    # summing in sorted order makes the result independent of class order
    return np.sort(a, axis=1).sum(axis=1, keepdims=True)


def _normalize(neg_energy):
    z = neg_energy - neg_energy.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / _sorted_sum(e)


def mean_field_inference(unaries, image, config: CrfConfig, mask=None) -> CrfState:
    """Mean-field updates ``Q_i(l) ∝ exp(-psi_u(i, l) - sum_m w_m sum_{l' != l} (K_m Q(l'))_i)``.

    ``unaries`` is ``(L, X, Y, Z)``. With a mask, only voxels inside it take part;
    the rest keep the normalized unary distribution.
    """
    u_vol = np.asarray(unaries, dtype=np.float64)
    shape = u_vol.shape[1:]
    sel = np.ones(shape, bool) if mask is None else np.asarray(mask, bool)
    index = np.argwhere(sel)
    u = u_vol[:, sel].T  # (N, L)
    filters = []
    if len(index):
        f1, f2 = kernel_features(shape, image, config, index)
        filters = [(w, _Filter(f, config)) for w, f in ((config.w1, f1), (config.w2, f2)) if w > 0]

    q = _normalize(-u)
    pair = np.zeros_like(u)
    deltas, it = [], 0
    for it in range(1, config.iterations + 1):
        if not filters:
            break
        msg = np.zeros_like(q)
        for w, filt in filters:
            msg += w * filt(q)
        pair = _sorted_sum(msg) - msg
        q_new = _normalize(-u - pair)
        if not np.all(np.isfinite(q_new)):
            bad = int((~np.isfinite(q_new)).any(axis=1).sum())
            raise CrfError(f"mean field produced non-finite values at iteration {it} in {bad} voxels "
                           f"(max |message| {np.abs(msg).max():.3g})")
        delta = float(np.abs(q_new - q).max())
        deltas.append(delta)
        q = q_new
        if delta < config.tol:
            break

    q_vol = _normalize(-u_vol.reshape(len(u_vol), -1).T).T.reshape(u_vol.shape)
    q_vol[:, sel] = q.T
    energy = u_vol.copy()
    energy[:, sel] = (u + pair).T
    labels = np.argmin(energy, axis=0).astype(np.int16)
    return CrfState(q_vol, labels, u_vol, it if filters else 0, deltas)


def gibbs_energy(labels, unaries, image, config: CrfConfig, mask=None) -> float:
    """``sum_i psi_u(z_i) + sum_{i != j} [z_i != z_j] k(f_i, f_j)`` over ordered pairs, exact filtering."""
    labels = np.asarray(labels)
    u_vol = np.asarray(unaries, dtype=np.float64)
    sel = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool)
    index = np.argwhere(sel)
    if len(index) > EXACT_MAX_VOXELS:
        raise ValueError(f"energy of {len(index)} voxels is too expensive to evaluate exactly")
    z = labels[sel]
    unary = float(np.take_along_axis(u_vol[:, sel], z[None].astype(np.int64), axis=0).sum())
    f1, f2 = kernel_features(labels.shape, image, config, index)
    n_labels = u_vol.shape[0]
    onehot = np.eye(n_labels)[z]
    pair = 0.0
    for w, f in ((config.w1, f1), (config.w2, f2)):
        if w > 0:
            k_other = gaussian_filter_exact(f, 1.0 - onehot)  # sum over j of k_ij [z_j != l]
            pair += w * float(np.take_along_axis(k_other, z[:, None].astype(np.int64), axis=1).sum())
    return unary + pair
