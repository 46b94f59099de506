"""Synthetic multi-channel volumes with ellipsoidal lesions, for tests and desk-scale training."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .network import as_triple


@dataclass
class SynthConfig:
    dims: tuple = (64, 64, 64)
    channels: int = 2
    lesion_fraction: float = 0.02   # of brain-mask voxels
    min_lesions: int = 1
    max_lesions: int = 4
    nested: bool = False            # adds a core class (label 2) inside every lesion
    core_scale: float = 0.55
    noise_std: float = 0.35
    noise_smoothing: float = 1.5
    lesion_offset: tuple = (1.0, 0.6)
    core_offset: tuple = (0.5, -1.0)
    brain_contrast: tuple = (1.0, 0.8)

    def __post_init__(self):
        self.dims = as_triple(self.dims)
        self.lesion_offset = tuple(np.resize(np.asarray(self.lesion_offset, float), self.channels))
        self.core_offset = tuple(np.resize(np.asarray(self.core_offset, float), self.channels))
        self.brain_contrast = tuple(np.resize(np.asarray(self.brain_contrast, float), self.channels))
        if not 0 < self.lesion_fraction < 0.5:
            raise ValueError("lesion_fraction must be in (0, 0.5)")
        if not 1 <= self.min_lesions <= self.max_lesions:
            raise ValueError("need 1 <= min_lesions <= max_lesions")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SyntheticCase:
    image: np.ndarray     # (C, X, Y, Z) float32
    labels: np.ndarray    # (X, Y, Z) int16
    mask: np.ndarray      # (X, Y, Z) bool
    name: str = ""
    info: dict = field(default_factory=dict)


def _grid(dims):
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))


def _ellipsoid(grid, center, radii, rot):
    d = np.tensordot(rot.T, grid - np.asarray(center)[:, None, None, None], axes=1)
    return ((d / np.asarray(radii)[:, None, None, None]) ** 2).sum(0) <= 1.0


def _rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def make_case(config: SynthConfig, rng, name: str = "") -> SyntheticCase:
    dims = np.array(config.dims)
    grid = _grid(config.dims)
    mid = (dims - 1) / 2
    brain_r = dims * 0.42 * rng.uniform(0.9, 1.0, 3)
    brain = _ellipsoid(grid, mid, brain_r, np.eye(3))

    n = int(rng.integers(config.min_lesions, config.max_lesions + 1))
    centers, shapes, rots = [], [], []
    for _ in range(n):
        # keep lesion centers well inside the brain
        u = rng.standard_normal(3)
        u *= rng.uniform(0, 0.6) / np.linalg.norm(u)
        centers.append(mid + u * brain_r)
        shapes.append(rng.uniform(0.6, 1.4, 3) * rng.uniform(0.7, 1.3))
        rots.append(_rotation(rng))

    def lesions(scale):
        m = np.zeros(config.dims, bool)
        for c, s, r in zip(centers, shapes, rots):
            m |= _ellipsoid(grid, c, s * scale, r)
        return m & brain

    target = config.lesion_fraction * brain.sum()
    lo, hi = 0.0, float(dims.max())
    for _ in range(30):
        s = 0.5 * (lo + hi)
        if lesions(s).sum() < target:
            lo = s
        else:
            hi = s
    scale = hi
    lesion = lesions(scale)
    labels = lesion.astype(np.int16)
    core = np.zeros_like(lesion)
    if config.nested:
        for c, s, r in zip(centers, shapes, rots):
            core |= _ellipsoid(grid, c, s * scale * config.core_scale, r)
        # the core must sit strictly inside the lesion, away from its boundary
        core &= ndimage.binary_erosion(lesion)
        labels[core] = 2

    image = np.zeros((config.channels,) + tuple(config.dims), np.float32)
    for ch in range(config.channels):
        noise = ndimage.gaussian_filter(rng.standard_normal(config.dims), config.noise_smoothing)
        noise *= config.noise_std / noise.std()
        img = brain * config.brain_contrast[ch] + lesion * config.lesion_offset[ch] + core * config.core_offset[ch]
        image[ch] = (img + noise).astype(np.float32)
    info = {"lesions": n, "scale": scale, "fraction": float(lesion.sum() / brain.sum())}
    return SyntheticCase(image, labels, brain, name, info)


def generate_synthetic_dataset(config: SynthConfig, seed: int, cases: int = 20) -> list[SyntheticCase]:
    """Deterministic for a given (config, seed, cases)."""
    streams = np.random.SeedSequence(seed).spawn(cases)
    return [make_case(config, np.random.default_rng(s), f"case{i:03d}") for i, s in enumerate(streams)]
