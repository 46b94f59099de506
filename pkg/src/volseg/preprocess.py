import numpy as np

from .tensor import Volume

NORM_EPS = 1e-8


def normalize_intensity(volume, mask, eps: float = NORM_EPS):
    """Zero mean, unit variance per channel under ``mask``; voxels outside the mask become 0."""
    vol = volume if isinstance(volume, Volume) else Volume(np.asarray(volume))
    m = np.asarray(mask, bool)
    if m.shape != vol.dims:
        raise ValueError(f"mask dims {m.shape} differ from volume dims {vol.dims}")
    if not m.any():
        raise ValueError("mask is empty")
    out = np.zeros(vol.data.shape, np.float32)
    for c, ch in enumerate(vol.data):
        vals = ch[m].astype(np.float64)
        mu, sd = vals.mean(), vals.std()
        # a constant channel has sd 0: it maps to zeros instead of dividing by ~0
        out[c][m] = (vals - mu) / sd if sd > eps else 0.0
    return Volume(out, vol.spacing, dict(vol.meta))
