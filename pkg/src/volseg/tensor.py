"""Dense volumetric arrays and the numerical kernels the network is built from.

Feature blocks are plain numpy arrays laid out as ``(batch, fm, x, y, z)``.
Convolutions are *valid* (no padding) and unit-stride, implemented as
cross-correlation lowered to a single matrix product over gathered patches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


_AXES = "xyz"


@dataclass
class Volume:
    """Multi-channel 3D grid indexed ``(channel, x, y, z)``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"volume data must be 3D or 4D, got {data.ndim}D")
        if min(data.shape) < 1:
            raise ShapeError(f"volume dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ShapeError(f"spacing must be 3 positive values, got {self.spacing}")
        self.data = data
        self.spacing = spacing

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def _spatial(a: np.ndarray) -> tuple[int, int, int]:
    return tuple(a.shape[-3:])


def _check_kernel(weights: np.ndarray):
    if weights.ndim != 5:
        raise ShapeError(f"kernel must be (fm_out, fm_in, kx, ky, kz), got shape {weights.shape}")
    for axis, k in zip(_AXES, weights.shape[2:]):
        if k < 1 or k % 2 == 0:
            raise ShapeError(f"kernel size along {axis} must be odd and positive, got {k}")


def _im2col(x: np.ndarray, ksize) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Gather every kernel-sized patch into a column: ``(C*kx*ky*kz, B*N)``.

    Filled one kernel offset at a time so each copy reads contiguous z-runs.
    """
    b, c = x.shape[:2]
    kx, ky, kz = ksize
    out_dims = tuple(n - k + 1 for n, k in zip(x.shape[2:], ksize))
    ox, oy, oz = out_dims
    cols = np.empty((c, kx, ky, kz, b, ox, oy, oz), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3, 4)
    for i in range(kx):
        for j in range(ky):
            for k in range(kz):
                cols[:, i, j, k] = xt[:, :, i:i + ox, j:j + oy, k:k + oz]
    return cols.reshape(c * kx * ky * kz, b * ox * oy * oz), out_dims


def conv3d_valid(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid, unit-stride 3D cross-correlation.

    ``x`` is ``(B, C_in, X, Y, Z)`` and ``weights`` is ``(C_out, C_in, kx, ky, kz)``.
    The output has spatial dims ``X - kx + 1`` etc.
    """
    _check_kernel(weights)
    if x.ndim != 5:
        raise ShapeError(f"input must be (batch, fm, x, y, z), got shape {x.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} FMs but kernel expects {weights.shape[1]}")
    ksize = weights.shape[2:]
    for axis, n, k in zip(_AXES, x.shape[2:], ksize):
        if n < k:
            raise ShapeError(f"input size {n} along {axis} is smaller than kernel size {k}")
    b = x.shape[0]
    c_out = weights.shape[0]
    if ksize == (1, 1, 1):
        out = np.einsum("oc,bcxyz->boxyz", weights[:, :, 0, 0, 0], x, optimize=True)
    else:
        cols, out_dims = _im2col(x, ksize)
        out = weights.reshape(c_out, -1) @ cols
        out = out.reshape((c_out, b) + out_dims).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1).astype(out.dtype, copy=False)
    return np.ascontiguousarray(out)


def conv3d_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of :func:`conv3d_valid` w.r.t. input, kernel and bias.

    Returns ``(grad_input, grad_kernel, grad_bias)``; ``grad_input`` is None when
    ``need_input_grad`` is false (first layer).
    """
    _check_kernel(weights)
    ksize = weights.shape[2:]
    expected = tuple(n - k + 1 for n, k in zip(x.shape[2:], ksize))
    if grad_out.shape != (x.shape[0], weights.shape[0]) + expected:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(x.shape[0], weights.shape[0]) + expected}"
        )
    c_out, c_in = weights.shape[:2]
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    if ksize == (1, 1, 1):
        grad_w = np.einsum("boxyz,bcxyz->oc", grad_out, x, optimize=True).reshape(weights.shape)
        grad_x = None
        if need_input_grad:
            grad_x = np.einsum("oc,boxyz->bcxyz", weights[:, :, 0, 0, 0], grad_out, optimize=True)
        return grad_x, grad_w, grad_bias

    cols, _ = _im2col(x, ksize)
    g2 = grad_out.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
    grad_w = (g2 @ cols.T).reshape(weights.shape)
    grad_x = None
    if need_input_grad:
        # scatter-add of the column gradients (the transpose of _im2col)
        kx, ky, kz = ksize
        ox, oy, oz = expected
        dcols = (weights.reshape(c_out, -1).T @ g2).reshape(c_in, kx, ky, kz, x.shape[0], ox, oy, oz)
        gxt = np.zeros((c_in, x.shape[0]) + x.shape[2:], dtype=dcols.dtype)
        for i in range(kx):
            for j in range(ky):
                for k in range(kz):
                    gxt[:, :, i:i + ox, j:j + oy, k:k + oz] += dcols[:, i, j, k]
        grad_x = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3, 4))
    return grad_x, grad_w, grad_bias


def prelu(x: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    if slopes.shape != (x.shape[1],):
        raise ShapeError(f"expected {x.shape[1]} PReLU slopes, got {slopes.shape}")
    a = slopes.reshape(1, -1, 1, 1, 1).astype(x.dtype, copy=False)
    return np.where(x > 0, x, a * x)


def prelu_backward(x: np.ndarray, slopes: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_slopes)``."""
    if slopes.shape != (x.shape[1],):
        raise ShapeError(f"expected {x.shape[1]} PReLU slopes, got {slopes.shape}")
    pos = x > 0
    a = slopes.reshape(1, -1, 1, 1, 1).astype(x.dtype, copy=False)
    grad_x = np.where(pos, grad_out, a * grad_out)
    grad_a = np.where(pos, 0, x * grad_out).sum(axis=(0, 2, 3, 4))
    return grad_x, grad_a


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Position-wise softmax over the FM axis (axis 1)."""
    if logits.shape[1] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def upsample_repeat(block: np.ndarray, factor: int) -> np.ndarray:
    """Replicate each voxel ``factor**3`` times over the last three axes."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return block
    out = block
    for axis in (-3, -2, -1):
        out = np.repeat(out, factor, axis=axis)
    return out


def upsample_repeat_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad
    *lead, x, y, z = grad.shape
    g = grad.reshape(*lead, x // factor, factor, y // factor, factor, z // factor, factor)
    n = len(lead)
    return g.sum(axis=(n + 1, n + 3, n + 5))


def _block_sum(a: np.ndarray, factor: int, axis: int) -> np.ndarray:
    starts = np.arange(0, a.shape[axis], factor)
    return np.add.reduceat(a, starts, axis=axis)


def downsample_block_average(vol, factor: int):
    """Average non-overlapping ``factor**3`` blocks of the last three axes.

    Border blocks that are only partially inside the grid average the voxels
    that exist. Accepts a :class:`Volume` or an ndarray and returns the same kind.
    """
    if factor < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {factor}")
    if isinstance(vol, Volume):
        data = downsample_block_average(vol.data, factor)
        spacing = tuple(s * factor for s in vol.spacing)
        return Volume(data, spacing, dict(vol.meta))
    a = np.asarray(vol)
    if factor == 1:
        return a.copy()
    work = a.astype(np.float64, copy=False)
    counts = np.ones(a.shape[-3:])
    for axis in (-3, -2, -1):
        work = _block_sum(work, factor, axis)
        counts = _block_sum(counts, factor, axis)
    out = work / counts
    return out.astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)


def center_offsets(src_dims, target_dims) -> tuple[int, int, int]:
    offs = []
    for axis, s, t in zip(_AXES, src_dims, target_dims):
        if t > s:
            raise ShapeError(f"crop target {t} exceeds source size {s} along {axis}")
        offs.append((s - t) // 2)
    return tuple(offs)


def crop_center(block: np.ndarray, target_dims) -> np.ndarray:
    """Centered crop of the last three axes; odd excess drops the extra voxel at the high end."""
    target_dims = tuple(int(t) for t in target_dims)
    ox, oy, oz = center_offsets(_spatial(block), target_dims)
    tx, ty, tz = target_dims
    return block[..., ox:ox + tx, oy:oy + ty, oz:oz + tz]


def crop_center_backward(grad: np.ndarray, src_dims) -> np.ndarray:
    offs = center_offsets(src_dims, _spatial(grad))
    pad = [(0, 0)] * (grad.ndim - 3) + [
        (o, s - o - t) for o, s, t in zip(offs, src_dims, _spatial(grad))
    ]
    return np.pad(grad, pad)


def concat_fms(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or _spatial(a) != _spatial(b):
        raise ShapeError(f"cannot concatenate blocks of shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)
