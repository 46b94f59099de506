"""Whole-volume segmentation by tiled dense inference, ensembling and label extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import (
    NetworkParams,
    as_triple,
    extract_inputs,
    forward,
    input_layout,
    receptive_field,
)
from .tensor import Volume


@dataclass
class SoftSegmentation:
    """Per-voxel class posteriors ``(C, X, Y, Z)``."""

    probs: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return self.probs.shape[0]

    def volume(self) -> Volume:
        return Volume(self.probs, self.spacing, dict(self.provenance))


def _image_array(image):
    if isinstance(image, Volume):
        return image.data, image.spacing
    a = np.asarray(image)
    return (a[None] if a.ndim == 3 else a), (1.0, 1.0, 1.0)


def effective_tile(params: NetworkParams, tile) -> tuple:
    """Tile output dims, rounded up to a multiple of the downsampling factor for dual-pathway nets.

    With aligned tiles every tile sees the same low-resolution block grid, which
    makes the result independent of the tiling.
    """
    tile = as_triple(tile)
    if min(tile) < 1:
        raise ValueError(f"tile dims must be positive, got {tile}")
    spec = params.spec
    if spec.low_res_pathway:
        f = spec.downsample_factor
        tile = tuple(-(-t // f) * f for t in tile)
    return tile


def segment_volume(params: NetworkParams, image, tile=(36, 36, 36), spacing=None, batch_tiles: int = 1) -> SoftSegmentation:
    """Posteriors for every voxel of ``image`` (``(C, X, Y, Z)`` array or Volume).

    The image is mirror-padded so border voxels get a full receptive field, then
    covered by non-overlapping output tiles.
    """
    data, sp = _image_array(image)
    spacing = spacing or sp
    spec = params.spec
    if data.shape[0] != spec.input_channels:
        raise ValueError(f"image has {data.shape[0]} channels but the network expects {spec.input_channels}")
    tile = effective_tile(params, tile)
    dims = data.shape[1:]
    layout = input_layout(spec, tile)
    counts = [-(-d // t) for d, t in zip(dims, tile)]
    before = layout.margin_before
    after = tuple(m + n * t - d for m, n, t, d in zip(layout.margin_after, counts, tile, dims))
    padded = np.pad(data.astype(params.dtype), [(0, 0)] + list(zip(before, after)), mode="reflect")
    out = np.empty((spec.class_count,) + tuple(n * t for n, t in zip(counts, tile)), dtype=params.dtype)
    origins = [(i * tile[0], j * tile[1], k * tile[2])
               for i in range(counts[0]) for j in range(counts[1]) for k in range(counts[2])]
    for start in range(0, len(origins), batch_tiles):
        chunk = origins[start:start + batch_tiles]
        inputs = [extract_inputs(padded, tuple(o + b for o, b in zip(org, before)), layout) for org in chunk]
        norm = np.concatenate([i[0] for i in inputs])
        low = np.concatenate([i[1] for i in inputs]) if inputs[0][1] is not None else None
        probs = forward(params, norm, low, "infer").probs
        for p, (x, y, z) in zip(probs, chunk):
            out[:, x:x + tile[0], y:y + tile[1], z:z + tile[2]] = p
    probs = np.ascontiguousarray(out[:, :dims[0], :dims[1], :dims[2]])
    return SoftSegmentation(probs, tuple(spacing), {"tile": list(tile), "seed": params.seed})


def ensemble_average(members) -> SoftSegmentation:
    members = list(members)
    if not members:
        raise ValueError("ensemble needs at least one member")
    shape = members[0].probs.shape
    for m in members[1:]:
        if m.probs.shape != shape:
            raise ValueError(f"ensemble members differ in shape: {shape} vs {m.probs.shape}")
    acc = np.zeros(shape, np.float64)
    for m in members:
        acc += m.probs
    prov = {"members": [m.provenance for m in members]}
    return SoftSegmentation((acc / len(members)).astype(members[0].probs.dtype), members[0].spacing, prov)


def argmax_labels(soft) -> np.ndarray:
    """Most probable class per voxel; ties go to the lower class id."""
    probs = soft.probs if isinstance(soft, SoftSegmentation) else np.asarray(soft)
    return np.argmax(probs, axis=0).astype(np.int16)


def merge_foreground(soft: SoftSegmentation, class_set) -> SoftSegmentation:
    """Binary map: foreground probability is the sum over ``class_set``."""
    class_set = sorted(set(int(c) for c in class_set))
    if not class_set:
        raise ValueError("class set is empty")
    bad = [c for c in class_set if c <= 0 or c >= soft.class_count]
    if bad:
        raise ValueError(f"invalid foreground class ids {bad} for {soft.class_count} classes")
    fg = soft.probs[class_set].sum(axis=0)
    return SoftSegmentation(np.stack([1 - fg, fg]), soft.spacing, dict(soft.provenance, merged=class_set))


def layer_names(params: NetworkParams) -> list[str]:
    """Layers addressable by :func:`dump_feature_maps`, normal pathway first (1-based in selectors)."""
    return [n for n, _, _ in params.spec.layers() if not n.startswith("low.")]


def dump_feature_maps(params: NetworkParams, image, layers) -> dict:
    """Activations of selected layers over the valid region of ``image``.

    ``layers`` holds layer names (``"norm.0"``, ``"fc.1"``, ``"cls"``) or 1-based
    positions in :func:`layer_names`. Returns ``{name: [Volume per FM]}``; each
    volume's ``meta["offset"]`` is the image voxel its first element is centered on.
    The classification layer gives pre-softmax logits.
    """
    data, spacing = _image_array(image)
    names = layer_names(params)
    chosen = []
    for sel in layers:
        if isinstance(sel, (int, np.integer)) or (isinstance(sel, str) and sel.isdigit()):
            i = int(sel)
            if not 1 <= i <= len(names):
                raise ValueError(f"layer index {i} out of range 1..{len(names)}")
            chosen.append(names[i - 1])
        elif sel in names:
            chosen.append(sel)
        else:
            raise ValueError(f"unknown layer {sel!r}; choose from {', '.join(names)}")
    spec = params.spec
    phi = np.array(receptive_field(spec)[-1])
    out_dims = tuple(int(v) for v in np.array(data.shape[1:]) - phi + 1)
    layout = input_layout(spec, out_dims)
    before = layout.margin_before
    padded = np.pad(data.astype(params.dtype), [(0, 0)] + list(zip(before, layout.margin_after)), mode="reflect")
    half = (phi - 1) // 2
    norm, low = extract_inputs(padded, tuple(int(h + b) for h, b in zip(half, before)), layout)
    res = forward(params, norm, low, "infer")
    phis = dict(zip(names, receptive_field(spec)))
    out = {}
    for name in chosen:
        act = res.activations[name][0]
        offset = [int((p - 1) // 2) for p in phis[name]]
        out[name] = [Volume(fm, spacing, {"layer": name, "fm": i, "offset": offset}) for i, fm in enumerate(act)]
    return out
