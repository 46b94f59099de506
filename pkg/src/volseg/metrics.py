"""Overlap and surface-distance metrics for binary segmentations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

METRIC_NAMES = ("dsc", "precision", "sensitivity", "specificity", "assd", "hausdorff")


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour in the background; the grid border counts as background."""
    m = np.asarray(mask, bool)
    inner = ndimage.binary_erosion(np.pad(m, 1), structure=ndimage.generate_binary_structure(3, 1))[1:-1, 1:-1, 1:-1]
    return m & ~inner


def _directed(src_surface, dst_surface, spacing):
    # distance from every voxel to the nearest dst surface voxel
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dist[src_surface]


def surface_distances(pred, ref, spacing=(1.0, 1.0, 1.0)):
    """Directed surface distances (pred -> ref, ref -> pred) in mm; None if either mask is empty."""
    sp, sr = surface(pred), surface(ref)
    if not sp.any() or not sr.any():
        return None
    return _directed(sp, sr, spacing), _directed(sr, sp, spacing)


def binary_metrics(pred, ref, spacing=(1.0, 1.0, 1.0), hausdorff_percentile: float | None = None) -> dict:
    """DSC, precision, sensitivity, specificity, ASSD and Hausdorff distance.

    Both empty: overlap scores 1 and distances 0. One empty: DSC 0 and
    distances NaN. ``hausdorff_percentile`` (e.g. 95) replaces the max of each
    directed distance set with that percentile.
    """
    p = np.asarray(pred, bool)
    r = np.asarray(ref, bool)
    if p.shape != r.shape:
        raise ValueError(f"prediction {p.shape} and reference {r.shape} dims differ")
    tp = int((p & r).sum())
    fp = int((p & ~r).sum())
    fn = int((~p & r).sum())
    tn = int(p.size - tp - fp - fn)

    def ratio(a, b, empty):
        return empty if b == 0 else a / b

    out = {
        "dsc": ratio(2 * tp, 2 * tp + fp + fn, 1.0),
        "precision": ratio(tp, tp + fp, 1.0 if fn == 0 else 0.0),
        "sensitivity": ratio(tp, tp + fn, 1.0 if fp == 0 else 0.0),
        "specificity": ratio(tn, tn + fp, 1.0),
    }
    if not p.any() and not r.any():
        out.update(assd=0.0, hausdorff=0.0)
        return out
    d = surface_distances(p, r, spacing)
    if d is None:
        out.update(assd=math.nan, hausdorff=math.nan)
        return out
    a, b = d
    out["assd"] = float((a.sum() + b.sum()) / (len(a) + len(b)))
    if hausdorff_percentile is None:
        out["hausdorff"] = float(max(a.max(), b.max()))
    else:
        out["hausdorff"] = float(max(np.percentile(a, hausdorff_percentile), np.percentile(b, hausdorff_percentile)))
    return out


@dataclass
class MetricReport:
    cases: list = field(default_factory=list)  # (name, metrics dict)

    def add(self, name, metrics):
        self.cases.append((name, metrics))

    def summary(self) -> dict:
        out = {}
        for k in METRIC_NAMES:
            vals = np.array([m[k] for _, m in self.cases], dtype=float)
            vals = vals[np.isfinite(vals)]
            out[k] = {"mean": float(vals.mean()) if len(vals) else math.nan,
                      "std": float(vals.std()) if len(vals) else math.nan}
        return out

    def to_dict(self) -> dict:
        return {"cases": [{"name": n, **m} for n, m in self.cases], "summary": self.summary()}

    def lines(self) -> list[str]:
        rows = [f"{'case':<20}" + "".join(f"{k:>13}" for k in METRIC_NAMES)]
        for name, m in self.cases:
            rows.append(f"{name:<20}" + "".join(f"{m[k]:>13.3f}" for k in METRIC_NAMES))
        s = self.summary()
        for stat in ("mean", "std"):
            rows.append(f"{stat:<20}" + "".join(f"{s[k][stat]:>13.3f}" for k in METRIC_NAMES))
        return rows
