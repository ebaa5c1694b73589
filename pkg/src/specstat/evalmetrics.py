"""Dice and Hausdorff scores per class, aggregated as mean/min/max over scans."""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .core import LabelMap


def _masks(a, b) -> tuple[np.ndarray, np.ndarray]:
    ma = a.mask if isinstance(a, LabelMap) else np.asarray(a, dtype=bool)
    mb = b.mask if isinstance(b, LabelMap) else np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    return ma, mb


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1."""
    ma, mb = _masks(a, b)
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every pixel of src to the nearest pixel of dst
    return ndimage.distance_transform_edt(~dst)[src]


def hausdorff(a, b, percentile: float | None = None) -> float:
    """Symmetric Hausdorff distance in pixels (Euclidean).

    Both empty gives 0; exactly one empty gives the image diagonal. With
    ``percentile`` (e.g. 95) the directed distances are summarised by that
    percentile instead of the maximum.
    """
    ma, mb = _masks(a, b)
    ea, eb = not ma.any(), not mb.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return math.hypot(*ma.shape)
    da, db = _directed(ma, mb), _directed(mb, ma)
    if percentile is None:
        return float(max(da.max(), db.max()))
    return float(max(np.percentile(da, percentile), np.percentile(db, percentile)))


def hausdorff_bruteforce(a, b) -> float:
    """O(|A||B|) reference implementation with the same empty-mask conventions."""
    ma, mb = _masks(a, b)
    pa, pb = np.argwhere(ma), np.argwhere(mb)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.hypot(*ma.shape)
    best_ab = 0.0
    for p in pa:
        best_ab = max(best_ab, np.sqrt(((pb - p) ** 2).sum(axis=1).min()))
    best_ba = 0.0
    for q in pb:
        best_ba = max(best_ba, np.sqrt(((pa - q) ** 2).sum(axis=1).min()))
    return float(max(best_ab, best_ba))


def scan_metrics(pred: Sequence[LabelMap], truth: Sequence[LabelMap], percentile=None) -> dict:
    """{class: {"dice": .., "hausdorff": ..}} matching maps by class."""
    gt = {m.class_id: m for m in truth}
    out = {}
    for p in pred:
        if p.class_id not in gt:
            raise ValueError(f"no ground truth for class {p.class_id.label}")
        g = gt[p.class_id]
        out[p.class_id.label] = {"dice": dice(p, g), "hausdorff": hausdorff(p, g, percentile)}
    return out


def _agg(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "min": float(a.min()), "max": float(a.max())}


def summarize(per_scan: Sequence[Mapping[str, Mapping[str, float]]]) -> dict:
    """Mean/min/max per class and pooled over every (scan, class) pair."""
    if not per_scan:
        raise ValueError("no scans to summarise")
    classes = sorted({c for s in per_scan for c in s})
    summary = {"n_scans": len(per_scan), "hausdorff_units": "pixels", "classes": {}}
    pooled = {"dice": [], "hausdorff": []}
    for c in classes:
        rows = [s[c] for s in per_scan if c in s]
        summary["classes"][c] = {
            "dice": _agg([r["dice"] for r in rows]),
            "hausdorff": _agg([r["hausdorff"] for r in rows]),
        }
        pooled["dice"].extend(r["dice"] for r in rows)
        pooled["hausdorff"].extend(r["hausdorff"] for r in rows)
    summary["pooled"] = {k: _agg(v) for k, v in pooled.items()}
    return summary
