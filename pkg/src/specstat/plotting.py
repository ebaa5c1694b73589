"""Matplotlib figures for CLI reports. Uses the Agg backend; every function writes a PNG."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .core import BScan, LabelMap, ParameterMap, overlay  # noqa: E402

# below / inside / above the parameter range
RANGE_COLORS = ListedColormap(["black", "green", "blue"])

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def parameter_map(pmap: ParameterMap, path, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.2))
    vals = np.ma.masked_invalid(pmap.values)
    im = ax.imshow(vals, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title(title or f"{pmap.family} {pmap.param_name}")
    ax.set_xlabel("patch column")
    ax.set_ylabel("patch row")
    fig.tight_layout()
    return _save(fig, path)


def range_map(codes: np.ndarray, path, title: str = "parameter range") -> Path:
    """Codes 0/1/2 (below/inside/above); invalid cells (-1) are drawn white."""
    fig, ax = plt.subplots(figsize=(5, 4.2))
    data = np.ma.masked_less(np.asarray(codes), 0)
    ax.imshow(data, cmap=RANGE_COLORS, vmin=0, vmax=2, interpolation="nearest")
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def loss_curve(history: Sequence[float], path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(history) + 1), history, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("soft Dice loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def metrics_bars(summary: Mapping, path, title: str = "Dice per class") -> Path:
    """Mean Dice per class with min/max whiskers."""
    classes = sorted(summary["classes"])
    d = [summary["classes"][c]["dice"] for c in classes]
    mean = np.array([x["mean"] for x in d])
    lo = mean - np.array([x["min"] for x in d])
    hi = np.array([x["max"] for x in d]) - mean
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(classes, mean, yerr=[lo, hi], capsize=4, color="tab:blue")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Dice")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def overlay_png(scan: BScan, maps: Sequence[LabelMap], path, alpha: float = 0.5) -> Path:
    rgb = overlay(scan, maps, alpha)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def gof_bars(report: Mapping, path, test: str = "ks") -> Path:
    """Mean p-value per class and family for one goodness-of-fit test."""
    section = report[test]
    classes = sorted(section)
    families = sorted({f for c in classes for f in section[c]})
    width = 0.8 / max(1, len(families))
    x = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, fam in enumerate(families):
        vals = [section[c].get(fam, {}).get("p_mean", np.nan) for c in classes]
        ax.bar(x + i * width, vals, width, label=fam)
    ax.set_xticks(x + width * (len(families) - 1) / 2, classes)
    ax.set_ylabel("mean p-value")
    ax.set_title(f"{test.upper()} goodness of fit")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
