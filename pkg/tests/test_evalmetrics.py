from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from specstat.core import ClassId, LabelMap
from specstat.evalmetrics import dice, hausdorff, hausdorff_bruteforce, scan_metrics, summarize


def block(shape, r0, c0, h, w):
    m = np.zeros(shape, bool)
    m[r0:r0 + h, c0:c0 + w] = True
    return m


def test_dice_examples():
    a = block((6, 6), 1, 1, 2, 2)
    assert dice(a, a) == 1.0
    assert dice(a, block((6, 6), 4, 4, 2, 2)) == 0.0
    assert dice(a, block((6, 6), 1, 2, 2, 2)) == 0.5
    z = np.zeros((6, 6), bool)
    assert dice(z, z) == 1.0
    assert dice(z, a) == 0.0


def test_dice_matches_pixel_count(rng):
    for _ in range(50):
        a, b = rng.random((2, 20, 30)) < rng.random()
        inter = sum(1 for i in range(20) for j in range(30) if a[i, j] and b[i, j])
        total = int(a.sum() + b.sum())
        assert dice(a, b) == (1.0 if total == 0 else 2 * inter / total)


def test_hausdorff_examples():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff(a, b) == 5.0
    assert hausdorff(a, a) == 0.0
    z = np.zeros((8, 8), bool)
    assert hausdorff(z, z) == 0.0
    assert hausdorff(z, a) == math.hypot(8, 8)
    assert hausdorff(a, z) == math.hypot(8, 8)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2), bool), np.zeros((2, 3), bool))
    with pytest.raises(ValueError):
        hausdorff(np.zeros((2, 2), bool), np.zeros((3, 2), bool))


def test_hausdorff_matches_bruteforce_200_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        h, w = rng.integers(1, 65, size=2)
        da, db = rng.random(2) * 0.3
        a, b = rng.random((h, w)) < da, rng.random((h, w)) < db
        assert hausdorff(a, b) == hausdorff_bruteforce(a, b)


def test_percentile_variant_bounded_by_max(rng):
    a, b = rng.random((2, 40, 40)) < 0.1
    assert hausdorff(a, b, percentile=95) <= hausdorff(a, b)
    assert hausdorff(a, b, percentile=100) == hausdorff(a, b)


masks = arrays(bool, (12, 12), elements=st.booleans())


@given(masks, masks)
def test_symmetry(a, b):
    assert dice(a, b) == dice(b, a)
    assert hausdorff(a, b) == hausdorff(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


@given(masks, masks, masks)
def test_triangle_inequality(a, b, c):
    if not (a.any() and b.any() and c.any()):
        return
    assert hausdorff(a, c) <= hausdorff(a, b) + hausdorff(b, c) + 1e-12


def test_scan_metrics_and_pred_equals_gt():
    gt = [LabelMap(ClassId.ILM, block((10, 10), 0, 0, 3, 10)),
          LabelMap(ClassId.RPE, block((10, 10), 5, 0, 2, 10)),
          LabelMap(ClassId.TOOL, np.zeros((10, 10), bool))]
    per = scan_metrics(gt, gt)
    assert per == {c: {"dice": 1.0, "hausdorff": 0.0} for c in ("ilm", "rpe", "tool")}
    s = summarize([per, per])
    assert s["pooled"]["dice"]["mean"] == 1.0 and s["pooled"]["hausdorff"]["mean"] == 0.0
    with pytest.raises(ValueError):
        scan_metrics(gt, gt[:1])


def test_summarize_examples():
    single = summarize([{"ilm": {"dice": 0.7, "hausdorff": 3.0}}])
    d = single["classes"]["ilm"]["dice"]
    assert d["mean"] == d["min"] == d["max"] == 0.7
    s = summarize([{"ilm": {"dice": 0.8, "hausdorff": 2.0}}, {"ilm": {"dice": 1.0, "hausdorff": 4.0}}])
    assert s["classes"]["ilm"]["dice"] == pytest.approx({"mean": 0.9, "min": 0.8, "max": 1.0})
    assert s["n_scans"] == 2 and s["hausdorff_units"] == "pixels"
    json.dumps(s)


def test_pooled_is_mean_over_pairs():
    # class means 0.5 and 0.9 (unweighted 0.7); pairs give (0.4 + 0.6 + 0.9) / 3
    s = summarize([{"ilm": {"dice": 0.4, "hausdorff": 1.0}, "rpe": {"dice": 0.9, "hausdorff": 1.0}},
                   {"ilm": {"dice": 0.6, "hausdorff": 1.0}}])
    assert s["pooled"]["dice"]["mean"] == pytest.approx(1.9 / 3)
    for c in s["classes"].values():
        for k in ("dice", "hausdorff"):
            assert c[k]["min"] <= c[k]["mean"] <= c[k]["max"]


def test_summarize_empty():
    with pytest.raises(ValueError):
        summarize([])
