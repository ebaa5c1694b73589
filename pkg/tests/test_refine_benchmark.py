"""Trained-network properties on the phantom benchmark (shares the session-trained models)."""
from __future__ import annotations

import numpy as np
import pytest

from specstat.core import BScan
from specstat.evalmetrics import scan_metrics
from specstat.fitgrid import fit_scan
from specstat.refine import binarize, predict

pytestmark = pytest.mark.slow


def test_training_halves_the_loss(refine_benchmark):
    res = refine_benchmark["D"]
    assert len(res.history) == 40
    assert res.history[-1] <= 0.5 * res.initial_loss


def test_same_geometry_dice(refine_benchmark):
    model = refine_benchmark["D"].model
    dices = []
    for scan, pmaps, gt in refine_benchmark["data"]["same"]:
        pred = binarize(predict(model, None, pmaps, shape=scan.shape))
        dices.extend(m["dice"] for m in scan_metrics(pred, gt).values())
    assert np.mean(dices) >= 0.85


@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_config_d_intensity_scaling(refine_benchmark, lam):
    model = refine_benchmark["D"].model
    for scan, pmaps, _ in refine_benchmark["data"]["shifted"]:
        base = binarize(predict(model, None, pmaps, shape=scan.shape))
        scaled = BScan(scan.pixels * lam)
        other = binarize(predict(model, None, fit_scan(scaled, "gamma"), shape=scan.shape))
        for a, b in zip(base, other):
            assert np.mean(a.mask != b.mask) < 0.02
