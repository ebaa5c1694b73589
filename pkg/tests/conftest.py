from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict(request):
    """Print one PASS/FAIL line per acceptance criterion, then assert it.

    Lines go through the terminal reporter so they show without ``-s``.
    """
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def report(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {title}" + (f" ({detail})" if detail else "")
        if reporter is not None:
            reporter.ensure_newline()
            reporter.write_line(line)
        else:
            print(line, flush=True)
        assert ok, line
    return report


@pytest.fixture(scope="session")
def refine_benchmark():
    """Configs A and D trained on train_geometry phantoms, with held-out data for both presets.

    Shared by the acceptance suite and the refine benchmark tests so the
    networks are trained once per session.
    """
    import time

    from specstat.fitgrid import fit_scan
    from specstat.phantom import default_config, volume
    from specstat.refine import TrainSpec, assemble_input, train

    t0 = time.perf_counter()

    def scans(preset, seeds, per_eye):
        out = []
        for s in seeds:
            for scan, gt in volume(default_config(preset), s, per_eye):
                out.append((scan, fit_scan(scan, "gamma"), gt))
        return out

    data = {
        "train": scans("train_geometry", (100, 101), 5),
        "same": scans("train_geometry", (500,), 5),
        "shifted": scans("shifted_geometry", (999,), 5),
    }
    results = {"data": data, "timing": {"data_s": time.perf_counter() - t0}}
    for cfg in ("A", "D"):
        t = time.perf_counter()
        items = [(assemble_input(cfg, s, p), g) for s, p, g in data["train"]]
        results[cfg] = train(cfg, TrainSpec(seed=0), items)
        results["timing"][cfg] = time.perf_counter() - t
    results["timing"]["total_s"] = time.perf_counter() - t0
    return results
