"""Acceptance criteria 1-9. Each test prints a single PASS/FAIL line."""
from __future__ import annotations

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from specstat.core import BScan, ClassId
from specstat.dist import DistParams, Family, cdf, mle_fit, sample
from specstat.evalmetrics import dice, hausdorff, hausdorff_bruteforce, scan_metrics
from specstat.fitgrid import fit_scan
from specstat.phantom import default_config, generate, volume
from specstat.refine import assemble_input, binarize, infer, soft_dice_loss
from specstat.stats import anova_f, cvm_statistic, gof_report, ks_pvalue, ks_statistic, levene
from specstat.weaklabel import ForestHyper, PatchDataset, build_dataset, classify_patches, patch_scores, \
    train_forest, majority_labels, patch_class_counts

TRUTH = {
    Family.GAMMA: DistParams.of("gamma", k=3.0, theta=2.0),
    Family.RAYLEIGH: DistParams.of("rayleigh", sigma=1.5),
    Family.NORMAL: DistParams.of("normal", mu=1.0, sigma=2.0),
    Family.BURR: DistParams.of("burr", c=3.0, d=2.0),
    Family.LOGNORM: DistParams.of("lognorm", s=0.5, mu_log=0.3),
    Family.NAKAGAMI: DistParams.of("nakagami", nu=2.0, omega=3.0),
}


def uniform_cdf(x):
    return np.clip(x, 0.0, 1.0)


def test_1_hand_computed_statistics(verdict):
    t = time.perf_counter()
    ks = ks_statistic([0.1, 0.4, 0.7], uniform_cdf)
    cvm = cvm_statistic([0.1, 0.4, 0.7], uniform_cdf)
    f = anova_f([[1, 2, 3], [4, 5, 6]]).statistic
    w = levene([[1, 2, 3], [2, 4, 6]], trim_fraction=0.0).statistic
    elapsed = time.perf_counter() - t
    # 0.3 is not representable; the defining formula gives 1 - 0.7 in float64
    ok = (abs(ks - 0.3) <= 1e-15 and ks == 1 - 0.7 and abs(cvm - 0.06) <= 1e-12
          and abs(f - 13.5) <= 1e-9 and abs(w - 0.8) <= 1e-9 and elapsed < 1.0)
    verdict(1, "hand-computed statistics", ok, f"D={ks!r} W={cvm!r} F={f!r} L={w!r} {elapsed * 1e3:.1f} ms")


def test_2_mle_recovery(verdict):
    t = time.perf_counter()
    worst, iters = {}, {}
    for fam, true in TRUTH.items():
        tol = 0.10 if fam is Family.BURR else 0.05
        errs = []
        for seed in range(20):
            res = mle_fit(fam, sample(fam, true, seed, 100_000))
            errs.append(max(abs(a - b) / abs(b) for a, b in zip(res.params.values, true.values)))
            if fam in (Family.GAMMA, Family.NAKAGAMI):
                iters[fam.value] = max(iters.get(fam.value, 0), res.iterations)
            assert res.converged
        worst[fam.value] = (max(errs), tol)
    elapsed = time.perf_counter() - t
    ok = all(e <= tol for e, tol in worst.values()) and max(iters.values()) <= 30 and elapsed < 60
    detail = ", ".join(f"{k} {e:.4f}" for k, (e, _) in worst.items())
    verdict(2, "MLE recovery, 6 families x 20 seeds", ok,
            f"max rel err: {detail}; newton iters {iters}; {elapsed:.1f} s")


def test_3_pit_and_gof(verdict):
    t = time.perf_counter()
    pit = {}
    for i, (fam, true) in enumerate(TRUTH.items()):
        u = cdf(fam, true, sample(fam, true, 77 + i, 10_000))
        d = ks_statistic(u, uniform_cdf)
        pit[fam.value] = ks_pvalue(d, u.size)
    rpe = []
    for scan, gt in volume(default_config("train_geometry"), 31, 5):
        rpe.append(scan.pixels[gt[1].mask])
    rep = gof_report({"rpe": rpe}, ["gamma", "rayleigh"], seed=0, max_samples=2000).to_dict()
    means = {test: (rep[test]["rpe"]["gamma"]["p_mean"], rep[test]["rpe"]["rayleigh"]["p_mean"])
             for test in ("ks", "cvm")}
    elapsed = time.perf_counter() - t
    ok = all(p > 0.001 for p in pit.values()) and all(g > r for g, r in means.values()) and elapsed < 120
    verdict(3, "PIT uniformity and Gamma beats Rayleigh on RPE", ok,
            f"min PIT p={min(pit.values()):.3g}; mean p gamma/rayleigh ks={means['ks'][0]:.3f}/"
            f"{means['ks'][1]:.2g} cvm={means['cvm'][0]:.3f}/{means['cvm'][1]:.2g}; {elapsed:.1f} s")


def test_4_scale_invariance_of_shape(verdict):
    t = time.perf_counter()
    scan, _ = generate(default_config("train_geometry"), 5)
    k0, th0 = fit_scan(scan, "gamma")
    worst_k, worst_th, same_valid = 0.0, 0.0, True
    for lam in (0.5, 2.0):
        k, th = fit_scan(BScan(scan.pixels * lam), "gamma")
        v = k0.valid & k.valid
        same_valid &= bool(np.array_equal(k0.valid, k.valid))
        worst_k = max(worst_k, float(np.max(np.abs(k.values[v] - k0.values[v]))))
        worst_th = max(worst_th, float(np.max(np.abs(th.values[v] / (lam * th0.values[v]) - 1))))
    elapsed = time.perf_counter() - t
    ok = worst_k < 1e-6 and worst_th <= 1e-6 and same_valid and elapsed < 30
    verdict(4, "scale invariance of the Gamma shape map", ok,
            f"max |dk|={worst_k:.2e}, max theta rel err={worst_th:.2e}; {elapsed:.1f} s")


def test_5_weak_label_quality(verdict):
    t = time.perf_counter()
    cfg = default_config("train_geometry")
    parts = []
    for eye in range(5):
        for scan, gt in volume(cfg, 200 + eye, 10):
            parts.append(build_dataset(fit_scan(scan, "gamma"), gt))
    forest = train_forest(PatchDataset.concat(parts), ForestHyper(), seed=0)
    preds, truth = [], []
    for scan, gt in volume(cfg, 300, 5):
        maps = fit_scan(scan, "gamma")
        grid = classify_patches(forest, maps)
        labels = majority_labels(patch_class_counts(gt, grid.shape, 7))
        valid = maps[0].valid
        preds.append(grid[valid])
        truth.append(labels[valid])
    scores = patch_scores(np.concatenate(preds), np.concatenate(truth))
    elapsed = time.perf_counter() - t
    ok = all(s["accuracy"] >= 0.90 and s["dice"] >= 0.80 for s in scores.values()) and elapsed < 120
    detail = "; ".join(f"{c} acc={s['accuracy']:.3f} dice={s['dice']:.3f}" for c, s in scores.items())
    verdict(5, "weak-label patch accuracy and Dice", ok, f"{detail}; {elapsed:.1f} s")


def test_6_metric_oracles(verdict):
    rng = np.random.default_rng(6)
    exact = True
    for _ in range(200):
        h, w = rng.integers(1, 65, size=2)
        a, b = rng.random((2, h, w)) < rng.random(2)[:, None, None] * 0.3
        exact &= hausdorff(a, b) == hausdorff_bruteforce(a, b)
    counts_ok = True
    for _ in range(50):
        a, b = rng.random((2, 17, 23)) < 0.4
        inter = sum(int(a[i, j] and b[i, j]) for i in range(17) for j in range(23))
        counts_ok &= dice(a, b) == 2 * inter / (int(a.sum()) + int(b.sum()))
    p = torch.tensor(rng.random((3, 4, 4)), dtype=torch.float64, requires_grad=True)
    tgt = torch.tensor((rng.random((3, 4, 4)) < 0.5).astype(float))
    soft_dice_loss(p, tgt).backward()
    g = p.grad.numpy()
    fd = np.zeros_like(g)
    base = p.detach().numpy()
    for idx in np.ndindex(*g.shape):
        up, dn = base.copy(), base.copy()
        up[idx] += 1e-6
        dn[idx] -= 1e-6
        fd[idx] = (float(soft_dice_loss(torch.from_numpy(up), tgt))
                   - float(soft_dice_loss(torch.from_numpy(dn), tgt))) / 2e-6
    rel = float(np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1e-12)))
    ok = exact and counts_ok and rel <= 1e-4
    verdict(6, "metric oracles", ok, f"hausdorff exact={exact}, dice counts={counts_ok}, grad rel err={rel:.2e}")


def _mean_dice(model, items, cfg):
    per = []
    for scan, pmaps, gt in items:
        x = assemble_input(cfg, scan, pmaps, norm=model.norm)
        per.append([m["dice"] for m in scan_metrics(binarize(infer(model, x)), gt).values()])
    return float(np.mean(per)), np.mean(per, axis=0)


@pytest.mark.slow
def test_7_config_ordering_on_shifted_geometry(verdict, refine_benchmark):
    shifted = refine_benchmark["data"]["shifted"]
    d, d_cls = _mean_dice(refine_benchmark["D"].model, shifted, "D")
    a, a_cls = _mean_dice(refine_benchmark["A"].model, shifted, "A")
    minutes = refine_benchmark["timing"]["total_s"] / 60
    ok = d >= 0.85 and d - a >= 0.15 and minutes < 20
    verdict(7, "config D beats A on shifted geometry", ok,
            f"Dice D={d:.3f} {np.round(d_cls, 3).tolist()}, A={a:.3f} {np.round(a_cls, 3).tolist()}, "
            f"gap={d - a:.3f}; {minutes:.1f} min")


def _tree(d: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name.endswith("manifest.json"):
                m = json.loads(data)
                m.pop("duration_s")
                data = json.dumps(m, sort_keys=True).encode()
            out[str(p.relative_to(d))] = data
    return out


def test_8_cli_determinism(verdict, tmp_path, monkeypatch):
    from specstat.cli import main
    from test_cli import small_config

    monkeypatch.chdir(tmp_path)
    Path("ph.json").write_text(small_config().to_json())
    steps = [
        ("phantom", ["phantom", "ph.json", "--count", "4", "--per-eye", "2", "--out", "ph", "--seed", "3",
                     "--figures"], "ph"),
        ("fit", ["fit", "--in", "ph/scans", "--family", "gamma,rayleigh", "--out", "fit", "--figures"], "fit"),
        ("gof", ["gof", "--scans", "ph/scans", "--labels", "ph/labels", "--families", "gamma,rayleigh",
                 "--max-samples", "200", "--out", "rep/gof.json", "--figures"], "rep"),
        ("varstats", ["varstats", "--scans", "ph/scans", "--labels", "ph/labels", "--out", "var/var.json"], "var"),
        ("weak train", ["weak", "train", "--params", "fit", "--labels", "ph/labels", "--model", "forest/f.json",
                        "--trees", "4"], "forest"),
        ("weak apply", ["weak", "apply", "--params", "fit", "--scans", "ph/scans", "--model", "forest/f.json",
                        "--out", "weak", "--figures"], "weak"),
        ("refine train", ["refine", "train", "--config", "D", "--params", "fit", "--labels", "ph/labels",
                          "--model", "net/d.bin", "--epochs", "2", "--figures"], "net"),
        ("refine infer", ["refine", "infer", "--params", "fit", "--model", "net/d.bin", "--out", "pred"], "pred"),
        ("eval", ["eval", "--pred", "pred", "--gt", "ph/labels", "--out", "metrics/m.json", "--figures"],
         "metrics"),
        ("compare", ["compare", "D=metrics/m.json", "W=metrics/m.json", "--out", "cmp/table.csv"], "cmp"),
    ]
    failed = []
    for name, argv, out in steps:
        assert main(argv) == 0, name
        before = _tree(Path(out))
        manifests = sorted(Path(out).rglob("*manifest.json"))
        keep = tmp_path / "keep"
        shutil.rmtree(keep, ignore_errors=True)
        keep.mkdir()
        for i, m in enumerate(manifests):
            shutil.copy(m, keep / f"{i}.json")
        shutil.rmtree(out)
        for i, _ in enumerate(manifests):
            assert main(["replay", str(keep / f"{i}.json")]) == 0, name
        if _tree(Path(out)) != before:
            failed.append(name)
    verdict(8, "CLI replay is byte-identical", not failed,
            f"{len(steps)} subcommands replayed" + (f"; differing: {failed}" if failed else ""))


def test_9_anova_null_calibration(verdict):
    rng = np.random.default_rng(9)
    p = np.array([anova_f(list(rng.normal(size=(3, 12)))).p_value for _ in range(2000)])
    rate = float(np.mean(p < 0.05))
    verdict(9, "ANOVA null rejection rate", 0.03 <= rate <= 0.07, f"rate={rate:.4f} over 2000 simulations")
