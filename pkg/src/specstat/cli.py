"""``specstat`` command line: phantom -> fit -> weak -> refine -> eval.

File layout conventions:

* scans:            ``<stem>.pgm``
* masks:            ``<stem>.<class>.pgm`` (class in ilm, rpe, tool)
* parameter maps:   ``<stem>.<family>.<param>.csv``
* probabilities:    ``<stem>.<class>.prob.pgm`` (16-bit)

Every run writes a ``manifest.json`` next to its outputs (for single-file
outputs, ``<file>.manifest.json``); ``specstat replay`` re-executes it.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import (MAP_CLASSES, BScan, ClassId, FormatError, LabelMap, _atomic_write, load_label_pgm,
                   load_param_csv, load_pgm, save_label_pgm, save_param_csv, save_pgm, save_scan_pgm)
from .dist import Family, NonConvergence
from .fitgrid import DEFAULT_PATCH, fit_scan
from .phantom import PRESETS, PhantomConfig, default_config, volume

SEED_ENV = "SPECSTAT_SEED"
EXIT_INPUT = 2
EXIT_NUMERIC = 3
ALL_FAMILIES = tuple(f.value for f in Family)


class InputError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode("utf-8"))


def _families(spec: str) -> list[str]:
    if spec == "all":
        return list(ALL_FAMILIES)
    out = []
    for name in spec.split(","):
        try:
            out.append(Family.parse(name.strip()).value)
        except ValueError:
            raise InputError(f"unknown family {name!r}; choose from {', '.join(ALL_FAMILIES)} or all") from None
    return out


def _scan_stems(path: Path) -> list[tuple[str, Path]]:
    """(stem, file) for every scan PGM; masks and probability maps are skipped."""
    if path.is_file():
        return [(path.name[:-4] if path.name.endswith(".pgm") else path.stem, path)]
    if not path.is_dir():
        raise InputError(f"no such file or directory: {path}")
    labels = {c.label for c in ClassId}
    out = []
    for f in sorted(path.glob("*.pgm")):
        parts = f.name[:-4].split(".")
        if len(parts) > 1 and (parts[-1] in labels or parts[-1] == "prob"):
            continue
        out.append((f.name[:-4], f))
    if not out:
        raise InputError(f"no scans found in {path}")
    return out


def _load_masks(directory: Path, stem: str, kind: str = "labels") -> list[LabelMap]:
    maps = []
    for c in MAP_CLASSES:
        f = directory / f"{stem}.{c.label}.pgm"
        if not f.exists():
            raise InputError(f"missing {kind} for scan {stem!r}: {f}")
        maps.append(load_label_pgm(f, c))
    return maps


def _mask_stems(directory: Path) -> list[str]:
    if not directory.is_dir():
        raise InputError(f"no such directory: {directory}")
    stems = set()
    for f in directory.glob(f"*.{MAP_CLASSES[0].label}.pgm"):
        stems.add(f.name[: -len(f".{MAP_CLASSES[0].label}.pgm")])
    return sorted(stems)


def _param_index(directory: Path) -> dict[str, list[Path]]:
    if not directory.is_dir():
        raise InputError(f"no such directory: {directory}")
    index: dict[str, list[Path]] = {}
    for f in sorted(directory.glob("*.csv")):
        parts = f.name[:-4].rsplit(".", 2)
        if len(parts) == 3 and parts[1] in ALL_FAMILIES:
            index.setdefault(parts[0], []).append(f)
    return index


def _load_params(files) -> list:
    return [load_param_csv(f) for f in sorted(files)]


def _recorded_shapes(directory: Path | None) -> dict[str, tuple[int, int]]:
    if directory is None:
        return {}
    m = directory / "manifest.json"
    if not m.exists():
        return {}
    try:
        shapes = json.loads(m.read_text()).get("results", {}).get("scan_shapes", {})
    except ValueError:
        return {}
    return {k: tuple(v) for k, v in shapes.items()}


def _shape_for(stem, scans_dir, params_dir, pmaps, patch) -> tuple[int, int]:
    if scans_dir is not None:
        f = scans_dir / f"{stem}.pgm"
        if f.exists():
            return load_pgm(f).shape
    rec = _recorded_shapes(params_dir)
    if stem in rec:
        return rec[stem]
    if pmaps:
        return pmaps[0].rows * patch, pmaps[0].cols * patch
    raise InputError(f"cannot determine the image size of {stem!r}; pass --scans")


class Run:
    """Collects outputs and writes the manifest atomically at the end."""

    def __init__(self, args, argv, manifest_path: Path):
        self.args = args
        self.argv = list(argv)
        self.path = manifest_path
        self.start = time.perf_counter()
        self.outputs: list[str] = []
        self.results: dict = {}

    def out(self, path: Path) -> Path:
        self.outputs.append(str(path))
        return path

    def finish(self, seed: int | None, inputs=(), config=None) -> None:
        snapshot = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.args).items()
                    if k not in ("func",)}
        manifest = {
            "toolkit": "specstat",
            "version": __version__,
            "subcommand": " ".join(x for x in (self.args.command, getattr(self.args, "action", None)) if x),
            "argv": self.argv,
            "cwd": os.getcwd(),
            "seed": seed,
            "arguments": snapshot,
            "config": config,
            "inputs": [str(p) for p in inputs],
            "outputs": sorted(self.outputs),
            "results": self.results,
            "duration_s": round(time.perf_counter() - self.start, 3),
        }
        _write_json(self.path, manifest)


def _file_manifest(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# ---------------------------------------------------------------- phantom


def cmd_phantom(args, argv) -> int:
    seed = _seed(args)
    if args.config:
        try:
            cfg = PhantomConfig.from_json(Path(args.config).read_text())
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"invalid phantom config {args.config}: {exc}") from exc
    else:
        cfg = default_config(args.preset)
    if args.count < 1:
        raise InputError("--count must be positive")
    per_eye = args.per_eye or args.count
    out = Path(args.out)
    run = Run(args, argv, out / "manifest.json")
    j = 0
    eye = 0
    while j < args.count:
        n = min(per_eye, args.count - j)
        for scan, gt in volume(cfg, seed + eye, n):
            stem = f"{args.prefix}{j:04d}"
            (out / "scans").mkdir(parents=True, exist_ok=True)
            (out / "labels").mkdir(parents=True, exist_ok=True)
            save_scan_pgm(scan, run.out(out / "scans" / f"{stem}.pgm"))
            for m in gt:
                save_label_pgm(m, run.out(out / "labels" / f"{stem}.{m.class_id.label}.pgm"))
            if args.figures:
                from .plotting import overlay_png
                overlay_png(scan, gt, run.out(out / "figures" / f"{stem}.overlay.png"))
            j += 1
        eye += 1
    run.results = {"scans": args.count, "eyes": eye, "preset": None if args.config else args.preset}
    run.finish(seed, [args.config] if args.config else [], cfg.to_dict())
    return 0


# -------------------------------------------------------------------- fit


def _fit_one(job):
    stem, path, families, patch = job
    scan = load_pgm(path)
    out = []
    for fam in families:
        maps = fit_scan(scan, fam, patch)
        out.append((fam, maps))
    return stem, scan.shape, out


def cmd_fit(args, argv) -> int:
    families = _families(args.family)
    scans = _scan_stems(Path(args.inp))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(args, argv, out / "manifest.json")
    jobs = [(stem, path, families, args.patch) for stem, path in scans]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    failures, shapes = {}, {}
    for stem, shape, per_family in sorted(results, key=lambda r: r[0]):
        shapes[stem] = list(shape)
        failures[stem] = {}
        for fam, maps in per_family:
            failures[stem][fam] = int((~maps[0].valid).sum())
            for pm in maps:
                f = run.out(out / f"{stem}.{fam}.{pm.param_name}.csv")
                save_param_csv(pm, f)
                if args.figures:
                    from .plotting import parameter_map
                    parameter_map(pm, run.out(out / "figures" / f"{stem}.{fam}.{pm.param_name}.png"))
    run.results = {"fit_failures": failures, "scan_shapes": shapes, "families": families}
    run.finish(None, [p for _, p in scans])
    return 0


# -------------------------------------------------------------- gof/var


def _class_samples(scans_dir: Path, labels_dir: Path):
    scans = _scan_stems(scans_dir)
    samples = {c.label: [] for c in ClassId}
    for stem, path in scans:
        scan = load_pgm(path)
        gt = _load_masks(labels_dir, stem)
        union = np.zeros(scan.shape, bool)
        for m in gt:
            if m.shape != scan.shape:
                raise InputError(f"label {stem}.{m.class_id.label} does not match its scan")
            samples[m.class_id.label].append(scan.pixels[m.mask])
            union |= m.mask
        samples[ClassId.BACKGROUND.label].append(scan.pixels[~union])
    # classes absent from every scan (e.g. no tool) are dropped; empty per-scan samples too
    return {c: [s for s in v if s.size] for c, v in samples.items() if any(s.size for s in v)}, scans


def cmd_gof(args, argv) -> int:
    from .stats import gof_report
    seed = _seed(args)
    families = _families(args.families)
    samples, scans = _class_samples(Path(args.scans), Path(args.labels))
    report = gof_report(samples, families, seed=seed, max_samples=args.max_samples or None)
    out = Path(args.out)
    run = Run(args, argv, _file_manifest(out))
    body = {"tests": report.to_dict(), "families": families, "max_samples": args.max_samples or None,
            "n_scans": len(scans), "cvm_replicates": 2000, "seed": seed}
    _write_json(run.out(out), body)
    if args.figures:
        from .plotting import gof_bars
        for test in ("ks", "cvm"):
            gof_bars(body["tests"], run.out(out.with_name(f"{out.stem}.{test}.png")), test)
    run.finish(seed, [p for _, p in scans])
    return 0


def cmd_varstats(args, argv) -> int:
    from .stats import variance_report
    samples, scans = _class_samples(Path(args.scans), Path(args.labels))
    rep = variance_report(samples, args.trim)
    out = Path(args.out)
    run = Run(args, argv, _file_manifest(out))
    body = rep.to_dict()
    body["order"] = ["levene", "anova"]
    body["trim_fraction"] = args.trim
    body["n_scans"] = len(scans)
    _write_json(run.out(out), body)
    run.finish(None, [p for _, p in scans])
    return 0


# ------------------------------------------------------------------- weak


def cmd_weak(args, argv) -> int:
    from . import weaklabel as wl
    params_dir = Path(args.params)
    index = _param_index(params_dir)
    if not index:
        raise InputError(f"no parameter maps found in {params_dir}")
    if args.action == "train":
        seed = _seed(args)
        labels_dir = Path(args.labels)
        parts = []
        families = set(_families(args.families))
        for stem in sorted(index):
            maps = [m for m in _load_params(index[stem]) if m.family in families]
            if not maps:
                raise InputError(f"scan {stem!r} has no parameter maps for {args.families}")
            gt = _load_masks(labels_dir, stem)
            parts.append(wl.build_dataset(maps, gt, args.patch))
        data = wl.PatchDataset.concat(parts)
        hyper = wl.ForestHyper(n_trees=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf)
        forest = wl.train_forest(data, hyper, seed)
        model = Path(args.model)
        run = Run(args, argv, _file_manifest(model))
        _write_text(run.out(model), forest.to_json())
        run.results = {"oob_accuracy": forest.oob_accuracy, "oob_balanced_accuracy": forest.oob_balanced_accuracy,
                       "n_patches": len(data), "features": list(forest.feature_names)}
        run.finish(seed, sorted(str(f) for fs in index.values() for f in fs))
        return 0

    forest = wl.Forest.from_json(Path(args.model).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(args, argv, out / "manifest.json")
    scans_dir = Path(args.scans) if args.scans else None
    wanted = set(forest.feature_names)
    for stem in sorted(index):
        maps = [m for m in _load_params(index[stem]) if wl.feature_name(m) in wanted]
        names = tuple(wl.feature_name(m) for m in maps)
        if sorted(names) != sorted(forest.feature_names):
            missing = sorted(wanted - set(names))
            raise InputError(f"scan {stem!r}: forest expects {forest.n_features} features, "
                             f"found {len(names)} (missing {', '.join(missing)})")
        shape = _shape_for(stem, scans_dir, params_dir, maps, args.patch)
        pred = wl.weak_maps(forest, maps, shape, args.patch)
        for m in pred:
            save_label_pgm(m, run.out(out / f"{stem}.{m.class_id.label}.pgm"))
        if args.figures and scans_dir is not None and (scans_dir / f"{stem}.pgm").exists():
            from .plotting import overlay_png
            overlay_png(load_pgm(scans_dir / f"{stem}.pgm"), pred, run.out(out / "figures" / f"{stem}.overlay.png"))
    run.finish(None, [args.model])
    return 0


# ----------------------------------------------------------------- refine


def _refine_sources(args, stem, cfg, params_index, need_shape=True):
    from .refine import MissingSource
    scans_dir = Path(args.scans) if args.scans else None
    params_dir = Path(args.params) if args.params else None
    scan = None
    if "scan" in cfg.channels:
        if scans_dir is None:
            raise MissingSource(f"config {cfg.value} needs --scans")
        f = scans_dir / f"{stem}.pgm"
        if not f.exists():
            raise MissingSource(f"missing scan {f}")
        scan = load_pgm(f)
    pmaps = None
    if any(c.startswith("gamma.") for c in cfg.channels):
        if params_dir is None:
            raise MissingSource(f"config {cfg.value} needs --params with Gamma maps")
        pmaps = [m for m in _load_params(params_index.get(stem, [])) if m.family == "gamma"]
    weak = None
    if any(c.startswith("weak.") for c in cfg.channels):
        if not args.weak:
            raise MissingSource(f"config {cfg.value} needs --weak maps")
        weak = _load_masks(Path(args.weak), stem, "weak maps")
    shape = scan.shape if scan is not None else (
        weak[0].shape if weak else _shape_for(stem, scans_dir, params_dir, pmaps, args.patch))
    return scan, pmaps, weak, shape


def _refine_stems(args, cfg, params_index) -> list[str]:
    if "scan" in cfg.channels and args.scans:
        return [s for s, _ in _scan_stems(Path(args.scans))]
    if any(c.startswith("gamma.") for c in cfg.channels) and params_index:
        return sorted(params_index)
    if args.weak:
        return _mask_stems(Path(args.weak))
    if args.scans:
        return [s for s, _ in _scan_stems(Path(args.scans))]
    raise InputError("no input scans found for the requested config")


def cmd_refine(args, argv) -> int:
    from . import refine as rf
    if args.action == "train":
        cfg = rf.InputConfig.parse(args.config)
        seed = _seed(args)
        params_index = _param_index(Path(args.params)) if args.params else {}
        if args.targets == "gt":
            if not args.labels:
                raise InputError("--targets gt needs --labels")
            target_dir = Path(args.labels)
        else:
            if not args.weak:
                raise InputError("--targets weak needs --weak")
            target_dir = Path(args.weak)
        stems = _refine_stems(args, cfg, params_index)
        dataset = []
        for stem in stems:
            scan, pmaps, weak, shape = _refine_sources(args, stem, cfg, params_index)
            x = rf.assemble_input(cfg, scan, pmaps, weak, None, args.patch, shape)
            dataset.append((x, _load_masks(target_dir, stem, "targets")))
        tspec = rf.TrainSpec(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=seed,
                             strip_width=args.strip_width or None)
        res = rf.train(cfg, tspec, dataset, patch_size=args.patch)
        res.model.meta = {"targets": args.targets, "epochs": args.epochs, "seed": seed, "n_train": len(dataset)}
        model = Path(args.model)
        model.parent.mkdir(parents=True, exist_ok=True)
        run = Run(args, argv, _file_manifest(model))
        rf.save_model(res.model, run.out(model))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerow([0, repr(res.initial_loss)])
        for i, v in enumerate(res.history, 1):
            w.writerow([i, repr(v)])
        loss_csv = model.with_name(model.name + ".loss.csv")
        _write_text(run.out(loss_csv), buf.getvalue())
        if args.figures:
            from .plotting import loss_curve
            loss_curve([res.initial_loss, *res.history], run.out(model.with_name(model.name + ".loss.png")),
                       f"config {cfg.value} ({args.targets} targets)")
        run.results = {"parameter_count": res.model.parameter_count, "initial_loss": res.initial_loss,
                       "final_loss": res.history[-1] if res.history else res.initial_loss, "n_train": len(dataset)}
        run.finish(seed, stems)
        return 0

    model = rf.load_model(args.model)
    cfg = model.config
    params_index = _param_index(Path(args.params)) if args.params else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(args, argv, out / "manifest.json")
    stems = _refine_stems(args, cfg, params_index)
    for stem in stems:
        scan, pmaps, weak, shape = _refine_sources(args, stem, cfg, params_index)
        probs = rf.predict(model, scan, pmaps, weak, shape)
        masks = rf.binarize(probs, args.threshold)
        for i, c in enumerate(MAP_CLASSES):
            save_pgm(probs[i] * 65535.0, run.out(out / f"{stem}.{c.label}.prob.pgm"), maxval=65535)
        for m in masks:
            save_label_pgm(m, run.out(out / f"{stem}.{m.class_id.label}.pgm"))
        if args.figures and scan is not None:
            from .plotting import overlay_png
            overlay_png(scan, masks, run.out(out / "figures" / f"{stem}.overlay.png"))
    run.results = {"config": cfg.value, "threshold": args.threshold, "n_scans": len(stems)}
    run.finish(None, [args.model])
    return 0


# ------------------------------------------------------------------- eval


def cmd_eval(args, argv) -> int:
    from .evalmetrics import scan_metrics, summarize
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_stems = _mask_stems(gt_dir)
    pred_stems = _mask_stems(pred_dir)
    if not gt_stems:
        raise InputError(f"no ground-truth masks in {gt_dir}")
    if set(gt_stems) != set(pred_stems):
        extra = sorted(set(pred_stems) ^ set(gt_stems))
        raise InputError(f"unmatched scans between --pred and --gt: {', '.join(extra[:5])}")
    per_scan = []
    for stem in gt_stems:
        per_scan.append(scan_metrics(_load_masks(pred_dir, stem, "predictions"), _load_masks(gt_dir, stem),
                                     args.percentile))
    summary = summarize(per_scan)
    summary["hausdorff_percentile"] = args.percentile
    out = Path(args.out)
    run = Run(args, argv, _file_manifest(out))
    _write_json(run.out(out), summary)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scan", "class", "dice", "hausdorff"])
    for stem, row in zip(gt_stems, per_scan):
        for c in sorted(row):
            w.writerow([stem, c, repr(row[c]["dice"]), repr(row[c]["hausdorff"])])
    _write_text(run.out(out.with_suffix(".csv")), buf.getvalue())
    if args.figures:
        from .plotting import metrics_bars
        metrics_bars(summary, run.out(out.with_suffix(".png")))
    run.finish(None, [args.pred, args.gt])
    return 0


def cmd_compare(args, argv) -> int:
    """Side-by-side mean Dice / Hausdorff of several metrics files."""
    rows = []
    for item in args.metrics:
        if "=" not in item:
            raise InputError(f"expected NAME=metrics.json, got {item!r}")
        name, path = item.split("=", 1)
        s = json.loads(Path(path).read_text())
        row = {"name": name}
        for c, v in sorted(s["classes"].items()):
            row[f"{c}_dice"] = v["dice"]["mean"]
        row["mean_dice"] = s["pooled"]["dice"]["mean"]
        row["mean_hausdorff"] = s["pooled"]["hausdorff"]["mean"]
        rows.append(row)
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(r[c] if c == "name" else f"{r[c]:.4f}" for c in cols) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        run = Run(args, argv, _file_manifest(out))
        _write_text(run.out(out), text)
        run.finish(None, args.metrics)
    sys.stdout.write(text)
    return 0


def cmd_replay(args, argv) -> int:
    m = json.loads(Path(args.manifest).read_text())
    if m.get("toolkit") != "specstat" or "argv" not in m:
        raise InputError(f"{args.manifest} is not a specstat manifest")
    if m.get("seed") is not None:
        os.environ[SEED_ENV] = str(m["seed"])
    cwd = os.getcwd()
    try:
        if m.get("cwd") and Path(m["cwd"]).is_dir():
            os.chdir(m["cwd"])
        return main(m["argv"])
    finally:
        os.chdir(cwd)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specstat", description="Speckle-statistics segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"specstat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"global seed (falls back to ${SEED_ENV}, then 0)")

    def figures(sp):
        sp.add_argument("--figures", action="store_true", help="also render PNG figures")

    s = sub.add_parser("phantom", help="generate synthetic speckle phantoms with ground truth")
    s.add_argument("config", nargs="?", help="phantom config JSON (overrides --preset)")
    s.add_argument("--preset", choices=PRESETS, default="train_geometry")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--per-eye", type=int, default=None, help="scans per phantom eye (default: all in one eye)")
    s.add_argument("--prefix", default="scan_")
    s.add_argument("--out", required=True)
    seeded(s)
    figures(s)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("fit", help="fit distribution families per patch")
    s.add_argument("--in", dest="inp", required=True, help="scan PGM or directory of scans")
    s.add_argument("--family", default="gamma", help="family name, comma list, or 'all'")
    s.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    figures(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("gof", help="KS and CVM goodness-of-fit report per class")
    s.add_argument("--scans", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--families", default="all")
    s.add_argument("--max-samples", type=int, default=2000,
                   help="subsample each class per scan to this many pixels (0 = all)")
    s.add_argument("--out", required=True)
    seeded(s)
    figures(s)
    s.set_defaults(func=cmd_gof)

    s = sub.add_parser("varstats", help="Levene then ANOVA report")
    s.add_argument("--scans", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--trim", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_varstats)

    s = sub.add_parser("weak", help="train or apply the weak-label forest")
    s.add_argument("action", choices=("train", "apply"))
    s.add_argument("--params", required=True)
    s.add_argument("--labels")
    s.add_argument("--scans", help="scan directory (image size, overlays)")
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    s.add_argument("--families", default="gamma", help="families used as features (comma list or 'all')")
    s.add_argument("--trees", type=int, default=50)
    s.add_argument("--max-depth", type=int, default=12)
    s.add_argument("--min-leaf", type=int, default=5)
    seeded(s)
    figures(s)
    s.set_defaults(func=cmd_weak)

    s = sub.add_parser("refine", help="train or run the refinement network")
    s.add_argument("action", choices=("train", "infer"))
    s.add_argument("--config", default="D", help="input configuration A, B, C or D")
    s.add_argument("--targets", choices=("gt", "weak"), default="gt")
    s.add_argument("--scans")
    s.add_argument("--params")
    s.add_argument("--weak")
    s.add_argument("--labels")
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.add_argument("--patch", type=int, default=DEFAULT_PATCH)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--strip-width", type=int, default=64, help="training strip width in pixels (0: whole images)")
    s.add_argument("--threshold", type=float, default=0.5)
    seeded(s)
    figures(s)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", help="Dice and Hausdorff against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--percentile", type=float, default=None, help="e.g. 95 for the percentile Hausdorff")
    figures(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="tabulate several metrics files")
    s.add_argument("metrics", nargs="+", help="NAME=metrics.json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_replay)
    return p


def _check_required(args) -> None:
    if args.command == "weak":
        if args.action == "train" and not args.labels:
            raise InputError("weak train needs --labels")
        if args.action == "apply" and not args.out:
            raise InputError("weak apply needs --out")
    if args.command == "refine" and args.action == "infer" and not args.out:
        raise InputError("refine infer needs --out")


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else 0
    from .refine import Divergence
    try:
        _check_required(args)
        return args.func(args, argv)
    except (NonConvergence, Divergence, ArithmeticError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (InputError, FormatError, OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_INPUT, exc)


def main_exit() -> None:  # console-script entry point
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
