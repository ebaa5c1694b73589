"""Random-forest isolation of per-patch parameter vectors into class weak labels."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import MAP_CLASSES, ClassId, LabelMap, ParameterMap

N_CLASSES = len(ClassId)


class DegenerateDataset(ValueError):
    pass


@dataclass(frozen=True)
class PatchDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) ClassId values
    feature_names: tuple[str, ...]
    positions: np.ndarray = field(default=None)  # (n, 2) grid row/col, informational

    def __len__(self) -> int:
        return len(self.labels)

    @staticmethod
    def concat(parts) -> "PatchDataset":
        parts = list(parts)
        names = parts[0].feature_names
        if any(p.feature_names != names for p in parts):
            raise ValueError("datasets have different features")
        return PatchDataset(np.concatenate([p.features for p in parts]),
                            np.concatenate([p.labels for p in parts]), names,
                            np.concatenate([p.positions for p in parts]))


def feature_name(pmap: ParameterMap) -> str:
    return f"{pmap.family}.{pmap.param_name}"


def patch_class_counts(gt, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """(rows, cols, 4) pixel counts per class; uncovered pixels count as Background."""
    rows, cols = grid
    p = patch_size
    counts = np.zeros((rows, cols, N_CLASSES), dtype=np.int64)
    covered = np.zeros((rows, cols), dtype=np.int64)
    for lm in gt:
        m = lm.mask[: rows * p, : cols * p].reshape(rows, p, cols, p).sum(axis=(1, 3))
        counts[:, :, int(lm.class_id)] += m
        if lm.class_id is not ClassId.BACKGROUND:
            covered += m
    counts[:, :, int(ClassId.BACKGROUND)] += np.maximum(p * p - covered, 0)
    return counts


def majority_labels(counts: np.ndarray) -> np.ndarray:
    """Plurality class per patch; any tie for the top count goes to Background."""
    top = counts.max(axis=-1, keepdims=True)
    n_top = (counts == top).sum(axis=-1)
    lab = counts.argmax(axis=-1)
    return np.where(n_top > 1, int(ClassId.BACKGROUND), lab).astype(np.int64)


def _stack(maps) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    maps = list(maps)
    if not maps:
        raise ValueError("no parameter maps given")
    shape = maps[0].values.shape
    if any(m.values.shape != shape for m in maps):
        raise ValueError("parameter maps have different grid shapes")
    feats = np.stack([m.values for m in maps], axis=-1)
    valid = np.logical_and.reduce([m.valid for m in maps]) & np.all(np.isfinite(feats), axis=-1)
    return feats, valid, tuple(feature_name(m) for m in maps)


def build_dataset(maps, gt, patch_size: int = 7) -> PatchDataset:
    feats, valid, names = _stack(maps)
    rows, cols = valid.shape
    for lm in gt:
        if lm.shape[0] < rows * patch_size or lm.shape[1] < cols * patch_size:
            raise ValueError("label map smaller than the parameter grid")
    labels = majority_labels(patch_class_counts(gt, (rows, cols), patch_size))
    rr, cc = np.nonzero(valid)
    if rr.size == 0:
        raise DegenerateDataset("no valid patches")
    return PatchDataset(feats[rr, cc], labels[rr, cc], names, np.stack([rr, cc], axis=1))


def gini(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    n = c.sum()
    if n <= 0:
        raise ValueError("empty node")
    return float(1.0 - np.sum((c / n) ** 2))


# ------------------------------------------------------------------ trees


@dataclass(frozen=True)
class ForestHyper:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 5
    features_per_split: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True


@dataclass
class Tree:
    # flat node arrays; leaves have feature == -1
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (nodes, N_CLASSES) class probabilities

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            idx = np.flatnonzero(inner)
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": [float(v) for v in self.value[i]]}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        feat, thr, left, right, val = [], [], [], [], []

        def visit(node) -> int:
            i = len(feat)
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            val.append([0.0] * N_CLASSES)
            if "leaf" in node:
                val[i] = [float(v) for v in node["leaf"]]
            else:
                feat[i] = int(node["feature"])
                thr[i] = float(node["threshold"])
                left[i] = visit(node["left"])
                right[i] = visit(node["right"])
            return i

        visit(d)
        return cls(np.array(feat, np.int64), np.array(thr), np.array(left, np.int64),
                   np.array(right, np.int64), np.array(val, np.float64))


@njit(cache=True)
def _scan_splits(xs, ys, min_leaf, n_classes):  # pragma: no cover - compiled
    n = ys.shape[0]
    tot = np.zeros(n_classes)
    for i in range(n):
        tot[ys[i]] += 1.0
    left = np.zeros(n_classes)
    sq_l = 0.0
    sq_r = 0.0
    for c in range(n_classes):
        sq_r += tot[c] * tot[c]
    best = np.inf
    best_i = -1
    for i in range(n - 1):
        c = ys[i]
        sq_l += 2.0 * left[c] + 1.0
        left[c] += 1.0
        r = tot[c] - left[c]
        sq_r -= 2.0 * r + 1.0
        nl = i + 1.0
        nr = n - nl
        if nl >= min_leaf and nr >= min_leaf and xs[i + 1] > xs[i]:
            # n_l*gini_l + n_r*gini_r, divided by n
            score = (n - sq_l / nl - sq_r / nr) / n
            if score < best:
                best = score
                best_i = i
    return best, best_i


def _best_split(xs: np.ndarray, ys: np.ndarray, min_leaf: int):
    """Best weighted-Gini cut on one feature given values sorted ascending.

    Returns (score, position, threshold); position is the last index that goes left.
    """
    score, i = _scan_splits(xs, ys, min_leaf, N_CLASSES)
    if i < 0:
        return math.inf, -1, 0.0
    t = (xs[i] + xs[i + 1]) / 2.0
    if not xs[i] <= t < xs[i + 1]:
        # adjacent floats: the midpoint rounded up onto the right value
        t = xs[i]
    return float(score), int(i), float(t)


def grow_tree(X: np.ndarray, y: np.ndarray, hyper: ForestHyper, rng: np.random.Generator) -> Tree:
    n, d = X.shape
    k = min(hyper.features_per_split or math.ceil(math.sqrt(d)), d)
    feat, thr, left, right, val = [], [], [], [], []

    def new_node(labels) -> int:
        counts = np.bincount(labels, minlength=N_CLASSES).astype(np.float64)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        val.append(counts / counts.sum())
        return len(feat) - 1

    # per-feature row indices kept in ascending feature order, partitioned stably at each split
    presorted = [np.argsort(X[:, f], kind="stable") for f in range(d)]
    go_left = np.zeros(n, dtype=bool)
    root = new_node(y)
    stack = [(root, presorted, 0)]
    while stack:
        node, orders, depth = stack.pop()
        m = len(orders[0])
        ys_any = y[orders[0]]
        if depth >= hyper.max_depth or m < 2 * hyper.min_leaf or np.all(ys_any == ys_any[0]):
            continue
        feats = np.sort(rng.choice(d, size=k, replace=False))
        best = (math.inf, -1, -1, 0.0)
        for f in feats:
            o = orders[f]
            score, pos, t = _best_split(X[o, f], y[o], hyper.min_leaf)
            if score < best[0]:
                best = (score, int(f), pos, t)
        score, f, pos, t = best
        if f < 0 or score >= 1.0 - np.sum(val[node] ** 2):
            continue
        o = orders[f]
        go_left[o[: pos + 1]] = True
        go_left[o[pos + 1:]] = False
        lo = [oo[go_left[oo]] for oo in orders]
        ro = [oo[~go_left[oo]] for oo in orders]
        feat[node], thr[node] = f, t
        left[node] = new_node(y[lo[0]])
        right[node] = new_node(y[ro[0]])
        stack.append((right[node], ro, depth + 1))
        stack.append((left[node], lo, depth + 1))
    return Tree(np.array(feat, np.int64), np.array(thr), np.array(left, np.int64),
                np.array(right, np.int64), np.array(val, np.float64))


@dataclass
class Forest:
    trees: list[Tree]
    hyper: ForestHyper
    feature_names: tuple[str, ...]
    train_seed: int
    oob_accuracy: float | None = None
    oob_balanced_accuracy: float | None = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"forest expects {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros((len(X), N_CLASSES))
        for t in self.trees:
            acc += t.predict_proba(X)
        return acc / len(self.trees)

    def to_json(self) -> str:
        doc = {
            "feature_names": list(self.feature_names),
            "hyper": {
                "n_trees": self.hyper.n_trees, "max_depth": self.hyper.max_depth,
                "min_leaf": self.hyper.min_leaf, "features_per_split": self.hyper.features_per_split,
                "bootstrap": self.hyper.bootstrap,
            },
            "train_seed": self.train_seed,
            "oob_accuracy": self.oob_accuracy,
            "oob_balanced_accuracy": self.oob_balanced_accuracy,
            "classes": [c.label for c in ClassId],
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        doc = json.loads(text)
        return cls(
            trees=[Tree.from_dict(t) for t in doc["trees"]],
            hyper=ForestHyper(**doc["hyper"]),
            feature_names=tuple(doc["feature_names"]),
            train_seed=int(doc["train_seed"]),
            oob_accuracy=doc.get("oob_accuracy"),
            oob_balanced_accuracy=doc.get("oob_balanced_accuracy"),
        )


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def train_forest(data: PatchDataset, hyper: ForestHyper | None = None, seed: int = 0) -> Forest:
    hyper = hyper or ForestHyper()
    X = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DegenerateDataset("need at least two classes to train")
    if len(y) < 50:
        raise DegenerateDataset("need at least 50 rows to train")
    n = len(y)
    trees = []
    oob_votes = np.zeros((n, N_CLASSES))
    for t in range(hyper.n_trees):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, t])
        if hyper.bootstrap:
            idx = np.sort(rng.integers(0, n, size=n))
        else:
            idx = np.arange(n)
        tree = grow_tree(X[idx], y[idx], hyper, rng)
        trees.append(tree)
        if hyper.bootstrap:
            oob = np.ones(n, dtype=bool)
            oob[idx] = False
            if oob.any():
                oob_votes[oob] += tree.predict_proba(X[oob])
    forest = Forest(trees, hyper, tuple(data.feature_names), int(seed))
    seen = oob_votes.sum(axis=1) > 0
    if seen.any():
        pred = oob_votes[seen].argmax(axis=1)
        forest.oob_accuracy = float(np.mean(pred == y[seen]))
        forest.oob_balanced_accuracy = balanced_accuracy(y[seen], pred)
    return forest


def predict(forest: Forest, features) -> tuple[np.ndarray, np.ndarray]:
    """Class per row (argmax, ties to the lowest class id) and the probability rows."""
    proba = forest.predict_proba(features)
    return proba.argmax(axis=1), proba


# -------------------------------------------------------------- weak maps


def _check_features(forest: Forest, names: tuple[str, ...]) -> None:
    if len(names) != forest.n_features:
        raise ValueError(f"forest expects {forest.n_features} features {forest.feature_names}, got {len(names)}")
    if names != forest.feature_names:
        raise ValueError(f"feature mismatch: forest has {forest.feature_names}, maps give {names}")


def classify_patches(forest: Forest, maps) -> np.ndarray:
    """(rows, cols) ClassId grid; invalid patches are Background."""
    feats, valid, names = _stack(maps)
    _check_features(forest, names)
    grid = np.full(valid.shape, int(ClassId.BACKGROUND), dtype=np.int64)
    if valid.any():
        grid[valid] = predict(forest, feats[valid])[0]
    return grid


def paint(grid: np.ndarray, scan_shape, patch_size: int = 7) -> list[LabelMap]:
    """Expand a patch class grid to pixel masks; margins outside the grid are Background."""
    h, w = scan_shape
    rows, cols = grid.shape
    if rows * patch_size > h or cols * patch_size > w:
        raise ValueError("patch grid does not fit the scan")
    full = np.full((h, w), int(ClassId.BACKGROUND), dtype=np.int64)
    full[: rows * patch_size, : cols * patch_size] = np.repeat(np.repeat(grid, patch_size, 0), patch_size, 1)
    return [LabelMap(c, full == int(c)) for c in MAP_CLASSES]


def weak_maps(forest: Forest, maps, scan_shape, patch_size: int = 7) -> list[LabelMap]:
    return paint(classify_patches(forest, maps), scan_shape, patch_size)


def range_map(pmap: ParameterMap, low: float, high: float) -> np.ndarray:
    """Patch grid coded 0 below ``low``, 1 inside [low, high], 2 above; invalid cells -1.

    Manual parameter-range isolation, e.g. Gamma shape in [10, 30] for RPE.
    """
    v = pmap.values
    out = np.where(v < low, 0, np.where(v <= high, 1, 2))
    return np.where(pmap.valid, out, -1)


def patch_scores(pred: np.ndarray, truth: np.ndarray) -> dict[str, dict[str, float]]:
    """Per-class scores of the binary patch maps for the three map classes.

    ``accuracy`` is the fraction of patches whose in/out decision for the class
    is correct; ``recall`` is the fraction of the class's patches recovered.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    out = {}
    for c in MAP_CLASSES:
        t = truth == int(c)
        p = pred == int(c)
        denom = t.sum() + p.sum()
        out[c.label] = {
            "accuracy": float(np.mean(p == t)),
            "recall": float(np.mean(p[t])) if t.any() else 1.0,
            "dice": float(2 * np.sum(p & t) / denom) if denom else 1.0,
            "n": int(t.sum()),
        }
    return out
