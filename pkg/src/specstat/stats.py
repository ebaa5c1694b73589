"""Goodness-of-fit (KS, Cramér–von Mises) and variance tests (ANOVA, Levene).

The report builders at the bottom aggregate per-scan results per class in the
layout used for the JSON reports: mean and variance across scans of each
statistic and p-value.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .dist import POSITIVE_SUPPORT, DegenerateSample, Family, NonConvergence, cdf, clamp, mle_fit, uniforms
from .special import f_sf

CVM_REPLICATES = 2000
_KS_TERM_TOL = 1e-12


@dataclass(frozen=True)
class GofResult:
    family: str
    statistic: float
    p_value: float
    n: int


@dataclass(frozen=True)
class VarResult:
    test: str
    statistic: float
    p_value: float
    df_between: int
    df_within: int


def _sorted_finite(samples) -> np.ndarray:
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("empty sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    return x


# ---------------------------------------------------------------------- KS


def ks_statistic(samples, cdf_fn: Callable) -> float:
    x = _sorted_finite(samples)
    n = x.size
    F = np.asarray(cdf_fn(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def kolmogorov_sf(lam: float) -> float:
    """Q(λ) = 2 Σ (−1)^(k−1) exp(−2k²λ²)."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # same function in its Jacobi-transformed form; the alternating series is slow here
        s = 0.0
        k = 1
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
            s += term
            if term < _KS_TERM_TOL:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s))
    total = 0.0
    k = 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < _KS_TERM_TOL:
            break
        k += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_pvalue(D: float, n: int) -> float:
    if not 0.0 <= D <= 1.0:
        raise ValueError("D must lie in [0, 1]")
    rn = math.sqrt(n)
    return kolmogorov_sf((rn + 0.12 + 0.11 / rn) * D)


# --------------------------------------------------------------------- CVM


def cvm_statistic(samples, cdf_fn: Callable) -> float:
    x = _sorted_finite(samples)
    n = x.size
    F = np.asarray(cdf_fn(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(1.0 / (12 * n) + np.sum(((2 * i - 1) / (2 * n) - F) ** 2))


@lru_cache(maxsize=64)
def _cvm_null(n: int, seed: int, replicates: int) -> np.ndarray:
    """Sorted CVM statistics of ``replicates`` uniform samples of size n."""
    out = np.empty(replicates)
    plot_pos = (2 * np.arange(1, n + 1) - 1) / (2 * n)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, replicates, chunk):
        stop = min(replicates, start + chunk)
        u = uniforms(seed, (stop - start) * n, offset=start * n).reshape(stop - start, n)
        u.sort(axis=1)
        out[start:stop] = 1.0 / (12 * n) + np.sum((plot_pos - u) ** 2, axis=1)
    out.sort()
    out.setflags(write=False)
    return out


def cvm_pvalue(W: float, n: int, seed: int = 0, replicates: int = CVM_REPLICATES) -> float:
    """Monte Carlo p-value: (1 + #{W_sim ≥ W}) / (M + 1)."""
    if W < 0:
        raise ValueError("W must be non-negative")
    null = _cvm_null(int(n), int(seed), int(replicates))
    exceed = null.size - np.searchsorted(null, W, side="left")
    return float((1 + exceed) / (replicates + 1))


# ---------------------------------------------------------- variance tests


def _as_groups(groups, minimum: int) -> list[np.ndarray]:
    out = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(out) < 2:
        raise ValueError("need at least two groups")
    for g in out:
        if g.size < minimum:
            raise ValueError(f"every group needs at least {minimum} samples")
    return out


def _one_way(groups: list[np.ndarray]) -> tuple[float, int, int]:
    m = len(groups)
    n = np.array([g.size for g in groups], dtype=np.float64)
    N = int(n.sum())
    means = np.array([g.mean() for g in groups])
    if np.all(means == means[0]):
        ssb = 0.0
    else:
        grand = float(np.sum(n * means) / N)
        ssb = float(np.sum(n * (means - grand) ** 2))
    ssw = float(sum(np.sum((g - mu) ** 2) for g, mu in zip(groups, means)))
    dfb, dfw = m - 1, N - m
    if ssb == 0.0:
        return 0.0, dfb, dfw
    if ssw == 0.0:
        return math.inf, dfb, dfw
    return (ssb / dfb) / (ssw / dfw), dfb, dfw


def anova_f(groups: Sequence) -> VarResult:
    """One-way ANOVA F = MS_between / MS_within."""
    gs = _as_groups(groups, 2)
    F, dfb, dfw = _one_way(gs)
    return VarResult("anova", F, f_sf(F, dfb, dfw), dfb, dfw)


def trim(sample, fraction: float) -> np.ndarray:
    x = np.sort(np.asarray(sample, dtype=np.float64).ravel())
    g = int(math.floor(fraction * x.size))
    return x[g: x.size - g]


def levene(groups: Sequence, trim_fraction: float = 0.05) -> VarResult:
    """Median-centred Levene (Brown–Forsythe) test after symmetric tail trimming."""
    gs = _as_groups(groups, 3)
    z = []
    for g in gs:
        t = trim(g, trim_fraction)
        if t.size < 2:
            raise ValueError("group too small after trimming")
        z.append(np.abs(t - np.median(t)))
    W, dfb, dfw = _one_way(z)
    return VarResult("levene", W, f_sf(W, dfb, dfw), dfb, dfw)


# ----------------------------------------------------------------- reports


def _moments(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.var())


@dataclass
class GofReport:
    # test -> class -> family -> summary
    tests: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return self.tests


def _subsample(x: np.ndarray, max_samples: int | None, seed: int, index: int) -> np.ndarray:
    if max_samples is None or x.size <= max_samples:
        return x
    rng = np.random.default_rng([seed, index])
    return x[np.sort(rng.choice(x.size, size=max_samples, replace=False))]


def gof_scan(family, samples, seed: int = 0) -> tuple[GofResult, GofResult]:
    """Fit on the sample, then KS and CVM against the fitted CDF."""
    fam = Family.parse(family)
    x = np.asarray(samples, dtype=np.float64).ravel()
    if fam in POSITIVE_SUPPORT:
        x = clamp(x)
    fit = mle_fit(fam, x)

    def F(v):
        return cdf(fam, fit.params, v)

    d = ks_statistic(x, F)
    w = cvm_statistic(x, F)
    return (GofResult(fam.value, d, ks_pvalue(d, x.size), x.size),
            GofResult(fam.value, w, cvm_pvalue(w, x.size, seed), x.size))


def gof_report(class_samples: Mapping[str, Sequence], families, seed: int = 0,
               max_samples: int | None = None) -> GofReport:
    """Per (class, family): mean and variance across scans of KS/CVM statistics and p-values."""
    fams = [Family.parse(f) for f in families]
    tests = {"ks": {}, "cvm": {}}
    for cname in sorted(class_samples):
        scans = class_samples[cname]
        for test in tests:
            tests[test][cname] = {}
        for fam in fams:
            ks_rows, cvm_rows = [], []
            excluded = 0
            for j, s in enumerate(scans):
                x = _subsample(np.asarray(s, dtype=np.float64).ravel(), max_samples, seed, j)
                if x.size < 2:
                    raise ValueError(f"class {cname!r} scan {j} has fewer than 2 samples")
                try:
                    ks, cv = gof_scan(fam, x, seed)
                except (DegenerateSample, NonConvergence):
                    excluded += 1
                    continue
                ks_rows.append(ks)
                cvm_rows.append(cv)
            for test, rows in (("ks", ks_rows), ("cvm", cvm_rows)):
                sm, sv = _moments([r.statistic for r in rows])
                pm, pv = _moments([r.p_value for r in rows])
                tests[test][cname][fam.value] = {
                    "stat_mean": sm, "stat_var": sv, "p_mean": pm, "p_var": pv,
                    "n_scans": len(rows), "n_excluded": excluded,
                }
    return GofReport(tests)


@dataclass
class VarReport:
    levene: dict[str, VarResult]
    anova: dict[str, VarResult]

    def to_dict(self) -> dict:
        return {
            "levene": {k: asdict(v) for k, v in self.levene.items()},
            "anova": {k: asdict(v) for k, v in self.anova.items()},
        }


def variance_report(class_samples: Mapping[str, Sequence], trim_fraction: float = 0.05) -> VarReport:
    """Levene across scans within each class first, then ANOVA for every class pair."""
    lev = {}
    for cname in sorted(class_samples):
        scans = [np.asarray(s, dtype=np.float64).ravel() for s in class_samples[cname]]
        scans = [s for s in scans if s.size >= 3]
        if len(scans) >= 2:
            lev[cname] = levene(scans, trim_fraction)
    anova = {}
    pooled = {c: np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in v])
              for c, v in class_samples.items() if len(v)}
    for a, b in itertools.combinations(sorted(pooled), 2):
        if pooled[a].size >= 2 and pooled[b].size >= 2:
            anova[f"{a}-{b}"] = anova_f([pooled[a], pooled[b]])
    return VarReport(lev, anova)
