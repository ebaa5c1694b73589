"""The six speckle-intensity families: densities, CDFs, sampling and ML fitting.

All families are anchored at the origin (no location parameter). Fitting is
vectorised over a batch of equally sized samples so that a whole B-scan's
patches are fitted in one call; ``mle_fit`` is the single-sample front end.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from .core import EPSILON
from .special import digamma, trigamma

MAX_ITER = 200
GRAD_TOL = 1e-8


class Family(str, enum.Enum):
    GAMMA = "gamma"
    RAYLEIGH = "rayleigh"
    NORMAL = "normal"
    BURR = "burr"
    LOGNORM = "lognorm"
    NAKAGAMI = "nakagami"

    @classmethod
    def parse(cls, name) -> "Family":
        if isinstance(name, Family):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown family {name!r}") from None


# every fitted parameter, reported ones first
PARAM_NAMES = {
    Family.GAMMA: ("k", "theta"),
    Family.RAYLEIGH: ("sigma",),
    Family.NORMAL: ("mu", "sigma"),
    Family.BURR: ("c", "d"),
    Family.LOGNORM: ("s", "mu_log"),
    Family.NAKAGAMI: ("nu", "omega"),
}
REPORTED = {
    Family.GAMMA: ("k", "theta"),
    Family.RAYLEIGH: ("sigma",),
    Family.NORMAL: ("mu", "sigma"),
    Family.BURR: ("c", "d"),
    Family.LOGNORM: ("s",),
    Family.NAKAGAMI: ("nu",),
}
POSITIVE_SUPPORT = frozenset(f for f in Family if f is not Family.NORMAL)


class DegenerateSample(ValueError):
    """All samples are equal; no family can be fitted."""


class NonConvergence(ArithmeticError):
    """Iterative fit hit the iteration cap without meeting the gradient tolerance."""


@dataclass(frozen=True)
class DistParams:
    family: Family
    values: tuple[float, ...]

    def __post_init__(self):
        fam = Family.parse(self.family)
        vals = tuple(float(v) for v in self.values)
        if len(vals) != len(PARAM_NAMES[fam]):
            raise ValueError(f"{fam.value} takes parameters {PARAM_NAMES[fam]}, got {vals}")
        for name, v in zip(PARAM_NAMES[fam], vals):
            if not np.isfinite(v):
                raise ValueError(f"{fam.value}.{name} must be finite")
            if name not in ("mu", "mu_log") and v <= 0:
                raise ValueError(f"{fam.value}.{name} must be positive, got {v}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "values", vals)

    @classmethod
    def of(cls, family, **kw) -> "DistParams":
        fam = Family.parse(family)
        return cls(fam, tuple(kw[n] for n in PARAM_NAMES[fam]))

    def __getitem__(self, name: str) -> float:
        return self.values[PARAM_NAMES[self.family].index(name)]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES[self.family], self.values))


@dataclass(frozen=True)
class MLEResult:
    params: DistParams
    log_likelihood: float
    converged: bool
    iterations: int


# ------------------------------------------------------- densities and CDFs
#
# The array kernels below take parameters as arrays broadcastable against x,
# which is what the batched fitter and the phantom generator need.


def _logpdf_arrays(family: Family, p: tuple, x: np.ndarray) -> np.ndarray:
    if family is Family.GAMMA:
        k, th = p
        return (k - 1) * np.log(x) - x / th - sp.gammaln(k) - k * np.log(th)
    if family is Family.RAYLEIGH:
        (s,) = p
        return np.log(x) - 2 * np.log(s) - x * x / (2 * s * s)
    if family is Family.NORMAL:
        mu, s = p
        z = (x - mu) / s
        return -0.5 * z * z - np.log(s) - 0.5 * np.log(2 * np.pi)
    if family is Family.BURR:
        c, d = p
        lx = np.log(x)
        return np.log(c) + np.log(d) - (c + 1) * lx - (d + 1) * np.logaddexp(0.0, -c * lx)
    if family is Family.LOGNORM:
        s, mu = p
        lx = np.log(x)
        z = (lx - mu) / s
        return -0.5 * z * z - lx - np.log(s) - 0.5 * np.log(2 * np.pi)
    if family is Family.NAKAGAMI:
        nu, om = p
        return (np.log(2.0) + nu * np.log(nu) - sp.gammaln(nu) - nu * np.log(om)
                + (2 * nu - 1) * np.log(x) - nu * x * x / om)
    raise ValueError(family)


def _cdf_arrays(family: Family, p: tuple, x: np.ndarray) -> np.ndarray:
    if family is Family.NORMAL:
        mu, s = p
        return sp.ndtr((x - mu) / s)
    xp = np.maximum(x, 0.0)
    with np.errstate(divide="ignore"):
        if family is Family.GAMMA:
            k, th = p
            return sp.gammainc(k, xp / th)
        if family is Family.RAYLEIGH:
            (s,) = p
            return -np.expm1(-xp * xp / (2 * s * s))
        if family is Family.BURR:
            c, d = p
            return np.exp(-d * np.logaddexp(0.0, -c * np.log(xp)))
        if family is Family.LOGNORM:
            s, mu = p
            return sp.ndtr((np.log(xp) - mu) / s)
        if family is Family.NAKAGAMI:
            nu, om = p
            return sp.gammainc(nu, nu * xp * xp / om)
    raise ValueError(family)


def _ppf_arrays(family: Family, p: tuple, u: np.ndarray) -> np.ndarray:
    if family is Family.GAMMA:
        k, th = p
        return sp.gammaincinv(k, u) * th
    if family is Family.RAYLEIGH:
        (s,) = p
        return s * np.sqrt(-2.0 * np.log1p(-u))
    if family is Family.NORMAL:
        mu, s = p
        return mu + s * sp.ndtri(u)
    if family is Family.BURR:
        c, d = p
        return np.expm1(-np.log(u) / d) ** (-1.0 / c)
    if family is Family.LOGNORM:
        s, mu = p
        return np.exp(mu + s * sp.ndtri(u))
    if family is Family.NAKAGAMI:
        nu, om = p
        return np.sqrt(sp.gammaincinv(nu, u) * om / nu)
    raise ValueError(family)


def _check_support(family: Family, x: np.ndarray) -> None:
    if family in POSITIVE_SUPPORT and np.any(~(x > 0)):
        raise ValueError(f"{family.value} has support x > 0")


def log_pdf(family, params: DistParams, x):
    fam = Family.parse(family)
    x = np.asarray(x, dtype=np.float64)
    _check_support(fam, x)
    out = _logpdf_arrays(fam, params.values, x)
    return float(out) if out.ndim == 0 else out


def pdf(family, params: DistParams, x):
    return np.exp(log_pdf(family, params, x))


def cdf(family, params: DistParams, x):
    fam = Family.parse(family)
    out = _cdf_arrays(fam, params.values, np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def ppf(family, params: DistParams, u):
    fam = Family.parse(family)
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")
    out = _ppf_arrays(fam, params.values, u)
    return float(out) if out.ndim == 0 else out


def mean(family, params: DistParams) -> float:
    fam = Family.parse(family)
    v = params.as_dict()
    if fam is Family.GAMMA:
        return v["k"] * v["theta"]
    if fam is Family.RAYLEIGH:
        return v["sigma"] * np.sqrt(np.pi / 2)
    if fam is Family.NORMAL:
        return v["mu"]
    if fam is Family.BURR:
        c, d = v["c"], v["d"]
        if c <= 1:
            return np.inf
        return float(np.exp(np.log(d) + sp.gammaln(d + 1 / c) + sp.gammaln(1 - 1 / c) - sp.gammaln(d + 1)))
    if fam is Family.LOGNORM:
        return float(np.exp(v["mu_log"] + v["s"] ** 2 / 2))
    if fam is Family.NAKAGAMI:
        nu, om = v["nu"], v["omega"]
        return float(np.exp(sp.gammaln(nu + 0.5) - sp.gammaln(nu)) * np.sqrt(om / nu))
    raise ValueError(fam)


# ---------------------------------------------------------------- sampling


def uniforms(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Counter-based uniforms in the open interval (0, 1).

    Element ``i`` depends only on ``(seed, offset + i)``: a Philox stream keyed
    by the seed, advanced to the requested counter.
    """
    bitgen = np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF)
    if offset:
        # Philox emits 4 words per counter step; align and discard the remainder
        bitgen.advance(offset // 4)
        skip = offset % 4
    else:
        skip = 0
    raw = bitgen.random_raw(n + skip)[skip:]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def sample(family, params: DistParams, seed: int, n: int) -> np.ndarray:
    """``n`` deterministic draws by inverse-CDF transform of counter-based uniforms."""
    if n < 1:
        raise ValueError("n must be at least 1")
    fam = Family.parse(family)
    return _ppf_arrays(fam, params.values, uniforms(seed, n))


# ------------------------------------------------------------------ fitting


def clamp(x):
    return np.maximum(np.asarray(x, dtype=np.float64), EPSILON)


@dataclass
class BatchFit:
    """Fitted parameters for a batch of samples (one row each)."""

    family: Family
    params: dict[str, np.ndarray]
    log_likelihood: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    degenerate: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.converged & ~self.degenerate


def _gamma_newton(s: np.ndarray):
    """Solve ln k − ψ(k) = s for k, elementwise; s > 0."""
    k = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    iters = np.zeros(s.shape, dtype=np.int64)
    active = np.ones(s.shape, dtype=bool)
    for _ in range(MAX_ITER):
        if not active.any():
            break
        ka = k[active]
        f = np.log(ka) - digamma(ka) - s[active]
        fp = 1.0 / ka - trigamma(ka)
        step = f / fp
        new = ka - step
        new = np.where(new > 0, new, ka / 2.0)
        k[active] = new
        iters[active] += 1
        done = np.abs(new - ka) <= 1e-13 * new
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    grad = np.log(k) - digamma(k) - s
    return k, iters, np.abs(grad) < GRAD_TOL


def _fit_gamma_rows(x: np.ndarray):
    m = x.mean(axis=1)
    s = np.log(m) - np.log(x).mean(axis=1)
    degenerate = ~(s > 0)
    k = np.full(len(x), np.nan)
    th = np.full(len(x), np.nan)
    iters = np.zeros(len(x), dtype=np.int64)
    conv = np.zeros(len(x), dtype=bool)
    good = ~degenerate
    if good.any():
        kg, it, cv = _gamma_newton(s[good])
        k[good], iters[good], conv[good] = kg, it, cv
        th[good] = m[good] / kg
    return k, th, iters, conv, degenerate


def _burr_profile(y: np.ndarray, c: np.ndarray):
    """Profile log-likelihood in u = ln c (d maximised out) with u-derivatives, per sample."""
    n = y.shape[1]
    cy = -c[:, None] * y
    L = np.logaddexp(0.0, cy)
    q = sp.expit(cy)
    S = L.sum(axis=1)
    S1 = -(y * q).sum(axis=1)
    S2 = (y * y * q * (1.0 - q)).sum(axis=1)
    d = n / S
    sy = y.sum(axis=1)
    prof = n * np.log(c) + n * np.log(d) - (c + 1) * sy - n - S
    g = n / c - n * S1 / S - sy - S1
    h = -n / c ** 2 - n * (S2 / S - (S1 / S) ** 2) - S2
    # chain rule to u = ln c
    gu = c * g
    hu = c * c * h + c * g
    return prof / n, gu / n, hu / n, d


def _fit_burr_rows(x: np.ndarray):
    y = np.log(x)
    nrow = len(x)
    degenerate = np.ptp(y, axis=1) == 0
    u = np.zeros(nrow)
    iters = np.zeros(nrow, dtype=np.int64)
    conv = np.zeros(nrow, dtype=bool)
    active = ~degenerate
    for _ in range(MAX_ITER):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        ya, ua = y[idx], u[idx]
        p0, g, h, _ = _burr_profile(ya, np.exp(ua))
        done = np.abs(g) < GRAD_TOL
        conv[idx[done]] = True
        active[idx[done]] = False
        keep = ~done
        if not keep.any():
            break
        idx, ya, ua, p0, g, h = idx[keep], ya[keep], ua[keep], p0[keep], g[keep], h[keep]
        step = np.where(h < 0, -g / np.where(h < 0, h, -1.0), np.sign(g))
        step = np.clip(step, -1.0, 1.0)
        # backtrack until the profile likelihood does not decrease
        t = np.ones_like(step)
        accepted = np.zeros(len(idx), dtype=bool)
        for _bt in range(40):
            trial = ua + t * step
            p1 = _burr_profile(ya, np.exp(trial))[0]
            ok = (p1 >= p0 - 1e-15 * np.abs(p0)) & ~accepted & np.isfinite(p1)
            u[idx[ok]] = trial[ok]
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, t / 2.0)
        iters[idx] += 1
        stuck = ~accepted
        if stuck.any():
            active[idx[stuck]] = False
    c = np.exp(u)
    d = np.full(nrow, np.nan)
    good = ~degenerate
    if good.any():
        _, g, _, dd = _burr_profile(y[good], c[good])
        d[good] = dd
        conv[good] = np.abs(g) < GRAD_TOL
    c[degenerate] = np.nan
    return c, d, iters, conv, degenerate


def fit_batch(family, samples: np.ndarray) -> BatchFit:
    """Maximum-likelihood fit of every row of ``samples`` (shape (batch, n))."""
    fam = Family.parse(family)
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be 2-D (batch, n)")
    if x.shape[1] < 2:
        raise ValueError("need at least 2 samples per row")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if fam in POSITIVE_SUPPORT:
        x = clamp(x)
    nrow = len(x)
    degenerate = np.ptp(x, axis=1) == 0
    iters = np.zeros(nrow, dtype=np.int64)
    conv = ~degenerate
    if fam is Family.NORMAL:
        params = {"mu": x.mean(axis=1), "sigma": x.std(axis=1)}
    elif fam is Family.RAYLEIGH:
        params = {"sigma": np.sqrt((x * x).sum(axis=1) / (2 * x.shape[1]))}
    elif fam is Family.LOGNORM:
        lx = np.log(x)
        params = {"s": lx.std(axis=1), "mu_log": lx.mean(axis=1)}
    elif fam is Family.GAMMA:
        k, th, iters, conv, deg = _fit_gamma_rows(x)
        degenerate |= deg
        params = {"k": k, "theta": th}
    elif fam is Family.NAKAGAMI:
        k, th, iters, conv, deg = _fit_gamma_rows(x * x)
        degenerate |= deg
        params = {"nu": k, "omega": k * th}
    elif fam is Family.BURR:
        c, d, iters, conv, deg = _fit_burr_rows(x)
        degenerate |= deg
        params = {"c": c, "d": d}
    else:
        raise ValueError(fam)
    conv = conv & ~degenerate
    ll = np.full(nrow, np.nan)
    good = ~degenerate
    for name in params:
        params[name] = np.where(good, params[name], np.nan)
        good &= np.isfinite(params[name]) & ((params[name] > 0) | (name in ("mu", "mu_log")))
    if good.any():
        p = tuple(params[name][good][:, None] for name in PARAM_NAMES[fam])
        ll[good] = _logpdf_arrays(fam, p, x[good]).sum(axis=1)
    conv &= good
    return BatchFit(fam, params, ll, conv, iters, degenerate)


def mle_fit(family, samples) -> MLEResult:
    """Fit one sample; raises DegenerateSample or NonConvergence."""
    fam = Family.parse(family)
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    res = fit_batch(fam, x[None, :])
    if res.degenerate[0]:
        raise DegenerateSample("all samples are equal")
    if not res.converged[0]:
        raise NonConvergence(f"{fam.value} fit did not converge in {MAX_ITER} iterations")
    params = DistParams(fam, tuple(float(res.params[n][0]) for n in PARAM_NAMES[fam]))
    return MLEResult(params, float(res.log_likelihood[0]), True, int(res.iterations[0]))


def log_likelihood(family, params: DistParams, samples) -> float:
    fam = Family.parse(family)
    x = np.asarray(samples, dtype=np.float64)
    if fam in POSITIVE_SUPPORT:
        x = clamp(x)
    return float(_logpdf_arrays(fam, params.values, x).sum())
