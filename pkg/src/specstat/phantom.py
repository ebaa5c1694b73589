"""Synthetic speckle B-scans with exact ground truth.

A scene is two curved retinal bands (ILM above RPE) and an optional tilted
tool bar casting a shadow column. Every pixel's class is decided by geometry
and its intensity is an independent draw from that class's distribution, via
counter-based uniforms keyed by (seed, pixel index).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .core import MAP_CLASSES, BScan, ClassId, LabelMap
from .dist import DistParams, Family, _ppf_arrays, uniforms


class InvalidGeometry(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    class_id: ClassId
    family: Family
    params: DistParams

    def to_dict(self) -> dict:
        return {"class": self.class_id.label, "family": self.family.value, "params": self.params.as_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        fam = Family.parse(d["family"])
        return cls(ClassId.parse(d["class"]), fam, DistParams.of(fam, **d["params"]))


@dataclass(frozen=True)
class Band:
    """Centre depth c(x) = Σ coeffs[i]·x^i over normalised column x ∈ [−1, 1]."""

    coeffs: tuple[float, ...]
    thickness: float

    def center(self, width: int) -> np.ndarray:
        x = np.linspace(-1.0, 1.0, width)
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def edges(self, width: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.center(width)
        return c - self.thickness / 2.0, c + self.thickness / 2.0


@dataclass(frozen=True)
class Tool:
    present: bool = True
    row_span: tuple[float, float] = (60.0, 95.0)
    col_span: tuple[float, float] = (150.0, 330.0)
    angle_deg: float = 0.0
    shadow: bool = True

    def mask(self, shape) -> np.ndarray:
        h, w = shape
        if not self.present:
            return np.zeros(shape, dtype=bool)
        r0, r1 = self.row_span
        c0, c1 = self.col_span
        rc, cc = (r0 + r1) / 2.0, (c0 + c1) / 2.0
        a = math.radians(self.angle_deg)
        rr, cols = np.mgrid[0:h, 0:w].astype(np.float64)
        dr, dc = rr - rc, cols - cc
        # rotate into the bar's own frame
        along = dc * math.cos(a) + dr * math.sin(a)
        across = -dc * math.sin(a) + dr * math.cos(a)
        return (np.abs(along) <= (c1 - c0) / 2.0) & (np.abs(across) <= (r1 - r0) / 2.0)


@dataclass(frozen=True)
class PhantomConfig:
    height: int
    width: int
    ilm: Band
    rpe: Band
    tool: Tool
    background: RegionSpec
    regions: tuple[RegionSpec, ...]  # one per ILM, RPE, Tool
    geometry_jitter: float = 0.0

    def region(self, cid: ClassId) -> RegionSpec:
        if cid is ClassId.BACKGROUND:
            return self.background
        for r in self.regions:
            if r.class_id is cid:
                return r
        raise KeyError(cid)

    # ------------------------------------------------------------ json

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "ilm": {"coeffs": list(self.ilm.coeffs), "thickness": self.ilm.thickness},
            "rpe": {"coeffs": list(self.rpe.coeffs), "thickness": self.rpe.thickness},
            "tool": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.tool).items()},
            "background": self.background.to_dict(),
            "regions": [r.to_dict() for r in self.regions],
            "geometry_jitter": self.geometry_jitter,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        t = d.get("tool", {})
        tool = Tool(
            present=bool(t.get("present", True)),
            row_span=tuple(float(v) for v in t.get("row_span", Tool.row_span)),
            col_span=tuple(float(v) for v in t.get("col_span", Tool.col_span)),
            angle_deg=float(t.get("angle_deg", 0.0)),
            shadow=bool(t.get("shadow", True)),
        )
        cfg = cls(
            height=int(d["height"]),
            width=int(d["width"]),
            ilm=Band(tuple(float(c) for c in d["ilm"]["coeffs"]), float(d["ilm"]["thickness"])),
            rpe=Band(tuple(float(c) for c in d["rpe"]["coeffs"]), float(d["rpe"]["thickness"])),
            tool=tool,
            background=RegionSpec.from_dict(d["background"]),
            regions=tuple(RegionSpec.from_dict(r) for r in d["regions"]),
            geometry_jitter=float(d.get("geometry_jitter", 0.0)),
        )
        validate(cfg)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "PhantomConfig":
        return cls.from_dict(json.loads(text))


def _geometry_errors(cfg: PhantomConfig) -> list[str]:
    errs = []
    if cfg.height < 7 or cfg.width < 7:
        errs.append("image must be at least 7x7")
        return errs
    if cfg.ilm.thickness <= 0 or cfg.rpe.thickness <= 0:
        errs.append("band thickness must be positive")
    ilm_top, ilm_bot = cfg.ilm.edges(cfg.width)
    rpe_top, rpe_bot = cfg.rpe.edges(cfg.width)
    if np.any(ilm_top < 0) or np.any(rpe_bot > cfg.height - 1):
        errs.append("bands must lie within the image")
    if np.any(ilm_bot >= rpe_top):
        errs.append("ILM must lie strictly above RPE at every column")
    if cfg.tool.present:
        tm = cfg.tool.mask((cfg.height, cfg.width))
        if not tm.any():
            errs.append("tool lies outside the image")
        else:
            rows = np.arange(cfg.height)[:, None]
            lowest = np.where(tm, rows, -1).max(axis=0)
            cols = lowest >= 0
            if np.any(lowest[cols] >= ilm_top[cols]):
                errs.append("tool must lie above the ILM")
    classes = {r.class_id for r in cfg.regions}
    if classes != set(MAP_CLASSES) or len(cfg.regions) != 3:
        errs.append("need exactly one region spec for each of ILM, RPE, Tool")
    if cfg.background.class_id is not ClassId.BACKGROUND:
        errs.append("background region must have class Background")
    if cfg.geometry_jitter < 0:
        errs.append("geometry_jitter must be non-negative")
    return errs


def validate(cfg: PhantomConfig) -> None:
    errs = _geometry_errors(cfg)
    if errs:
        raise InvalidGeometry("; ".join(errs))


def class_image(cfg: PhantomConfig) -> np.ndarray:
    """Per-pixel ClassId values; the classes partition the image."""
    h, w = cfg.height, cfg.width
    rows = np.arange(h, dtype=np.float64)[:, None]
    labels = np.full((h, w), int(ClassId.BACKGROUND), dtype=np.int8)
    for band, cid in ((cfg.ilm, ClassId.ILM), (cfg.rpe, ClassId.RPE)):
        top, bot = band.edges(w)
        labels[(rows >= top[None, :]) & (rows <= bot[None, :])] = int(cid)
    if cfg.tool.present:
        tm = cfg.tool.mask((h, w))
        labels[tm] = int(ClassId.TOOL)
        if cfg.tool.shadow:
            lowest = np.where(tm, np.arange(h)[:, None], -1).max(axis=0)
            shade = (rows > lowest[None, :]) & (lowest[None, :] >= 0)
            labels[shade] = int(ClassId.BACKGROUND)
    return labels


def generate(cfg: PhantomConfig, seed: int) -> tuple[BScan, list[LabelMap]]:
    validate(cfg)
    labels = class_image(cfg)
    u = uniforms(seed, labels.size).reshape(labels.shape)
    pixels = np.empty(labels.shape, dtype=np.float64)
    for cid in ClassId:
        sel = labels == int(cid)
        if sel.any():
            spec = cfg.region(cid)
            pixels[sel] = _ppf_arrays(spec.family, spec.params.values, u[sel])
    maps = [LabelMap(cid, labels == int(cid)) for cid in MAP_CLASSES]
    return BScan(pixels), maps


# ----------------------------------------------------------------- presets

# Default speckle: Gamma everywhere with roughly equal means, so classes differ
# in texture (shape k) rather than brightness.
DEFAULT_REGIONS = {
    ClassId.BACKGROUND: (2.0, 50.0),
    ClassId.ILM: (6.0, 17.0),
    ClassId.RPE: (20.0, 5.0),
    ClassId.TOOL: (60.0, 1.7),
}


def _gamma_region(cid: ClassId) -> RegionSpec:
    k, th = DEFAULT_REGIONS[cid]
    return RegionSpec(cid, Family.GAMMA, DistParams.of(Family.GAMMA, k=k, theta=th))


PRESETS = ("train_geometry", "shifted_geometry")


def default_config(preset: str = "train_geometry") -> PhantomConfig:
    background = _gamma_region(ClassId.BACKGROUND)
    regions = tuple(_gamma_region(c) for c in MAP_CLASSES)
    if preset == "train_geometry":
        cfg = PhantomConfig(
            height=512, width=512,
            ilm=Band((190.0, 0.0, 25.0), 36.0),
            rpe=Band((330.0, 0.0, 25.0), 44.0),
            tool=Tool(True, (70.0, 102.0), (150.0, 330.0), 12.0, True),
            background=background, regions=regions, geometry_jitter=12.0,
        )
    elif preset == "shifted_geometry":
        # deeper bands, flipped curvature, thickness ±40 %, tool moved
        cfg = PhantomConfig(
            height=512, width=512,
            ilm=Band((265.0, 0.0, -25.0), 36.0 * 1.4),
            rpe=Band((405.0, 0.0, -25.0), 44.0 * 0.6),
            tool=Tool(True, (120.0, 152.0), (250.0, 430.0), -15.0, True),
            background=background, regions=regions, geometry_jitter=12.0,
        )
    else:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    validate(cfg)
    return cfg


def _coef_weights(n: int) -> np.ndarray:
    # offset moves fully, tilt and curvature half as much, higher orders less
    return np.array([1.0, 0.5, 0.5, 0.25, 0.25, 0.25][:n] + [0.1] * max(0, n - 6))


def perturb(cfg: PhantomConfig, seed: int) -> PhantomConfig:
    """Jitter band curves and tool placement by up to ``geometry_jitter`` pixels.

    Perturbations violating the geometry invariants are shrunk by halves until
    they fit; distributions are never touched.
    """
    amp = cfg.geometry_jitter
    if amp < 0:
        raise InvalidGeometry("geometry_jitter must be non-negative")
    if amp == 0:
        return cfg
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x9E3779B9])
    d_ilm = rng.uniform(-1, 1, len(cfg.ilm.coeffs)) * amp * _coef_weights(len(cfg.ilm.coeffs))
    d_rpe = rng.uniform(-1, 1, len(cfg.rpe.coeffs)) * amp * _coef_weights(len(cfg.rpe.coeffs))
    d_tool = rng.uniform(-1, 1, 3) * np.array([amp, amp, amp * 0.25])
    scale = 1.0
    for _ in range(30):
        tool = cfg.tool
        if tool.present:
            tool = replace(
                tool,
                row_span=(tool.row_span[0] + scale * d_tool[0], tool.row_span[1] + scale * d_tool[0]),
                col_span=(tool.col_span[0] + scale * d_tool[1], tool.col_span[1] + scale * d_tool[1]),
                angle_deg=tool.angle_deg + scale * d_tool[2],
            )
        cand = replace(
            cfg,
            ilm=Band(tuple(float(c) for c in np.add(cfg.ilm.coeffs, scale * d_ilm)), cfg.ilm.thickness),
            rpe=Band(tuple(float(c) for c in np.add(cfg.rpe.coeffs, scale * d_rpe)), cfg.rpe.thickness),
            tool=tool,
        )
        if not _geometry_errors(cand):
            return cand
        scale /= 2.0
    return cfg


def volume(cfg: PhantomConfig, seed: int, count: int, scan_jitter: float = 3.0):
    """``count`` scans of one phantom eye.

    The eye's geometry is ``perturb(cfg, seed)``; each scan then gets a small
    extra jitter and its own speckle seed.
    """
    eye = perturb(cfg, seed)
    eye = replace(eye, geometry_jitter=scan_jitter)
    out = []
    for i in range(count):
        s = (int(seed) * 1_000_003 + i) & 0xFFFFFFFF
        out.append(generate(perturb(eye, s), s))
    return out


__all__ = ["RegionSpec", "Band", "Tool", "PhantomConfig", "InvalidGeometry", "generate", "default_config",
           "perturb", "class_image", "validate", "volume", "PRESETS"]
