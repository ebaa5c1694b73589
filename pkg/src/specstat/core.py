"""Image, label and parameter-map types plus their file formats.

Formats: binary PGM (P5, 8- or 16-bit big-endian) for scans and masks, PPM
(P6) for overlays, and a small CSV layout for per-patch parameter maps.
"""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# positive-support likelihoods clamp intensities below this value
EPSILON = 1e-6


class FormatError(ValueError):
    """Raised for malformed or inconsistent files."""


class MalformedHeader(FormatError):
    pass


class ClassId(enum.IntEnum):
    BACKGROUND = 0
    ILM = 1
    RPE = 2
    TOOL = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "ClassId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown class {name!r}") from None


# the three classes that get binary maps, in output order
MAP_CLASSES = (ClassId.ILM, ClassId.RPE, ClassId.TOOL)


@dataclass(frozen=True)
class BScan:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"B-scan must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or np.any(px < 0):
            raise ValueError("B-scan pixels must be finite and non-negative")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LabelMap:
    class_id: ClassId
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("label mask must be 2-D")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "class_id", ClassId(self.class_id))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class ParameterMap:
    """Per-patch values of one fitted distribution parameter."""

    family: str
    param_name: str
    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("parameter map must be 2-D")
        ok = np.isfinite(v) if self.valid is None else np.array(self.valid, dtype=bool)
        if ok.shape != v.shape:
            raise ValueError("valid mask shape does not match values")
        v.setflags(write=False)
        ok.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", ok)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------- PGM / PPM


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header")
    return data[start:pos], pos


def _parse_netpbm(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if data[:2] != magic:
        raise MalformedHeader(f"expected magic {magic.decode()}, got {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise MalformedHeader(f"non-integer header field {tok!r}") from None
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedHeader("image dimensions must be positive")
    return width, height, maxval, pos + 1


def read_pgm_array(path) -> tuple[np.ndarray, int]:
    """Decode a P5 file into a (height, width) integer array and its maxval."""
    data = Path(path).read_bytes()
    width, height, maxval, offset = _parse_netpbm(data, b"P5")
    if maxval not in (255, 65535):
        raise MalformedHeader(f"maxval must be 255 or 65535, got {maxval}")
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return arr.astype(np.int64), maxval


def load_pgm(path) -> BScan:
    arr, _ = read_pgm_array(path)
    return BScan(arr.astype(np.float64))


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_pgm(array: np.ndarray, path, maxval: int = 255) -> None:
    """Write integer samples as P5; values are clipped to [0, maxval]."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    arr = np.clip(np.rint(np.asarray(array, dtype=np.float64)), 0, maxval)
    dtype = ">u2" if maxval == 65535 else "u1"
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    _atomic_write(path, header + arr.astype(dtype).tobytes())


def save_scan_pgm(scan: BScan, path) -> None:
    """Save a scan, choosing 8 or 16 bits by its range (values are rounded)."""
    maxval = 255 if scan.pixels.max() <= 255 else 65535
    save_pgm(scan.pixels, path, maxval=maxval)


def save_label_pgm(label: LabelMap, path) -> None:
    save_pgm(np.where(label.mask, 255, 0), path, maxval=255)


def load_label_pgm(path, class_id: ClassId) -> LabelMap:
    arr, _ = read_pgm_array(path)
    return LabelMap(class_id, arr > 0)


def save_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    h, w, _ = rgb.shape
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def load_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, maxval, offset = _parse_netpbm(data, b"P6")
    if maxval != 255:
        raise MalformedHeader("only 8-bit PPM is supported")
    need = width * height * 3
    if len(data) - offset < need:
        raise FormatError("truncated payload")
    return np.frombuffer(data[offset:offset + need], dtype=np.uint8).reshape(height, width, 3)


# ------------------------------------------------------------------ overlay

CLASS_COLORS = {
    ClassId.ILM: (0, 255, 0),
    ClassId.RPE: (135, 206, 250),
    ClassId.TOOL: (160, 32, 240),
}
# painted in this order, so later entries win on overlap
_PAINT_ORDER = (ClassId.RPE, ClassId.ILM, ClassId.TOOL)


def overlay(scan: BScan, maps, alpha: float = 0.5) -> np.ndarray:
    """Grayscale rendering of ``scan`` with class masks tinted on top."""
    peak = scan.pixels.max()
    gray = np.zeros(scan.shape) if peak == 0 else scan.pixels / peak * 255.0
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    by_class = {}
    for m in maps:
        if m.shape != scan.shape:
            raise ValueError(f"mask shape {m.shape} does not match scan {scan.shape}")
        by_class[m.class_id] = by_class.get(m.class_id, np.zeros(scan.shape, bool)) | m.mask
    for cid in _PAINT_ORDER:
        if cid in by_class:
            sel = by_class[cid]
            rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.asarray(CLASS_COLORS[cid], float)
    return np.rint(rgb).astype(np.uint8)


# ---------------------------------------------------------- parameter CSV


def _fmt(v: float) -> str:
    if not math.isfinite(v):
        return "nan"
    return "%.17g" % v


def save_param_csv(pmap: ParameterMap, path) -> None:
    lines = [f"{pmap.family},{pmap.param_name},{pmap.rows},{pmap.cols}"]
    for r in range(pmap.rows):
        row = [_fmt(v) if ok else "nan" for v, ok in zip(pmap.values[r], pmap.valid[r])]
        lines.append(",".join(row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_param_csv(path) -> ParameterMap:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    header = text[0].strip().split(",")
    if len(header) != 4:
        raise FormatError(f"bad header line {text[0]!r}")
    family, name = header[0], header[1]
    try:
        rows, cols = int(header[2]), int(header[3])
    except ValueError:
        raise FormatError(f"bad dimensions in header {text[0]!r}") from None
    values = []
    for line in text[1:]:
        line = line.strip()
        if line:
            values.extend(float(tok) for tok in line.split(","))
    if len(values) != rows * cols:
        raise FormatError(f"header declares {rows}x{cols} cells but body has {len(values)} values")
    arr = np.array(values, dtype=np.float64).reshape(rows, cols)
    return ParameterMap(family, name, arr, np.isfinite(arr))
