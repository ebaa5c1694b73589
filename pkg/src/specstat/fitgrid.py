"""Tile a B-scan into square patches and fit a distribution family per patch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BScan, ParameterMap
from .dist import PARAM_NAMES, REPORTED, Family, fit_batch

DEFAULT_PATCH = 7


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    patches: np.ndarray  # (rows, cols, patch_size**2), row-major within each patch
    scan_shape: tuple[int, int]

    @property
    def rows(self) -> int:
        return self.patches.shape[0]

    @property
    def cols(self) -> int:
        return self.patches.shape[1]


def grid_shape(scan_shape, patch_size: int = DEFAULT_PATCH) -> tuple[int, int]:
    return scan_shape[0] // patch_size, scan_shape[1] // patch_size


def tile(scan: BScan, patch_size: int = DEFAULT_PATCH) -> PatchGrid:
    """Non-overlapping tiling; trailing partial rows and columns are dropped."""
    if patch_size < 3:
        raise ValueError("patch_size must be at least 3")
    rows, cols = grid_shape(scan.shape, patch_size)
    if rows < 1 or cols < 1:
        raise ValueError(f"scan {scan.shape} is smaller than one {patch_size}x{patch_size} patch")
    p = patch_size
    px = scan.pixels[: rows * p, : cols * p]
    patches = px.reshape(rows, p, cols, p).transpose(0, 2, 1, 3).reshape(rows, cols, p * p)
    return PatchGrid(p, np.ascontiguousarray(patches), scan.shape)


def fit_patches(grid: PatchGrid, family) -> list[ParameterMap]:
    """One ParameterMap per reported parameter; failed cells are marked invalid."""
    fam = Family.parse(family)
    flat = grid.patches.reshape(-1, grid.patches.shape[-1])
    res = fit_batch(fam, flat)
    ok = res.ok.reshape(grid.rows, grid.cols)
    maps = []
    for name in REPORTED[fam]:
        vals = res.params[name].reshape(grid.rows, grid.cols)
        maps.append(ParameterMap(fam.value, name, np.where(ok, vals, np.nan), ok))
    return maps


def fit_scan(scan: BScan, family, patch_size: int = DEFAULT_PATCH) -> list[ParameterMap]:
    return fit_patches(tile(scan, patch_size), family)


def upsample_to_pixels(pmap: ParameterMap, scan_shape, patch_size: int = DEFAULT_PATCH) -> np.ndarray:
    """Replicate each patch value over its block; margins copy the nearest patch, invalid cells give 0."""
    h, w = scan_shape
    if grid_shape((h, w), patch_size) != (pmap.rows, pmap.cols):
        raise ValueError(
            f"map {pmap.rows}x{pmap.cols} inconsistent with scan {h}x{w} at patch size {patch_size}")
    vals = np.where(pmap.valid, pmap.values, 0.0)
    img = np.repeat(np.repeat(vals, patch_size, axis=0), patch_size, axis=1)
    return np.pad(img, ((0, h - img.shape[0]), (0, w - img.shape[1])), mode="edge")


def map_names(family) -> tuple[str, ...]:
    return REPORTED[Family.parse(family)]


__all__ = ["PatchGrid", "tile", "fit_patches", "fit_scan", "upsample_to_pixels", "grid_shape",
           "DEFAULT_PATCH", "PARAM_NAMES", "map_names"]
