"""Images as point sets: conversion, anchor grids, point reduction and region tiling.

Points keep the row-major order of the grid they came from. Nothing here mixes
features between points except :func:`reduce_points`, which fuses each anchor's
neighbourhood with a linear map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ConfigError", "FormatError", "GridMeta", "PointSet", "RegionView", "AnchorGrid",
    "image_to_points", "propose_anchors", "neighbor_index", "reduce_points",
    "partition_regions", "merge_regions", "isqrt_exact",
]


class ConfigError(ValueError):
    """A size or divisibility constraint of the architecture is violated."""


class FormatError(ValueError):
    """Input data does not have the expected layout."""


def isqrt_exact(v, what="value"):
    s = math.isqrt(v) if v >= 0 else -1
    if s < 1 or s * s != v:
        raise ConfigError(f"{what}={v} must be a positive perfect square")
    return s


@dataclass(frozen=True)
class GridMeta:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"grid sides must be >= 1, got {self.height}x{self.width}")

    @property
    def n(self):
        return self.height * self.width

    def positions(self):
        """(n, 2) array of (row, col) for each point in row-major order."""
        r, c = np.divmod(np.arange(self.n), self.width)
        return np.stack([r, c], axis=1).astype(np.float64)


@dataclass
class PointSet:
    """``features`` has shape ``(..., n, d)``; leading axes are batch."""

    features: Tensor
    grid: GridMeta
    channel_note: str = ""

    def __post_init__(self):
        if self.features.shape[-2] != self.grid.n:
            raise ConfigError(
                f"{self.features.shape[-2]} points do not match grid "
                f"{self.grid.height}x{self.grid.width}"
            )

    @property
    def n(self):
        return self.features.shape[-2]

    @property
    def d(self):
        return self.features.shape[-1]


def image_to_points(image, standardize=None, dtype=np.float32):
    """Append normalized pixel coordinates to an ``(h, w, 3)`` or
    ``(b, h, w, 3)`` image with values in [0, 1].

    Channels per point: r, g, b, col/w - 0.5, row/h - 0.5. ``standardize`` is
    an optional ``(mean, std)`` pair applied to the colour channels only.
    """
    img = np.asarray(image)
    if img.ndim not in (3, 4) or img.shape[-1] != 3:
        raise FormatError(f"expected (..., h, w, 3) image, got shape {img.shape}")
    h, w = img.shape[-3], img.shape[-2]
    if h < 1 or w < 1:
        raise FormatError("image must have at least one pixel")
    colors = img.astype(dtype)
    if standardize is not None:
        mu, sd = (np.asarray(v, dtype=dtype) for v in standardize)
        colors = (colors - mu) / sd
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([cols / w - 0.5, rows / h - 0.5], axis=-1).astype(dtype)
    coords = np.broadcast_to(coords, (*img.shape[:-1], 2))
    pts = np.concatenate([colors, coords], axis=-1)
    pts = pts.reshape(*img.shape[:-3], h * w, 5)
    return PointSet(Tensor(pts), GridMeta(h, w), channel_note="rgb+xy")


@dataclass(frozen=True)
class AnchorGrid:
    grid: GridMeta
    stride: int
    positions: np.ndarray = field(repr=False)  # (h', w', 2) in parent (row, col) units


def propose_anchors(grid, downsample_r):
    """Uniform anchor grid: one anchor at the centre of every non-overlapping
    ``s x s`` block, ``s = sqrt(downsample_r)``."""
    s = isqrt_exact(downsample_r, "downsample_r")
    if grid.height % s or grid.width % s:
        raise ConfigError(
            f"grid {grid.height}x{grid.width} not divisible by sqrt(downsample_r)={s}"
        )
    out = GridMeta(grid.height // s, grid.width // s)
    rows = np.arange(out.height) * s + (s - 1) / 2
    cols = np.arange(out.width) * s + (s - 1) / 2
    pos = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    return AnchorGrid(out, s, pos)


def neighbor_index(grid, k_neighbors, downsample_r):
    """Row indices of every anchor's neighbourhood, shape ``(n', k)``.

    The neighbourhood is a ``t x t`` window (``t = sqrt(k)``) around each
    anchor's block, stepping by ``s = sqrt(downsample_r)``. With ``t == s`` the
    windows tile the grid; with ``t = 3, s = 2`` they match a 3x3 stride-2
    convolution with border replication. Order inside a window is row-major.
    """
    t = isqrt_exact(k_neighbors, "k_neighbors")
    anchors = propose_anchors(grid, downsample_r)
    s = anchors.stride
    if grid.height < t or grid.width < t:
        raise ConfigError(
            f"grid {grid.height}x{grid.width} too small for a {t}x{t} neighbourhood"
        )
    pad = (t - s + 1) // 2
    ah, aw = anchors.grid.height, anchors.grid.width
    r0 = np.arange(ah) * s - pad
    c0 = np.arange(aw) * s - pad
    rr = np.clip(r0[:, None] + np.arange(t)[None, :], 0, grid.height - 1)  # (ah, t)
    cc = np.clip(c0[:, None] + np.arange(t)[None, :], 0, grid.width - 1)  # (aw, t)
    idx = rr[:, None, :, None] * grid.width + cc[None, :, None, :]  # (ah, aw, t, t)
    return idx.reshape(ah * aw, t * t), anchors.grid


def reduce_points(ps, k_neighbors, downsample_r, weight, bias, gamma, beta, eps=1e-5):
    """Gather each anchor's ``k`` neighbours, concatenate them channel-wise,
    fuse with ``weight`` (``(k*d_in, d_out)``) and ``bias``, then normalize."""
    idx, out_grid = neighbor_index(ps.grid, k_neighbors, downsample_r)
    x = ps.features
    k, d = idx.shape[1], x.shape[-1]
    if weight.shape[0] != k * d:
        raise T.ShapeError(f"reducer weight expects {weight.shape[0]} inputs, got {k}*{d}")
    nb = T.gather_rows(x, idx)  # (..., n', k, d)
    nb = T.reshape(nb, (*x.shape[:-2], idx.shape[0], k * d))
    y = T.matmul(nb, weight)
    y = T.add(y, T.broadcast_to(bias, y.shape))
    y = T.group_norm(y, 1, gamma, beta, eps)
    return PointSet(y, out_grid)


@dataclass
class RegionView:
    """Region tiles stacked along a new axis: ``tiles`` has shape
    ``(..., r, m, d)``. ``index[t, j]`` is the parent row of tile ``t``'s
    ``j``-th point."""

    tiles: Tensor
    tile_grid: GridMeta
    parent: GridMeta
    regions_h: int
    regions_w: int
    index: np.ndarray = field(repr=False)

    @property
    def regions(self):
        return self.regions_h * self.regions_w

    def tile(self, i):
        """PointSet of tile ``i`` (a copy, outside the stacked layout)."""
        sel = T.reshape(
            T.split(self.tiles, [1] * self.regions, axis=-3)[i],
            (*self.tiles.shape[:-3], self.tile_grid.n, self.tiles.shape[-1]),
        )
        return PointSet(sel, self.tile_grid)

    @classmethod
    def from_tiles(cls, tiles, parent, regions):
        """Rebuild a view from a list of tile PointSets (in tile order)."""
        s = isqrt_exact(regions, "regions")
        if len(tiles) != regions:
            raise ValueError(f"expected {regions} tiles, got {len(tiles)}")
        tg = tiles[0].grid
        stacked = T.concat(
            [T.reshape(p.features, (*p.features.shape[:-2], 1, *p.features.shape[-2:]))
             for p in tiles],
            axis=-3,
        )
        return cls(stacked, tg, parent, s, s, _tile_index(parent, s, s))


def _tile_index(grid, rh, rw):
    th, tw = grid.height // rh, grid.width // rw
    idx = np.arange(grid.n).reshape(rh, th, rw, tw).transpose(0, 2, 1, 3)
    return idx.reshape(rh * rw, th * tw)


def partition_regions(ps, regions):
    """Split the grid into ``regions`` equal rectangular tiles (a square
    number, ``sqrt(regions)`` along each side)."""
    s = isqrt_exact(regions, "regions")
    g = ps.grid
    if g.height % s or g.width % s:
        raise ConfigError(f"grid {g.height}x{g.width} not divisible into {regions} regions")
    th, tw = g.height // s, g.width // s
    x = ps.features
    lead, d = x.shape[:-2], x.shape[-1]
    nl = len(lead)
    y = T.reshape(x, (*lead, s, th, s, tw, d))
    y = T.transpose(y, (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4))
    y = T.reshape(y, (*lead, regions, th * tw, d))
    return RegionView(y, GridMeta(th, tw), g, s, s, _tile_index(g, s, s))


def merge_regions(rv):
    """Inverse of :func:`partition_regions`."""
    x = rv.tiles
    if x.shape[-3] != rv.regions or x.shape[-2] != rv.tile_grid.n:
        raise ValueError(
            f"region view incomplete: expected {rv.regions} tiles of {rv.tile_grid.n} points"
        )
    lead, d = x.shape[:-3], x.shape[-1]
    nl = len(lead)
    th, tw = rv.tile_grid.height, rv.tile_grid.width
    y = T.reshape(x, (*lead, rv.regions_h, rv.regions_w, th, tw, d))
    y = T.transpose(y, (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4))
    y = T.reshape(y, (*lead, rv.parent.n, d))
    return PointSet(y, rv.parent)
