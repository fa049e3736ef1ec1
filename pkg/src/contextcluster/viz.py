"""Clustering maps: capture per-head assignments and render them as PPM images."""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cluster import capture
from .points import FormatError, GridMeta

GOLDEN = 0.6180339887498949


@dataclass
class ClusterMap:
    stage: int
    block: int
    head: int
    grid: GridMeta
    tile_grid: GridMeta
    regions_h: int
    regions_w: int
    local_centers: int
    assignment: np.ndarray = field(repr=False)  # (regions, m) local center ids

    @property
    def filename(self):
        return f"stage{self.stage}_block{self.block}_head{self.head}.ppm"

    def label_grid(self):
        """(h, w) ids unique per (region, center) pair, laid out on the stage grid."""
        r, m = self.assignment.shape
        ids = self.assignment + np.arange(r)[:, None] * self.local_centers
        th, tw = self.tile_grid.height, self.tile_grid.width
        g = ids.reshape(self.regions_h, self.regions_w, th, tw).transpose(0, 2, 1, 3)
        return g.reshape(self.grid.height, self.grid.width)


def capture_cluster_maps(model, image):
    """One :class:`ClusterMap` per head of every executed cluster op, in
    execution order, for a single ``(h, w, 3)`` image."""
    img = np.asarray(image)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise FormatError("capture_cluster_maps takes a single image")
        img = img[0]
    with T.no_grad(), capture() as records:
        model(img[None])
    maps = []
    for rec in records:
        stage, block = rec.tag
        for h in range(rec.heads):
            maps.append(ClusterMap(
                stage, block, h, rec.grid, rec.tile_grid, rec.regions_h, rec.regions_w,
                rec.local_centers, rec.assignment[0, :, h, :].copy(),
            ))
    return maps


def palette(count, seed=0):
    """``count`` RGB colours by golden-ratio hue steps at full saturation/value."""
    start = (seed * GOLDEN) % 1.0
    out = np.empty((count, 3), dtype=np.uint8)
    for k in range(count):
        rgb = colorsys.hsv_to_rgb((start + k * GOLDEN) % 1.0, 1.0, 1.0)
        out[k] = np.round(np.array(rgb) * 255)
    return out


def render_cluster_map(cm, upscale=1, palette_seed=0, overlay=None, alpha=0.5):
    """RGB ``uint8`` image of shape ``(h*upscale, w*upscale, 3)``.

    ``overlay`` (an image in [0, 1], resized nearest-neighbour) is blended in
    with weight ``alpha``.
    """
    ids = cm.label_grid()
    colors = palette(cm.regions_h * cm.regions_w * cm.local_centers, palette_seed)
    img = colors[ids]
    if upscale > 1:
        img = img.repeat(upscale, axis=0).repeat(upscale, axis=1)
    if overlay is not None:
        src = np.asarray(overlay, dtype=np.float64)
        h, w = img.shape[:2]
        rows = np.arange(h) * src.shape[0] // h
        cols = np.arange(w) * src.shape[1] // w
        src = src[rows][:, cols] * 255.0
        img = np.round((1 - alpha) * img + alpha * src).clip(0, 255).astype(np.uint8)
    return img


def write_image(img, path):
    """Binary PPM (P6)."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected (h, w, 3) image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path):
    """Read a binary PPM (P6, maxval 255) into a ``(h, w, 3)`` uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    payload = data[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def write_cluster_maps(maps, out_dir, input_size, palette_seed=0, overlay=None):
    """Render every map upscaled to the input resolution; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for cm in maps:
        up = max(1, input_size[0] // cm.grid.height)
        path = os.path.join(out_dir, cm.filename)
        write_image(render_cluster_map(cm, up, palette_seed, overlay), path)
        paths.append(path)
    return paths
