"""The context cluster operation and the block built around it.

Within each region and head, points are projected into a similarity space and a
value space. Centers are proposed on a uniform grid (block means), every point
joins its most cosine-similar center, each cluster's values are pooled with
sigmoid-scaled similarity weights plus the value center, and the pooled vector
is sent back to the cluster's points with the same weights.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import GroupNorm, Linear, Module, param
from .points import ConfigError, GridMeta, PointSet, isqrt_exact, merge_regions, partition_regions
from .tensor import Tensor

__all__ = [
    "ClusterAssignment", "ClusterRecord", "center_pool_matrix", "propose_centers",
    "fps_indices", "propose_centers_fps", "cosine_similarity", "assign_clusters",
    "aggregate", "dispatch", "update_centers", "cluster_mix", "ContextCluster",
    "CocBlock", "capture",
]

COS_EPS = 1e-6


# -- centers ---------------------------------------------------------------

def center_pool_matrix(grid, c):
    """``(c, n)`` averaging matrix over a ``sqrt(c) x sqrt(c)`` block tiling of
    ``grid``. Uneven sides split as evenly as possible, larger blocks first."""
    s = isqrt_exact(c, "local_centers")
    if s > grid.height or s > grid.width:
        raise ConfigError(f"{c} centers do not fit a {grid.height}x{grid.width} region")
    rows = np.array_split(np.arange(grid.height), s)
    cols = np.array_split(np.arange(grid.width), s)
    pool = np.zeros((c, grid.n))
    for i, rb in enumerate(rows):
        for j, cb in enumerate(cols):
            members = (rb[:, None] * grid.width + cb[None, :]).ravel()
            pool[i * s + j, members] = 1.0 / members.size
    return pool


def propose_centers(points, grid, c):
    """Block-mean centers for ``points`` of shape ``(..., n, d)`` laid out on
    ``grid``. Returns ``(..., c, d)``."""
    if isinstance(points, PointSet):
        points, grid = points.features, points.grid
    pool = center_pool_matrix(grid, c).astype(points.dtype)
    with T.count_macs("centers"):
        return T.matmul(pool, points)


def fps_indices(positions, c, start=0):
    """Farthest point sampling: greedily add the point farthest from the chosen
    set. Ties go to the lowest index; chosen points are never re-picked."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if c > n:
        raise ValueError(f"cannot sample {c} centers from {n} points")
    chosen = [int(start)]
    dist = np.linalg.norm(pos - pos[start], axis=1)
    dist[start] = -1.0
    for _ in range(c - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
        dist[chosen] = -1.0
    return np.array(chosen)


def fps_pool_matrix(positions, c, k=None, start=0):
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    k = max(1, n // c) if k is None else k
    idx = fps_indices(pos, c, start)
    pool = np.zeros((c, n))
    for j, i in enumerate(idx):
        d = np.linalg.norm(pos - pos[i], axis=1)
        near = np.argsort(d, kind="stable")[:k]
        pool[j, near] = 1.0 / k
    return pool, idx


def propose_centers_fps(points, positions, c, k=None, start=0):
    """Centers for irregular point sets: FPS on ``positions`` picks ``c``
    seeds, each center feature is the mean of its seed's ``k`` nearest points.

    Returns ``(centers, seed_indices)``.
    """
    pool, idx = fps_pool_matrix(positions, c, k, start)
    with T.count_macs("centers"):
        return T.matmul(pool.astype(points.dtype), points), idx


# -- similarity and assignment ----------------------------------------------

def cosine_similarity(points, centers, eps=COS_EPS):
    """``(..., c, n)`` cosine similarities between ``centers`` ``(..., c, d)``
    and ``points`` ``(..., n, d)``, clamped to [-1, 1]."""
    pn = T.l2_normalize(points, eps)
    cn = T.l2_normalize(centers, eps)
    nd = points.ndim
    with T.count_macs("similarity"):
        s = T.matmul(cn, T.transpose(pn, (*range(nd - 2), nd - 1, nd - 2)))
    return T.clip(s, -1.0, 1.0)


@dataclass
class ClusterAssignment:
    center_index: np.ndarray  # (..., n)
    cluster_sizes: np.ndarray  # (..., c)

    @property
    def num_centers(self):
        return self.cluster_sizes.shape[-1]

    def mask(self, dtype=np.float32):
        """One-hot membership, shape ``(..., c, n)``."""
        c = self.num_centers
        onehot = self.center_index[..., None, :] == np.arange(c)[:, None]
        return onehot.astype(dtype)


def assign_clusters(sim):
    """Hard assignment of every point to its most similar center (lowest
    center index on ties)."""
    s = sim.data if isinstance(sim, Tensor) else np.asarray(sim)
    if s.shape[-2] < 1:
        raise ValueError("need at least one center")
    idx = np.argmax(s, axis=-2)
    c = s.shape[-2]
    sizes = (idx[..., None, :] == np.arange(c)[:, None]).sum(-1)
    return ClusterAssignment(idx, sizes)


def update_centers(points, assignment, centers, iters, eps=COS_EPS):
    """Repeat ``iters`` times: move every non-empty center to the mean of its
    members, then reassign. Returns ``(centers, assignment, similarity)``;
    similarity is None when ``iters == 0``."""
    sim = None
    for _ in range(iters):
        mask = assignment.mask(points.dtype)
        counts = mask.sum(-1, keepdims=True)
        empty = np.broadcast_to(counts == 0, centers.shape).astype(points.dtype)
        inv = np.broadcast_to(1.0 / np.maximum(counts, 1.0), centers.shape).astype(points.dtype)
        with T.count_macs("center_update"):
            sums = T.matmul(mask, points)
        centers = T.add(T.mul(sums, inv), T.mul(centers, empty))
        sim = cosine_similarity(points, centers, eps)
        assignment = assign_clusters(sim)
    return centers, assignment, sim


# -- aggregation and dispatch (single-cluster reference forms) --------------

def _weights(s, alpha, beta):
    return T.sigmoid(T.add(T.mul(s, alpha), beta))


def aggregate(values, value_center, sims, alpha, beta):
    """Pool one cluster: ``(v_c + sum_i w_i v_i) / (1 + sum_i w_i)`` with
    ``w_i = sigmoid(alpha * s_i + beta)``.

    ``values`` is ``(m, d)``, ``value_center`` ``(d,)``, ``sims`` ``(m,)``.
    An empty cluster returns the value center unchanged.
    """
    values = T._as_tensor(values)
    value_center = T._as_tensor(value_center, like=values)
    if values.shape[0] == 0:
        return T.div(value_center, 1.0)
    w = _weights(T._as_tensor(sims, like=values), alpha, beta)
    m = w.shape[0]
    num = T.add(value_center, T.reshape(T.matmul(T.reshape(w, (1, m)), values), value_center.shape))
    den = T.add(T.sum(w), 1.0)
    return T.div(num, T.broadcast_to(den, num.shape))


def dispatch(point, pooled, sim, alpha, beta, weight, bias=None):
    """``p + FC(sigmoid(alpha * s + beta) * g)`` for a single point."""
    point = T._as_tensor(point)
    w = _weights(T._as_tensor(sim, like=point), alpha, beta)
    msg = T.mul(pooled, w)
    d = msg.shape[-1]
    out = T.reshape(T.matmul(T.reshape(msg, (1, d)), weight), (weight.shape[1],))
    if bias is not None:
        out = T.add(out, bias)
    return T.add(point, out)


# -- vectorized operator -----------------------------------------------------

def cluster_mix(sim_pts, val_pts, sim_centers, val_centers, alpha, beta,
                fc_weight, fc_bias, center_update_iters=0):
    """Cluster, aggregate and dispatch for a batch of independent groups.

    ``sim_pts``/``val_pts`` are ``(g, m, e)``, centers ``(g, c, e)``; ``alpha``
    and ``beta`` are scalars or tensors shaped like the ``(g, c, m)``
    similarity. Returns ``(out, assignment, similarity)`` with ``out`` shaped
    like ``val_pts``.
    """
    sim = cosine_similarity(sim_pts, sim_centers)
    assignment = assign_clusters(sim)
    if center_update_iters:
        _, assignment, sim = update_centers(sim_pts, assignment, sim_centers, center_update_iters)
    weights = T.mul(_weights(sim, alpha, beta), assignment.mask(sim.dtype))
    with T.count_macs("aggregate"):
        num = T.add(T.matmul(weights, val_pts), val_centers)
    den = T.add(T.sum(weights, axis=-1, keepdims=True), 1.0)
    pooled = T.div(num, T.broadcast_to(den, num.shape))
    with T.count_macs("dispatch"):
        sent = T.matmul(T.transpose(weights, (0, 2, 1)), pooled)
        msg = T.matmul(sent, fc_weight)
    msg = T.add(msg, T.broadcast_to(fc_bias, msg.shape))
    return T.add(val_pts, msg), assignment, sim


# -- instrumentation ---------------------------------------------------------

@dataclass
class ClusterRecord:
    """What one context cluster call did. ``assignment`` is
    ``(batch, regions, heads, m)`` local center indices."""

    tag: tuple
    grid: GridMeta
    tile_grid: GridMeta
    regions_h: int
    regions_w: int
    heads: int
    local_centers: int
    assignment: np.ndarray = field(repr=False)
    cluster_sizes: np.ndarray = field(repr=False)
    sim_stats: dict = field(default_factory=dict)
    macs: dict = field(default_factory=dict)


_recorders: list[list] = []


@contextmanager
def capture():
    """Collect a :class:`ClusterRecord` for every context cluster call."""
    records: list[ClusterRecord] = []
    _recorders.append(records)
    try:
        yield records
    finally:
        _recorders.remove(records)


# -- modules -----------------------------------------------------------------

class ContextCluster(Module):
    """Multi-head context cluster operation on ``(b, n, d)`` points."""

    def __init__(self, dim, heads, head_dim, rng, dtype=np.float32):
        he = heads * head_dim
        self.sim_proj = Linear(dim, he, rng, dtype)
        self.val_proj = Linear(dim, he, rng, dtype)
        self.alpha = param(np.ones(heads), dtype)
        self.beta = param(np.zeros(heads), dtype)
        self.dispatch_fc = Linear(head_dim, head_dim, rng, dtype)
        self.fuse = Linear(he, dim, rng, dtype)
        self._heads = heads
        self._head_dim = head_dim
        self.tag = ()

    def _split_heads(self, x):
        # (b, r, m, h*e) -> (b*r*h, m, e)
        b, r, m, _ = x.shape
        h, e = self._heads, self._head_dim
        x = T.reshape(x, (b, r, m, h, e))
        x = T.transpose(x, (0, 1, 3, 2, 4))
        return T.reshape(x, (b * r * h, m, e))

    def _merge_heads(self, x, b, r):
        h, e = self._heads, self._head_dim
        m = x.shape[-2]
        x = T.reshape(x, (b, r, h, m, e))
        x = T.transpose(x, (0, 1, 3, 2, 4))
        return T.reshape(x, (b, r, m, h * e))

    def __call__(self, x, grid, regions=1, local_centers=4, partition=True,
                 center_update_iters=0, center_proposal="grid"):
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1, *x.shape))
        b, n, d = x.shape
        with T.mac_counter() as macs:
            if partition:
                rv = partition_regions(PointSet(x, grid), regions)
                tiles, tile_grid, rh, rw = rv.tiles, rv.tile_grid, rv.regions_h, rv.regions_w
            else:
                if regions != 1:
                    raise ConfigError("regions must be 1 when partitioning is disabled")
                tiles, tile_grid, rh, rw = T.reshape(x, (b, 1, n, d)), grid, 1, 1
            r = rh * rw
            m = tile_grid.n
            ps = self._split_heads(self.sim_proj(tiles))
            pv = self._split_heads(self.val_proj(tiles))
            if center_proposal == "fps":
                pool, _ = fps_pool_matrix(tile_grid.positions(), local_centers)
                pool = pool.astype(x.dtype)
                with T.count_macs("centers"):
                    cs, cv = T.matmul(pool, ps), T.matmul(pool, pv)
            else:
                cs = propose_centers(ps, tile_grid, local_centers)
                cv = propose_centers(pv, tile_grid, local_centers)
            c = cs.shape[-2]
            shape4 = (b * r, self._heads, c, m)

            def per_head(p):
                p = T.reshape(p, (1, self._heads, 1, 1))
                return T.reshape(T.broadcast_to(p, shape4), (b * r * self._heads, c, m))

            out, assignment, sim = cluster_mix(
                ps, pv, cs, cv, per_head(self.alpha), per_head(self.beta),
                self.dispatch_fc.weight, self.dispatch_fc.bias, center_update_iters,
            )
            y = self.fuse(self._merge_heads(out, b, r))
            if partition:
                rv.tiles = y
                y = merge_regions(rv).features
            else:
                y = T.reshape(y, (b, n, d))
        if _recorders:
            sd = sim.data
            rec = ClusterRecord(
                tag=self.tag, grid=grid, tile_grid=tile_grid, regions_h=rh, regions_w=rw,
                heads=self._heads, local_centers=c,
                assignment=assignment.center_index.reshape(b, r, self._heads, m).copy(),
                cluster_sizes=assignment.cluster_sizes.reshape(b, r, self._heads, c).copy(),
                sim_stats={"min": float(sd.min()), "mean": float(sd.mean()), "max": float(sd.max())},
                macs=dict(macs),
            )
            for recs in _recorders:
                recs.append(rec)
        if squeeze:
            y = T.reshape(y, y.shape[1:])
        return y


class CocBlock(Module):
    """Pre-norm residual block: cluster token mixing, then a GELU MLP."""

    def __init__(self, dim, heads, head_dim, mlp_ratio, rng, dtype=np.float32,
                 use_cluster=True):
        if use_cluster:
            self.norm1 = GroupNorm(dim, dtype)
            self.cluster = ContextCluster(dim, heads, head_dim, rng, dtype)
        else:
            self.cluster = None
        self.norm2 = GroupNorm(dim, dtype)
        self.mlp_in = Linear(dim, mlp_ratio * dim, rng, dtype)
        self.mlp_out = Linear(mlp_ratio * dim, dim, rng, dtype)

    def __call__(self, x, grid, regions=1, local_centers=4, partition=True,
                 center_update_iters=0, center_proposal="grid"):
        if self.cluster is not None:
            x = T.add(x, self.cluster(
                self.norm1(x), grid, regions, local_centers, partition,
                center_update_iters, center_proposal,
            ))
        h = self.mlp_out(T.gelu(self.mlp_in(self.norm2(x))))
        return T.add(x, h)
