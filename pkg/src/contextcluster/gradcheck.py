"""Central finite-difference checks of every differentiable op, in float64.

Each registered check builds fresh leaves and a closure computing a scalar
loss (``sum(out * R)`` for a fixed random ``R``, so the whole Jacobian is
exercised). The reported error for a check is the largest, over its leaves, of
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .cluster import (
    CocBlock, ContextCluster, aggregate, assign_clusters, cluster_mix, cosine_similarity,
    dispatch, propose_centers, update_centers,
)
from .points import GridMeta, PointSet, reduce_points
from .training import cross_entropy

CHECKS = {}
F64 = np.float64


def register(name):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape).astype(F64), requires_grad=True)


def max_rel_error(leaves, loss_fn, h=1e-5):
    for p in leaves:
        p.grad = None
    T.backward(loss_fn(), leaves)
    worst = 0.0
    with T.no_grad():
        for p in leaves:
            ana = np.array(p.grad, dtype=F64, order="C")
            num = np.zeros(ana.shape)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num.reshape(-1)[i] = (up - down) / (2 * h)
            scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
            worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / scale))
    return worst


def op_check(name, op, *shapes, **kw):
    """Register a check of ``op`` on uniform random leaves of the given shapes."""
    def make(rng):
        leaves = [_leaf(rng, *s, **kw) for s in shapes]
        holder = {}

        def loss():
            out = op(*leaves)
            if "r" not in holder:
                holder["r"] = T.Tensor(rng.standard_normal(out.shape))
            return T.sum(T.mul(out, holder["r"]))

        return leaves, loss

    CHECKS[name] = make


op_check("matmul", T.matmul, (3, 4), (4, 2))
op_check("matmul_batched", T.matmul, (2, 3, 4), (4, 2))
op_check("add", T.add, (3, 4), (3, 4))
op_check("add_scalar", T.add, (3, 4), ())
op_check("sub", T.sub, (3, 4), (3, 4))
op_check("mul", T.mul, (3, 4), (3, 4))
op_check("mul_scalar", T.mul, (3, 4), ())
op_check("div", T.div, (3, 4), (3, 4), lo=0.5, hi=2.0)
op_check("scale", lambda a: T.scale(a, 2.5), (3, 4))
op_check("sigmoid", T.sigmoid, (3, 4), lo=-4, hi=4)
op_check("gelu", T.gelu, (3, 4), lo=-3, hi=3)
op_check("exp", T.exp, (3, 4))
op_check("log", T.log, (3, 4), lo=0.5, hi=2.0)
op_check("sum", lambda a: T.sum(a, axis=1), (3, 4))
op_check("mean", lambda a: T.mean(a, axis=0, keepdims=True), (3, 4))
op_check("max", lambda a: T.max_with_argmax(a, axis=1)[0], (3, 4))
op_check("concat", lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))
op_check("split", lambda a: T.split(a, [1, 3], axis=1)[1], (2, 4))
op_check("reshape", lambda a: T.reshape(a, (4, 3)), (3, 4))
op_check("transpose", lambda a: T.transpose(a, (2, 0, 1)), (2, 3, 4))
op_check("gather_rows", lambda a: T.gather_rows(a, np.array([[0, 2], [2, 1], [0, 0]])), (2, 3, 4))
op_check("scatter_rows", lambda a: T.scatter_rows(a, np.array([1, 1, 0, 3]), 5), (2, 4, 3))
op_check("broadcast_to", lambda a: T.broadcast_to(a, (2, 3, 4)), (3, 1))
op_check("clip", lambda a: T.clip(a, -0.5, 0.5), (3, 4))
op_check("l2_normalize", T.l2_normalize, (3, 4))
op_check("group_norm", lambda a, g, b: T.group_norm(a, 2, g, b), (3, 6), (6,), (6,))
op_check("cosine_similarity", cosine_similarity, (2, 5, 3), (2, 4, 3))


@register("cross_entropy")
def _ce(rng):
    z = _leaf(rng, 4, 5, lo=-2, hi=2)
    y = rng.integers(0, 5, 4)
    return [z], lambda: cross_entropy(z, y)


@register("aggregate")
def _agg(rng):
    v, vc, s = _leaf(rng, 4, 3), _leaf(rng, 3), _leaf(rng, 4)
    a, b = _leaf(rng, lo=0.5, hi=2.0), _leaf(rng)
    r = rng.standard_normal(3)
    return [v, vc, s, a, b], lambda: T.sum(T.mul(aggregate(v, vc, s, a, b), T.Tensor(r)))


@register("dispatch")
def _disp(rng):
    p, g, s = _leaf(rng, 3), _leaf(rng, 3), _leaf(rng)
    a, b = _leaf(rng, lo=0.5, hi=2.0), _leaf(rng)
    w, bias = _leaf(rng, 3, 3), _leaf(rng, 3)
    r = rng.standard_normal(3)
    return [p, g, s, a, b, w, bias], lambda: T.sum(T.mul(dispatch(p, g, s, a, b, w, bias), T.Tensor(r)))


@register("cluster_mix")
def _mix(rng):
    grid = GridMeta(4, 4)
    ps, pv = _leaf(rng, 2, 16, 3), _leaf(rng, 2, 16, 3)
    a, b = _leaf(rng, lo=0.5, hi=2.0), _leaf(rng)
    w, bias = _leaf(rng, 3, 3), _leaf(rng, 3)
    r = rng.standard_normal((2, 16, 3))

    def loss():
        cs = propose_centers(ps, grid, 4)
        cv = propose_centers(pv, grid, 4)
        out, _, _ = cluster_mix(ps, pv, cs, cv, a, b, w, bias)
        return T.sum(T.mul(out, T.Tensor(r)))

    return [ps, pv, a, b, w, bias], loss


@register("update_centers")
def _upd(rng):
    grid = GridMeta(4, 4)
    ps = _leaf(rng, 1, 16, 3)
    r = rng.standard_normal((1, 4, 3))

    def loss():
        c0 = propose_centers(ps, grid, 4)
        asg = assign_clusters(cosine_similarity(ps, c0))
        c1, _, _ = update_centers(ps, asg, c0, 2)
        return T.sum(T.mul(c1, T.Tensor(r)))

    return [ps], loss


@register("reduce_points")
def _red(rng):
    x = _leaf(rng, 2, 16, 3)
    w, b = _leaf(rng, 27, 5), _leaf(rng, 5)
    g, be = _leaf(rng, 5, lo=0.5, hi=1.5), _leaf(rng, 5)
    r = rng.standard_normal((2, 4, 5))
    return [x, w, b, g, be], lambda: T.sum(T.mul(
        reduce_points(PointSet(x, GridMeta(4, 4)), 9, 4, w, b, g, be).features, T.Tensor(r)))


def _module_check(module, x, call):
    leaves = [x, *module.parameters()]
    rng = np.random.default_rng(1)
    holder = {}

    def loss():
        out = call(x)
        if "r" not in holder:
            holder["r"] = T.Tensor(rng.standard_normal(out.shape))
        return T.sum(T.mul(out, holder["r"]))

    return leaves, loss


@register("context_cluster_op")
def _cc(rng):
    mod = ContextCluster(8, 2, 4, rng, F64)
    x = _leaf(rng, 1, 16, 8)
    return _module_check(mod, x, lambda t: mod(t, GridMeta(4, 4), regions=1, local_centers=4))


@register("context_cluster_op_regions")
def _cc_regions(rng):
    mod = ContextCluster(8, 2, 4, rng, F64)
    x = _leaf(rng, 2, 64, 8)
    return _module_check(mod, x, lambda t: mod(t, GridMeta(8, 8), regions=4, local_centers=4))


@register("coc_block")
def _block(rng):
    mod = CocBlock(8, 2, 4, 2, rng, F64)
    x = _leaf(rng, 1, 16, 8)
    return _module_check(mod, x, lambda t: mod(t, GridMeta(4, 4), regions=1, local_centers=4))


def run(names=None, seed=0, h=1e-5):
    """``{check name: max relative error}`` for the selected checks."""
    results = {}
    for name in names or list(CHECKS):
        rng = np.random.default_rng(seed)
        leaves, loss = CHECKS[name](rng)
        results[name] = max_rel_error(leaves, loss, h)
    return results
