"""Parameter containers: a tiny Module base, Linear and GroupNorm."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameters are discovered from attributes in assignment order, so names
    are stable dotted paths like ``stages.1.blocks.0.mlp_in.weight``."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data, dtype):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        self.bias = param(rng.uniform(-bound, bound, d_out), dtype) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, T.broadcast_to(self.bias, y.shape))
        return y


class GroupNorm(Module):
    def __init__(self, d, dtype=np.float32, groups=1, eps=1e-5):
        self.weight = param(np.ones(d), dtype)
        self.bias = param(np.zeros(d), dtype)
        self._groups = groups
        self._eps = eps

    def __call__(self, x):
        return T.group_norm(x, self._groups, self.weight, self.bias, self._eps)
