"""Desk-scale supervised training: loss, AdamW, schedule, datasets, loop."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import save_checkpoint
from .points import FormatError

log = logging.getLogger(__name__)

__all__ = [
    "Dataset", "OptimState", "AdamW", "cross_entropy", "adamw_step", "cosine_lr",
    "load_cifar10", "read_cifar_batch", "write_cifar_batch", "synthetic_quadrant_dataset",
    "synthetic_noise_dataset", "TrainConfig", "TrainLog", "train", "evaluate",
    "NumericalAbort",
]


@dataclass
class Dataset:
    images: np.ndarray  # (N, h, w, 3) in [0, 1]
    labels: np.ndarray  # (N,)
    num_classes: int

    def __post_init__(self):
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise FormatError("dataset needs matching, non-empty images and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n, seed=None):
        idx = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        idx = idx[:n]
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# -- loss --------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    b, k = z.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels must be a length-b vector of class indices")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return T._make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(p):
    """Weight decay applies to matrices only (not biases, norms, alpha/beta)."""
    return p.ndim >= 2


def adamw_step(params, grads, state):
    """In-place AdamW update with bias correction and decoupled decay."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and decays(p):
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), weight_decay=0.05, eps=1e-8):
        self.params = list(params)
        self.state = OptimState(lr, betas, weight_decay, eps)

    def step(self):
        adamw_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step, total, base_lr, warmup=0):
    """Linear warmup to ``base_lr`` then half-cosine decay to zero at ``total``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if step >= total:
        return 0.0
    t = (step - warmup) / max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t))


# -- data ----------------------------------------------------------------------

CIFAR_RECORD = 1 + 3072
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


def read_cifar_batch(path):
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes
    (channel-major 32x32). Returns ``(images (N,32,32,3) float32, labels)``."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise FormatError(f"{path}: label byte >= 10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images.astype(np.float32) / 255.0, labels


def write_cifar_batch(path, images, labels):
    imgs = np.asarray(images)
    if imgs.dtype != np.uint8:
        imgs = np.clip(np.round(imgs * 255.0), 0, 255).astype(np.uint8)
    rec = np.concatenate(
        [np.asarray(labels, dtype=np.uint8)[:, None], imgs.transpose(0, 3, 1, 2).reshape(len(imgs), -1)],
        axis=1,
    )
    rec.tofile(path)


def _cifar_dir(root):
    for cand in (root, os.path.join(root, "cifar-10-batches-bin")):
        if os.path.isfile(os.path.join(cand, CIFAR_TEST[0])):
            return cand
    raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")


def load_cifar10(root):
    d = _cifar_dir(root)
    parts = [read_cifar_batch(os.path.join(d, f)) for f in CIFAR_TRAIN]
    tx = np.concatenate([p[0] for p in parts])
    ty = np.concatenate([p[1] for p in parts])
    ex, ey = read_cifar_batch(os.path.join(d, CIFAR_TEST[0]))
    return Dataset(tx, ty, 10), Dataset(ex, ey, 10)


def synthetic_quadrant_dataset(n, image_size=32, seed=0, patch=None):
    """Noise images with one bright solid patch in a random quadrant; the label
    is the quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).

    Background values lie in [0, 0.5); patch colours in [0.75, 1]. The patch
    content is independent of the label, so only its position is informative.
    """
    rng = np.random.default_rng(seed)
    s = image_size
    half = s // 2
    p = patch or max(1, s // 4)
    images = rng.uniform(0.0, 0.5, (n, s, s, 3)).astype(np.float32)
    labels = rng.integers(0, 4, n)
    colors = rng.uniform(0.75, 1.0, (n, 3)).astype(np.float32)
    offs = rng.integers(0, half - p + 1, (n, 2))
    for i in range(n):
        r0 = (labels[i] // 2) * half + offs[i, 0]
        c0 = (labels[i] % 2) * half + offs[i, 1]
        images[i, r0:r0 + p, c0:c0 + p] = colors[i]
    return Dataset(images, labels.astype(np.int64), 4)


def synthetic_noise_dataset(n, image_size=32, num_classes=10, seed=0):
    """Uniform noise with independent random labels (a chance-level probe)."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (n, image_size, image_size, 3)).astype(np.float32)
    return Dataset(images, rng.integers(0, num_classes, n).astype(np.int64), num_classes)


# -- loop ----------------------------------------------------------------------

class NumericalAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    warmup_epochs: float = 2
    seed: int = 0
    checkpoint_every: int = 0
    stop_at_train_acc: float | None = None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)

    def last(self, split):
        return next(r for r in reversed(self.rows) if r["split"] == split)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            for k, v in self.header.items():
                f.write(f"# {k}: {v}\n")
            w = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "accuracy", "lr", "seconds"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def evaluate(model, data, batch_size=256):
    """``(mean loss, accuracy)`` without recording a graph."""
    total, correct, n = 0.0, 0, len(data)
    with T.no_grad():
        for i in range(0, n, batch_size):
            logits = model(data.images[i:i + batch_size])
            y = data.labels[i:i + batch_size]
            total += cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(1) == y).sum())
    return total / n, correct / n


def train(model, data, cfg=None, eval_data=None, out_dir=None, header=None, **kw):
    """Mini-batch AdamW training with a seeded shuffle per epoch.

    Logs per-epoch train loss/accuracy (running over the epoch's batches) and,
    if ``eval_data`` is given, held-out loss/accuracy. Raises
    :class:`NumericalAbort` on a non-finite loss.
    """
    cfg = cfg or TrainConfig(**kw)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.weight_decay)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = min(int(round(cfg.warmup_epochs * steps_per_epoch)), total)
    tlog = TrainLog(header=dict(header or {}))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        lr = cfg.lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr, warmup)
            opt.state.lr = lr
            logits = model(data.images[idx])
            loss = cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g}); "
                    f"last grad norm {_grad_norm(params):.3g}"
                )
            opt.zero_grad()
            T.backward(loss, params)
            opt.step()
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == data.labels[idx]).sum())
        secs = time.perf_counter() - t0
        tlog.add(epoch=epoch, split="train", loss=loss_sum / n, accuracy=correct / n, lr=lr,
                 seconds=round(secs, 3))
        log.info("epoch %d train loss %.4f acc %.4f (%.1fs)", epoch, loss_sum / n, correct / n, secs)
        if eval_data is not None:
            el, ea = evaluate(model, eval_data)
            tlog.add(epoch=epoch, split="test", loss=el, accuracy=ea, lr=lr,
                     seconds=round(time.perf_counter() - t0 - secs, 3))
            log.info("epoch %d test loss %.4f acc %.4f", epoch, el, ea)
        if out_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(out_dir, f"epoch{epoch:03d}.coc"))
        if cfg.stop_at_train_acc is not None and correct / n >= cfg.stop_at_train_acc:
            break
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "final.coc"))
        tlog.write_csv(os.path.join(out_dir, "train_log.csv"))
    return tlog


def _grad_norm(params):
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
