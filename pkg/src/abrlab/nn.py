"""Minimal differentiable kernel: layers with explicit backward passes.

Enough machinery for a two-layer MLP and a small causal transformer: affine
maps, ReLU, layer normalization, embedding tables, single/multi-head causal
self-attention, inverted dropout, softmax cross-entropy, mean squared error,
AdamW with decoupled weight decay, cosine learning-rate decay, and a central
finite-difference gradient checker.

Parameters are stored in float32 by default; reductions (means, losses)
accumulate in float64 before casting back.  Layers are dtype-polymorphic,
so gradient checks can run the same code in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NnError(ValueError):
    """Shape mismatch, invalid distribution target, or non-finite numbers."""


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], gain: float = 1.0, dtype=np.float32) -> np.ndarray:
    """Scaled uniform initialization over +-sqrt(6 / (fan_in + fan_out))."""
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[1] if len(shape) > 1 else shape[0]
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NnError(f"non-finite values in {name}")


class Affine:
    """y = x W + b over the trailing axis; leading axes are batch."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "affine",
                 gain: float = 1.0, dtype=np.float32) -> None:
        self.w = Param(f"{name}.w", uniform_init(rng, (in_dim, out_dim), gain, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_dim, dtype=dtype))
        self._x2d: np.ndarray | None = None
        self._shape: tuple[int, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.w.value.shape[0]:
            raise NnError(
                f"affine input dim {x.shape[-1]} != weight dim {self.w.value.shape[0]}"
            )
        self._shape = x.shape
        self._x2d = x.reshape(-1, x.shape[-1])
        return (self._x2d @ self.w.value + self.b.value).reshape(*x.shape[:-1], -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dy2d = dy.reshape(-1, dy.shape[-1])
        self.w.grad += self._x2d.T @ dy2d
        self.b.grad += dy2d.sum(axis=0, dtype=np.float64).astype(self.b.value.dtype)
        return (dy2d @ self.w.value.T).reshape(self._shape)

    def params(self) -> list[Param]:
        return [self.w, self.b]


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._mask

    def params(self) -> list[Param]:
        return []


class LayerNorm:
    """Normalize the trailing axis to zero mean / unit variance, then scale."""

    def __init__(self, dim: int, name: str = "ln", eps: float = 1e-5, dtype=np.float32) -> None:
        self.g = Param(f"{name}.g", np.ones(dim, dtype=dtype))
        self.b = Param(f"{name}.b", np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
        var = np.square(x - mu).mean(axis=-1, keepdims=True, dtype=np.float64)
        self._inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        self._xhat = ((x - mu) * self._inv_std).astype(x.dtype)
        return self._xhat * self.g.value + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat = self._xhat
        dxhat = dy * self.g.value
        self.g.grad += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0, dtype=np.float64).astype(self.g.value.dtype)
        self.b.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0, dtype=np.float64).astype(self.b.value.dtype)
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
        return (self._inv_std * (dxhat - m1 - xhat * m2)).astype(dy.dtype)

    def params(self) -> list[Param]:
        return [self.g, self.b]


class Embedding:
    """Learned lookup table; backward scatters into the table gradient."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator, name: str = "emb",
                 gain: float = 1.0, dtype=np.float32) -> None:
        self.table = Param(f"{name}.table", uniform_init(rng, (count, dim), gain, dtype))

    def forward(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        if np.any(idx < 0) or np.any(idx >= self.table.value.shape[0]):
            raise NnError("embedding index out of range")
        self._idx = idx
        return self.table.value[idx]

    def backward(self, dy: np.ndarray) -> None:
        np.add.at(self.table.grad, self._idx.reshape(-1), dy.reshape(-1, dy.shape[-1]))

    def params(self) -> list[Param]:
        return [self.table]


class Dropout:
    """Inverted dropout: scales kept activations by 1/(1-rate) at train time."""

    def __init__(self, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise NnError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise NnError("training-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._mask = self._mask.astype(x.dtype)
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._mask is None else dy * self._mask

    def params(self) -> list[Param]:
        return []


class CausalSelfAttention:
    """Scaled dot-product attention where position i attends to positions <= i.

    Masked scores are set to -inf before the softmax, so future positions get
    exactly zero weight and cannot influence earlier outputs.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 name: str = "attn", dtype=np.float32) -> None:
        if dim % heads != 0:
            raise NnError(f"embed dim {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Affine(dim, dim, rng, f"{name}.q", dtype=dtype)
        self.wk = Affine(dim, dim, rng, f"{name}.k", dtype=dtype)
        self.wv = Affine(dim, dim, rng, f"{name}.v", dtype=dtype)
        self.wo = Affine(dim, dim, rng, f"{name}.o", dtype=dtype)
        self.attn_drop = Dropout(dropout)

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        self._squeezed = x.ndim == 2
        if self._squeezed:
            x = x[None]
        b, t, _ = x.shape
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        att = att.astype(x.dtype)
        att_kept = self.attn_drop.forward(att, train, rng)
        y = self._merge(att_kept @ v)
        out = self.wo.forward(y)
        self._cache = (q, k, v, att, att_kept, scale)
        return out[0] if self._squeezed else out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._squeezed:
            dy = dy[None]
        q, k, v, att, att_kept, scale = self._cache
        dmerged = self._split(self.wo.backward(dy))
        datt_kept = dmerged @ v.transpose(0, 1, 3, 2)
        dv = att_kept.transpose(0, 1, 3, 2) @ dmerged
        datt = self.attn_drop.backward(datt_kept)
        # softmax backward per row; masked entries have att == 0, so they
        # contribute nothing and receive zero gradient.
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
        dx = self.wq.backward(self._merge(dq))
        dx = dx + self.wk.backward(self._merge(dk))
        dx = dx + self.wv.backward(self._merge(dv))
        return dx[0] if self._squeezed else dx

    def params(self) -> list[Param]:
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class TransformerBlock:
    """Pre-norm residual block: attention then a ReLU MLP, dropout on both paths."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0,
                 mlp_ratio: int = 4, name: str = "block", dtype=np.float32) -> None:
        self.ln1 = LayerNorm(dim, f"{name}.ln1", dtype=dtype)
        self.attn = CausalSelfAttention(dim, heads, rng, dropout, f"{name}.attn", dtype=dtype)
        self.drop1 = Dropout(dropout)
        self.ln2 = LayerNorm(dim, f"{name}.ln2", dtype=dtype)
        self.fc1 = Affine(dim, mlp_ratio * dim, rng, f"{name}.fc1", dtype=dtype)
        self.act = ReLU()
        self.fc2 = Affine(mlp_ratio * dim, dim, rng, f"{name}.fc2", dtype=dtype)
        self.drop2 = Dropout(dropout)

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        a = self.drop1.forward(self.attn.forward(self.ln1.forward(x), train, rng), train, rng)
        x = x + a
        m = self.fc2.forward(self.act.forward(self.fc1.forward(self.ln2.forward(x))))
        x = x + self.drop2.forward(m, train, rng)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dm = self.drop2.backward(dy)
        dx = dy + self.ln2.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dm))))
        da = self.drop1.backward(dx)
        return dx + self.ln1.backward(self.attn.backward(da))

    def params(self) -> list[Param]:
        return (
            self.ln1.params() + self.attn.params() + self.ln2.params()
            + self.fc1.params() + self.fc2.params()
        )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy against one-hot (or soft) target rows."""
    if logits.shape != targets.shape:
        raise NnError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    t2d = targets.reshape(-1, targets.shape[-1])
    if np.any(t2d < 0) or not np.allclose(t2d.sum(axis=-1), 1.0, atol=1e-6):
        raise NnError("targets must be distributions (non-negative rows summing to 1)")
    l2d = logits.reshape(-1, logits.shape[-1])
    z = l2d - l2d.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = l2d.shape[0]
    loss = float(-(t2d * log_p).sum(dtype=np.float64) / n)
    dlogits = ((np.exp(log_p) - t2d) / n).astype(logits.dtype).reshape(logits.shape)
    return loss, dlogits


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise NnError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff), dtype=np.float64))
    dpred = (2.0 * diff / diff.size).astype(pred.dtype)
    return loss, dpred


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0) -> None:
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NnError(f"non-finite gradient for {p.name}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * np.square(p.grad)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.value
            p.value -= (self.lr * update).astype(p.value.dtype)


def cosine_lr(step: int, total_steps: int, lr0: float = 0.001) -> float:
    """Cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise NnError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def grad_check(fn: Callable[[], float], params: Sequence[Param], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must deterministically compute a scalar loss and leave each
    param's gradient populated (zeroed-then-filled by the caller's backward).
    The relative error uses max(1, |a|, |fd|) in the denominator, so tiny
    gradients are compared absolutely.
    """
    for p in params:
        p.grad[...] = 0.0
    fn()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = fn()
            flat[i] = orig - eps
            lm = fn()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            a = float(an.reshape(-1)[i])
            err = abs(fd - a) / max(1.0, abs(fd), abs(a))
            worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned npz container of named arrays plus a JSON meta header."""
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_VERSION
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"][()]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise NnError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta
