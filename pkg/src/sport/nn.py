"""Small differentiable-computation toolkit on top of torch autograd.

The forward primitives are written out explicitly (no ``torch.nn``
layers) so their gradients can be checked against finite differences;
parameters live in plain ``torch.nn.Module`` containers and are optimized
by :func:`adam_step`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import FormatError, MissingGradient, NotScalarLoss, ShapeMismatch

LN_EPS = 1e-8


# --- primitives ---------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise ShapeMismatch(f"add {tuple(a.shape)} + {tuple(b.shape)}") from exc
    return a + b


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = LN_EPS) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        if weight.shape[-1] != x.shape[-1]:
            raise ShapeMismatch(f"layer_norm weight {tuple(weight.shape)} for input {tuple(x.shape)}")
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def multi_head_attention(q, k, v, heads: int, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention split over ``heads``.

    ``q`` is ``(B, Lq, D)``, ``k`` and ``v`` are ``(B, Lk, D)``. ``key_mask``
    is ``(B, Lk)`` with True for keys that may be attended to.
    """
    if q.dim() != 3 or k.shape != v.shape or k.dim() != 3 or q.shape[0] != k.shape[0] or q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"attention q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    B, Lq, D = q.shape
    Lk = k.shape[1]
    if heads < 1 or D % heads:
        raise ShapeMismatch(f"model dim {D} not divisible by {heads} heads")
    dh = D // heads
    qh = q.reshape(B, Lq, heads, dh).transpose(1, 2)
    kh = k.reshape(B, Lk, heads, dh).transpose(1, 2)
    vh = v.reshape(B, Lk, heads, dh).transpose(1, 2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        if key_mask.shape != (B, Lk):
            raise ShapeMismatch(f"key mask {tuple(key_mask.shape)} for {B}x{Lk} keys")
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    out = softmax(scores, dim=-1) @ vh
    return out.transpose(1, 2).reshape(B, Lq, D)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if table.dim() != 2:
        raise ShapeMismatch("embedding table must be 2-D")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeMismatch(f"ids out of range for table with {table.shape[0]} rows")
    return table[ids]


# --- layers -------------------------------------------------------------------


class Linear(torch.nn.Module):
    def __init__(self, n_in: int, n_out: int, generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = torch.nn.Parameter((torch.rand(n_in, n_out, generator=generator, dtype=torch.float64) * 2 - 1).mul(bound).to(dtype))
        self.bias = torch.nn.Parameter(torch.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(torch.nn.Module):
    def __init__(self, dim: int, dtype=torch.float32):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.ones(dim, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class MLP(torch.nn.Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, n_in: int, hidden: int, n_out: int, generator, dtype=torch.float32):
        super().__init__()
        self.fc1 = Linear(n_in, hidden, generator, dtype)
        self.fc2 = Linear(hidden, n_out, generator, dtype)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(torch.nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, generator, dtype=torch.float32, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(dim, dtype)
        self.q = Linear(dim, dim, generator, dtype)
        self.k = Linear(dim, dim, generator, dtype)
        self.v = Linear(dim, dim, generator, dtype)
        self.o = Linear(dim, dim, generator, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio * dim, dim, generator, dtype)

    def forward(self, x, key_mask=None):
        h = self.ln1(x)
        x = x + self.o(multi_head_attention(self.q(h), self.k(h), self.v(h), self.heads, key_mask))
        return x + self.mlp(self.ln2(x))


# --- gradients and optimization ----------------------------------------------


def backward(loss: torch.Tensor, params: Iterable[torch.nn.Parameter]) -> None:
    """Reverse-mode pass; parameters off the loss path get exact-zero gradients."""
    if loss.numel() != 1:
        raise NotScalarLoss(f"loss has shape {tuple(loss.shape)}")
    params = list(params)
    for p in params:
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


@dataclass
class ParameterStore:
    """Named trainable parameters plus their Adam state."""

    params: dict[str, torch.nn.Parameter]
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> ParameterStore:
        params = dict(module.named_parameters())
        store = cls(params)
        for name, p in params.items():
            store.m[name] = torch.zeros_like(p).detach()
            store.v[name] = torch.zeros_like(p).detach()
        return store

    def values(self):
        return self.params.values()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@torch.no_grad()
def adam_step(
    store: ParameterStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: Mapping[str, torch.Tensor] | None = None,
) -> None:
    """One bias-corrected Adam update of every parameter in ``store``."""
    missing = [n for n, p in store.params.items() if (grads or {}).get(n, p.grad) is None]
    if missing:
        raise MissingGradient(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, p in store.params.items():
        g = (grads or {}).get(name, p.grad).to(p.dtype)
        m = store.m[name].mul_(beta1).add_(g, alpha=1 - beta1)
        v = store.v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    checked: int
    # entries whose analytic and numeric values are both below the difference resolution
    zero_entries: int = 0
    zero_tol: float = 0.0

    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get) if self.per_param else ""


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    zero_tol: float | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    The error of one entry is ``|a - n| / max(|a|, |n|)``. Relative error is
    meaningless for gradients that are exactly zero (e.g. a bias added to
    every attention logit), where the difference quotient is pure rounding
    noise of order ``|f| * machine_eps / eps``. Entries with both values at
    or below ``zero_tol`` (default: 100 times that resolution) count as
    agreeing zeros and are tallied in ``zero_entries``. With ``max_entries``
    only that many seeded entries per tensor are probed. Parameters must be
    float64.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
    f0 = fn()
    if zero_tol is None:
        zero_tol = 100.0 * max(abs(f0.item()), 1.0) * np.finfo(np.float64).eps / eps
    backward(f0, params.values())
    rng = np.random.default_rng(seed)
    per_param, ana, num = {}, {}, {}
    checked = zeros = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = p.grad.detach().reshape(-1).clone()
            idx = np.arange(flat.numel())
            if max_entries is not None and len(idx) > max_entries:
                idx = np.sort(rng.choice(len(idx), size=max_entries, replace=False))
            a_vals = g[idx].numpy().copy()
            n_vals = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                n_vals[j] = (fp - fm) / (2 * eps)
            big = np.maximum(np.abs(a_vals), np.abs(n_vals))
            zero = big <= zero_tol
            err = np.where(zero, 0.0, np.abs(a_vals - n_vals) / np.where(zero, 1.0, big))
            per_param[name] = float(np.max(err)) if len(idx) else 0.0
            zeros += int(zero.sum())
            ana[name], num[name] = a_vals, n_vals
            checked += len(idx)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, ana, num, checked, zeros, zero_tol)


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPCK1"


def save_checkpoint(path, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """``SPCK1`` + u32 header length + JSON header + float32 little-endian blobs."""
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an SPCK1 checkpoint")
    if len(data) < 9:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", data[5:9])
    try:
        header = json.loads(data[9 : 9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    body = data[9 + n :]
    tensors = {}
    for rec in header.pop("tensors"):
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start, stop = rec["offset"], rec["offset"] + 4 * count
        if stop > len(body):
            raise FormatError(f"{path}: truncated tensor {rec['name']}")
        tensors[rec["name"]] = np.frombuffer(body[start:stop], dtype="<f4").reshape(rec["shape"]).copy()
    return header, tensors
