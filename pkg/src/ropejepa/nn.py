"""Neural-network building blocks on top of the tensor core.

A ``Module`` owns parameter tensors as attributes (possibly nested in
submodules or lists); ``named_parameters`` walks them in declaration order and
returns dotted names, which the optimizer, EMA update, and checkpoint writer
all key on. Every constructor takes an explicit ``np.random.Generator`` so a
model build is a pure function of config and seed.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

NEG_INF = -1e30  # additive attention bias for masked-out keys


class Module:
    """Base class; parameter discovery by attribute walk, no autoregistration."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        out[f"{prefix}{name}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    if std == 0.0:
        data = np.zeros(shape)
    else:
        data = rng.normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: Optional[float] = None):
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        self.w = param(rng, (d_in, d_out), std)
        self.b = param(rng, (d_out,), 0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def __call__(self, x: Tensor, training: bool,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return T.dropout(x, self.p, training, rng)


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention; queries and key/value sources
    may differ (cross-attention). ``key_bias`` is an additive raw-score bias,
    typically 0 / NEG_INF for padding, broadcastable to (B, H, Nq, Nk)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 kv_dim: Optional[int] = None):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(kv_dim, dim, rng)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor, B: int, N: int) -> Tensor:
        x = T.reshape(x, (B, N, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor,
                 key_bias: Optional[np.ndarray] = None) -> Tensor:
        B, Nq, _ = xq.shape
        Nk = xkv.shape[1]
        q = self._split(self.wq(xq), B, Nq)
        k = self._split(self.wk(xkv), B, Nk)
        v = self._split(self.wv(xkv), B, Nk)
        scores = T.mul_const(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                             1.0 / math.sqrt(self.head_dim))
        if key_bias is not None:
            scores = T.add(scores, T.const(key_bias))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, Nq, self.heads * self.head_dim))
        return self.wo(out)


class FeedForward(Module):
    """dim -> hidden -> dim with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(LN(x)), then x + ffn(LN(x)).

    ``zero_init_outputs`` zeroes the attention-output and FFN-output
    projections so the block starts as the identity map.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 zero_init_outputs: bool = False):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio, rng)
        if zero_init_outputs:
            self.attn.wo.w.data[:] = 0.0
            self.ffn.fc2.w.data[:] = 0.0

    def __call__(self, x: Tensor, key_bias: Optional[np.ndarray] = None) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.attn(h, h, key_bias))
        return T.add(x, self.ffn(self.norm2(x)))


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """Boolean (B, Nk) validity -> additive (B, 1, 1, Nk) score bias."""
    return np.where(valid[:, None, None, :], 0.0, NEG_INF)


def copy_parameters(src: Module, dst: Module) -> None:
    """Overwrite dst's parameter data with src's, matched by dotted name."""
    sp, dp = src.named_parameters(), dst.named_parameters()
    if sp.keys() != dp.keys():
        raise ContractError("parameter sets differ, cannot copy")
    for name, p in sp.items():
        if dp[name].shape != p.shape:
            raise ShapeError(f"shape mismatch at {name}: {dp[name].shape} vs {p.shape}")
        dp[name].data = p.data.copy()
