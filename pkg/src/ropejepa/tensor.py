"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy float64 array. While a ``Tape`` is active, every
operation that touches a gradient-carrying tensor records a node (inputs,
output, backward rule) in execution order; ``Tape.backward`` walks the node
list in reverse and accumulates gradients into ``Tensor.grad``.

Only the kernels this architecture needs are provided. No GPU, no mixed
precision, no broadcasting beyond what the kernels themselves require.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor", "Tape", "ShapeError", "ContractError", "const",
    "matmul", "add", "sub", "mul", "div", "neg", "add_const", "mul_const",
    "exp", "log", "gelu", "sigmoid", "relu", "powi",
    "softmax", "log_softmax", "layer_norm", "l2_normalize",
    "smooth_l1", "dropout", "reshape", "transpose", "concat", "slice_axis",
    "broadcast_to", "tsum", "tmean", "gather_rows", "scatter_rows",
    "take_per_row", "embedding", "im2col", "conv2d", "linear",
    "cosine_similarity", "zero_grads", "global_grad_norm", "clip_grad_norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """Raised when an operation's preconditions are violated."""


_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """Dense float64 array, optionally participating in gradient taping.

    ``requires_grad`` marks a leaf whose gradient should be accumulated by
    ``Tape.backward``. Tensors produced by recorded ops carry ``traced=True``
    so downstream ops keep recording.
    """

    __slots__ = ("data", "requires_grad", "grad", "traced", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.traced = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; scalars take the cheap constant paths
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_const(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return powi(self, int(k))


def const(data) -> Tensor:
    """Wrap raw data as a non-gradient tensor."""
    return Tensor(data, requires_grad=False)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Execution-ordered record of operations for one backward pass.

    Nodes are appended at op time, so topological order (inputs precede
    consumers) holds by construction. ``backward`` visits each node exactly
    once, in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

        Unreachable tensors are left untouched (grad stays None rather than
        being zero-filled). Non-scalar losses are rejected.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            holders.pop(id(node.out), None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.backward(g)):
                if gt is None or t is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                    holders[key] = t
        for key, g in grads.items():
            t = holders[key]
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g


def _tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(
        t is not None and (t.requires_grad or t.traced) for t in inputs
    ):
        out.traced = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _needs(t: Optional[Tensor]) -> bool:
    return t is not None and (t.requires_grad or t.traced)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    na, nb = _needs(a), _needs(b)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if na else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if nb else None
        return ga, gb

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(-g, b.shape) if nb else None)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if na else None,
                _unbroadcast(g * a.data, b.shape) if nb else None)

    return _record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    na, nb = _needs(a), _needs(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if na else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if nb else None
        return ga, gb

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def powi(a: Tensor, k: int) -> Tensor:
    """Integer power, k >= 1."""
    if k < 1:
        raise ContractError(f"powi exponent must be >= 1, got {k}")
    out = Tensor(a.data ** k)
    return _record(out, (a,), lambda g: (g * k * a.data ** (k - 1),))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 of (a - b): quadratic inside |d| < beta, linear outside."""
    d = a.data - b.data
    absd = np.abs(d)
    out = Tensor(np.where(absd < beta, 0.5 * d * d / beta, absd - 0.5 * beta))
    na, nb = _needs(a), _needs(b)

    def backward(g):
        dd = np.where(absd < beta, d / beta, np.sign(d))
        return (g * dd if na else None, -g * dd if nb else None)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# normalizations and softmaxes
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted stable softmax along ``axis``; outputs sum to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)

    def backward(g):
        return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance over the last axis, then affine.

    Population variance (1/D), matching the usual transformer LayerNorm.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    nx, ng, nb = _needs(x), _needs(gamma), _needs(beta)

    def backward(g):
        gx = None
        if nx:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape) if ng else None
        gbeta = _unbroadcast(g, beta.shape) if nb else None
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``; norms below ``eps`` are floored,
    so an exactly-zero vector maps to the zero vector."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    out = Tensor(y)

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        gx = (g - y * proj) / denom
        # in the floored regime the map is linear x/eps
        floored = norm <= eps
        if floored.any():
            gx = np.where(floored, g / denom, gx)
        return (gx,)

    return _record(out, (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between a and b along ``axis`` (composite kernel)."""
    an = l2_normalize(a, axis=axis)
    bn = l2_normalize(b, axis=axis)
    return tsum(mul(an, bn), axis=axis)


# ---------------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    needs = [_needs(t) for t in tensors]

    def backward(g):
        outs = []
        for i, t in enumerate(tensors):
            if not needs[i]:
                outs.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return outs

    return _record(out, tuple(tensors), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(a.data[sl])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)

    return _record(out, (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mul_const(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# indexed access
# ---------------------------------------------------------------------------

def gather_rows(x: Tensor, idx: np.ndarray, valid: Optional[np.ndarray] = None) -> Tensor:
    """Per-batch row gather: x is (B, N, D), idx is int (B, K) -> (B, K, D).

    ``valid`` is an optional boolean (B, K); invalid slots read row 0 but are
    zeroed in the output and contribute no gradient.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape}, idx {idx.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(f"gather_rows: index out of range for N={x.shape[1]}")
    b_ix = np.arange(x.shape[0])[:, None]
    gathered = x.data[b_ix, idx]
    if valid is not None:
        gathered = gathered * valid[:, :, None]
    out = Tensor(gathered)

    def backward(g):
        if valid is not None:
            g = g * valid[:, :, None]
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b_ix, idx), g)
        return (gx,)

    return _record(out, (x,), backward)


def scatter_rows(base: Tensor, idx: np.ndarray, rows: Tensor,
                 valid: Optional[np.ndarray] = None) -> Tensor:
    """Replace base rows at per-batch indices: base (B, N, D), rows (B, K, D).

    Valid slots overwrite the base row (gradient to ``rows``); elsewhere the
    base row survives (gradient to ``base``). Valid indices must be unique
    within each batch row, otherwise which write wins is undefined.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if base.ndim != 3 or rows.ndim != 3 or idx.shape != rows.shape[:2]:
        raise ShapeError(f"scatter_rows: base {base.shape}, rows {rows.shape}, idx {idx.shape}")
    B, N, _ = base.shape
    if idx.min() < 0 or idx.max() >= N:
        raise ShapeError(f"scatter_rows: index out of range for N={N}")
    for b in range(B):
        live = idx[b] if valid is None else idx[b][valid[b].astype(bool)]
        if live.size != np.unique(live).size:
            raise ContractError(f"scatter_rows: duplicate target indices in batch row {b}")
    b_ix = np.arange(B)[:, None]
    written = np.zeros((B, N), dtype=bool)
    if valid is None:
        written[b_ix, idx] = True
    else:
        vb = valid.astype(bool)
        np.logical_or.at(written, (np.broadcast_to(b_ix, idx.shape)[vb], idx[vb]), True)
    data = base.data.copy()
    if valid is None:
        data[b_ix, idx] = rows.data
    else:
        data[np.broadcast_to(b_ix, idx.shape)[vb], idx[vb]] = rows.data[vb]
    out = Tensor(data)
    nbase, nrows = _needs(base), _needs(rows)

    def backward(g):
        gb = g * (~written)[:, :, None] if nbase else None
        gr = None
        if nrows:
            gr = g[b_ix, idx]
            if valid is not None:
                gr = gr * valid[:, :, None]
        return gb, gr

    return _record(out, (base, rows), backward)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """x (B, C), idx (B,) -> (B,): pick one column per row."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_per_row: x {x.shape}, idx {idx.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(f"take_per_row: index out of range for C={x.shape[1]}")
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _record(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V, D) or (V,), integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for vocabulary {table.shape[0]}")
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backward)


# ---------------------------------------------------------------------------
# convolution (saliency-net geometry only)
# ---------------------------------------------------------------------------

def im2col(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Unfold (B, C, H, W) into (B, C*k*k, Ho*Wo) patches; pure indexing."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"im2col: kernel {k} stride {stride} pad {pad} too large for {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # gather indices over the padded plane
    i0 = np.repeat(np.arange(k), k).reshape(-1, 1)
    j0 = np.tile(np.arange(k), k).reshape(-1, 1)
    i1 = stride * np.repeat(np.arange(Ho), Wo).reshape(1, -1)
    j1 = stride * np.tile(np.arange(Wo), Ho).reshape(1, -1)
    ii = i0 + i1  # (k*k, Ho*Wo)
    jj = j0 + j1
    cols = xp[:, :, ii, jj].reshape(B, C * k * k, Ho * Wo)
    out = Tensor(cols)

    def backward(g):
        g = g.reshape(B, C, k * k, Ho * Wo)
        gp = np.zeros_like(xp)
        np.add.at(gp, (slice(None), slice(None), ii, jj), g)
        if pad:
            gp = gp[:, :, pad:-pad, pad:-pad]
        return (gp,)

    return _record(out, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
           pad: int = 1) -> Tensor:
    """2-D convolution via im2col + matmul. weight is (Cout, Cin, k, k)."""
    Cout, Cin, k, k2 = weight.shape
    if k != k2 or Cin != x.shape[1]:
        raise ShapeError(f"conv2d: weight {weight.shape} vs input {x.shape}")
    B, _, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = im2col(x, k, stride, pad)                      # (B, Cin*k*k, Ho*Wo)
    wmat = reshape(weight, (Cout, Cin * k * k))
    y = matmul(broadcast_to(reshape(wmat, (1, Cout, Cin * k * k)), (B, Cout, Cin * k * k)), cols)
    y = reshape(y, (B, Cout, Ho, Wo))
    if bias is not None:
        y = add(y, reshape(bias, (1, Cout, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-p) makes eval a no-op.

    Eval mode returns the input unchanged and consumes no randomness.
    """
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * keep)
    return _record(out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# composites and parameter utilities
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (..., Din) @ w (Din, Dout) + b, flattened to one dgemm."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(x2, w)
    if b is not None:
        y = add(y, b)
    if x.ndim != 2:
        y = reshape(y, lead + (w.shape[1],))
    return y


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
