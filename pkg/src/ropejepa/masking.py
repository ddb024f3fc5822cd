"""Saliency-guided two-tier masking.

A small conv net scores each patch; the top 40% by score count as damage-dense
and are masked aggressively (0.70), the rest lightly (0.30). A floor of ten
visible patches keeps the context pass meaningful. Sampling is
non-differentiable; the saliency scores themselves stay differentiable and
are reused as loss weights so the reconstruction objective can train the net.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, param
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class MaskConfig:
    dense_fraction: float = 0.4
    p_dense: float = 0.70
    p_background: float = 0.30
    min_visible: int = 10

    def __post_init__(self):
        if not 0.0 < self.dense_fraction < 1.0:
            raise ContractError(f"dense_fraction outside (0,1): {self.dense_fraction}")
        for p in (self.p_dense, self.p_background):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"mask probability outside [0,1]: {p}")


_CHANNELS = (3, 32, 64, 64, 32)


class SaliencyNet(Module):
    """3->32->64->64->32 conv stack, 1-channel projection, sigmoid.

    Stride-2 stages downsample the image exactly to the patch grid, so the
    output is one score per patch.
    """

    def __init__(self, image_size: int, grid: int, rng: np.random.Generator):
        factor = image_size // grid
        if factor * grid != image_size or factor & (factor - 1):
            raise ShapeError(f"image {image_size} to grid {grid} needs a power-of-two factor")
        n_down = factor.bit_length() - 1
        if n_down > len(_CHANNELS) - 1:
            raise ShapeError(f"cannot reach grid {grid} with 4 conv layers")
        self.grid = grid
        self.strides = [2] * n_down + [1] * (len(_CHANNELS) - 1 - n_down)
        self.weights = []
        self.biases = []
        for cin, cout in zip(_CHANNELS[:-1], _CHANNELS[1:]):
            self.weights.append(param(rng, (cout, cin, 3, 3), std=1.0 / math.sqrt(cin * 9)))
            self.biases.append(param(rng, (cout,), std=0.0))
        self.proj_w = param(rng, (1, _CHANNELS[-1], 1, 1), std=1.0 / math.sqrt(_CHANNELS[-1]))
        self.proj_b = param(rng, (1,), std=0.0)

    def __call__(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, N) scores in (0, 1), row-major patch order."""
        x = images
        for w, b, s in zip(self.weights, self.biases, self.strides):
            x = T.gelu(T.conv2d(x, w, b, stride=s, pad=1))
        x = T.conv2d(x, self.proj_w, self.proj_b, stride=1, pad=0)
        scores = T.sigmoid(x)
        B = images.shape[0]
        return T.reshape(scores, (B, self.grid * self.grid))


@dataclass
class MaskPlan:
    """Per-image partition of the patch grid into context and target sets."""
    context: list = field(default_factory=list)   # ascending visible indices
    targets: list = field(default_factory=list)   # ascending masked indices
    dense_flags: np.ndarray = None                # (B, N) bool

    @property
    def batch_size(self) -> int:
        return len(self.context)


def build_mask_plan(saliency: np.ndarray, rng: np.random.Generator,
                    cfg: MaskConfig = MaskConfig()) -> MaskPlan:
    """Sample one context/target partition per image.

    Ranking ties break by ascending patch index. If a draw leaves fewer than
    ``min_visible`` patches visible, the lowest-saliency masked patches are
    returned to the context until the floor holds.
    """
    saliency = np.asarray(saliency)
    if saliency.ndim != 2:
        raise ShapeError(f"saliency must be (B, N), got {saliency.shape}")
    B, N = saliency.shape
    if N <= cfg.min_visible:
        raise ContractError(f"need more than {cfg.min_visible} patches, got {N}")
    n_dense = math.ceil(cfg.dense_fraction * N)
    plan = MaskPlan(dense_flags=np.zeros((B, N), dtype=bool))
    idx = np.arange(N)
    for b in range(B):
        s = saliency[b]
        by_score_desc = np.lexsort((idx, -s))
        dense = np.zeros(N, dtype=bool)
        dense[by_score_desc[:n_dense]] = True
        plan.dense_flags[b] = dense
        p = np.where(dense, cfg.p_dense, cfg.p_background)
        masked = rng.random(N) < p
        visible = int(N - masked.sum())
        if visible < cfg.min_visible:
            masked_idx = idx[masked]
            recover = masked_idx[np.lexsort((masked_idx, s[masked]))]
            masked[recover[:cfg.min_visible - visible]] = False
        plan.context.append(idx[~masked].copy())
        plan.targets.append(idx[masked].copy())
    return plan


def pad_ragged(index_lists: list, pad_value: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length index arrays into (B, Kmax) plus validity mask.

    Padded slots hold ``pad_value`` (a safe in-range index) and are False in
    the mask. Kmax is at least 1 so downstream shapes stay legal.
    """
    B = len(index_lists)
    kmax = max((len(ix) for ix in index_lists), default=0)
    kmax = max(kmax, 1)
    out = np.full((B, kmax), pad_value, dtype=np.intp)
    valid = np.zeros((B, kmax), dtype=bool)
    for b, ix in enumerate(index_lists):
        out[b, :len(ix)] = ix
        valid[b, :len(ix)] = True
    return out, valid


def saliency_loss_weights(saliency: Tensor, target_idx: np.ndarray,
                          target_valid: np.ndarray) -> Tensor:
    """Per-target weights, mean-normalized to 1 over valid slots per image.

    Kept on the tape deliberately: this is the path by which reconstruction
    error trains the saliency net.
    """
    B, kmax = target_idx.shape
    picked = T.gather_rows(T.reshape(saliency, saliency.shape + (1,)), target_idx, target_valid)
    picked = T.reshape(picked, (B, kmax))
    counts = np.maximum(target_valid.sum(axis=1, keepdims=True), 1)
    mean = T.mul(T.tsum(picked, axis=1, keepdims=True), T.const(1.0 / counts))
    # guard: all-masked-out rows would divide 0/0 without the +tiny
    return T.div(picked, T.add_const(mean, 1e-12))
