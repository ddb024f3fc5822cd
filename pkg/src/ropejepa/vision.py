"""Vision transformer pair: trainable online encoder and its EMA shadow.

The online encoder runs twice per training step (masked-context pass for the
predictor, full pass for fusion); the target runs once, full, with gradients
structurally impossible because none of its tensors require grad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import (LayerNorm, Linear, Module, TransformerBlock, copy_parameters,
                 key_padding_bias)
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class VitConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2


class VisionTransformer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size ** 2
        self.patch_proj = Linear(patch_dim, cfg.embed_dim, rng)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.embed_dim)),
            requires_grad=True)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.final_norm = LayerNorm(cfg.embed_dim)

    def patchify(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, N, D) projected patches with positions added.

        Patch order is row-major over the grid; positional embeddings are
        added exactly once, here.
        """
        cfg = self.cfg
        B, C, H, W = images.shape
        if C != cfg.channels or H != cfg.image_size or W != cfg.image_size:
            raise ShapeError(f"expected (B, {cfg.channels}, {cfg.image_size}, "
                             f"{cfg.image_size}) images, got {images.shape}")
        cols = T.im2col(images, cfg.patch_size, cfg.patch_size, 0)   # (B, C*ps*ps, N)
        patches = T.transpose(cols, (0, 2, 1))
        tokens = self.patch_proj(patches)
        return T.add(tokens, T.reshape(self.pos_embed, (1, cfg.num_tokens, cfg.embed_dim)))

    def encode(self, tokens: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
        """Run all blocks plus final norm.

        ``valid`` marks real rows when ``tokens`` is a padded subset of the
        grid (masked-context pass); padded rows are excluded from attention
        keys, and their outputs are meaningless; callers must mask them.
        """
        if valid is not None:
            if valid.shape != tokens.shape[:2]:
                raise ShapeError(f"valid {valid.shape} vs tokens {tokens.shape}")
            if not valid.any(axis=1).all():
                raise ContractError("encode: an image has an empty visible set")
            bias = key_padding_bias(valid)
        else:
            bias = None
        x = tokens
        for block in self.blocks:
            x = block(x, bias)
        return self.final_norm(x)

    def forward_full(self, images: Tensor) -> Tensor:
        return self.encode(self.patchify(images))

    def backbone_blocks_trainable(self, phase: int, unfreeze_last: Optional[int] = None) -> None:
        """Freeze policy. Phase 1: everything frozen. Phase 2: the last
        ``unfreeze_last`` blocks (default ceil(depth * 6/32)) plus the final
        norm train; patch projection and positions stay frozen in both."""
        if phase not in (1, 2):
            raise ContractError(f"phase must be 1 or 2, got {phase}")
        self.set_requires_grad(False)
        if phase == 2:
            k = phase2_block_count(self.cfg.depth) if unfreeze_last is None else unfreeze_last
            for block in self.blocks[self.cfg.depth - k:]:
                block.set_requires_grad(True)
            self.final_norm.set_requires_grad(True)


def phase2_block_count(depth: int) -> int:
    """Unfrozen tail size scales with depth at the reference 6-of-32 ratio."""
    return math.ceil(depth * 6 / 32)


class EncoderPair(Module):
    """Online encoder + EMA target with identical topology.

    The target starts as an exact copy and never requires grad, so it can
    never land on a tape.
    """

    def __init__(self, cfg: VitConfig, rng: np.random.Generator, ema_lambda: float = 0.996):
        if not 0.0 <= ema_lambda <= 1.0:
            raise ContractError(f"ema_lambda outside [0, 1]: {ema_lambda}")
        self.online = VisionTransformer(cfg, rng)
        self.target = VisionTransformer(cfg, rng)
        copy_parameters(self.online, self.target)
        self.target.set_requires_grad(False)
        self.ema_lambda = ema_lambda

    def ema_update(self) -> None:
        lam = self.ema_lambda
        op, tp = self.online.named_parameters(), self.target.named_parameters()
        for name, o in op.items():
            t = tp[name]
            if t.shape != o.shape:
                raise ShapeError(f"ema_update shape mismatch at {name}")
            t.data = lam * t.data + (1.0 - lam) * o.data

    def encode_targets(self, images: Tensor) -> np.ndarray:
        """Full-image target embeddings as a plain array (no tape, no grads)."""
        out = self.target.forward_full(Tensor(images.data))
        return out.data
