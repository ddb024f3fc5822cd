"""Severity-conditioned cross-modal fusion.

Text features are projected into the visual width and normalized; visual
tokens query them through multi-head cross-attention; the attended text is
scaled by a per-class sigmoid gate before the residual add; a small FFN
refines; mean pooling over tokens yields the backbone embedding.

The per-class gates are the severity conditioning: each of the 14 classes
learns its own scalar controlling how much text reaches the visual stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .nn import (FeedForward, LayerNorm, Linear, Module, MultiHeadAttention,
                 key_padding_bias)
from .tensor import ContractError, ShapeError, Tensor

GATE_MODES = ("label", "predicted", "mean")


@dataclass
class FusionConfig:
    vis_dim: int = 64
    text_dim: int = 48
    heads: int = 4
    num_classes: int = 14


class FusionModule(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.text_dim, cfg.vis_dim, rng)
        self.proj_norm = LayerNorm(cfg.vis_dim)
        self.query_norm = LayerNorm(cfg.vis_dim)
        self.attn = MultiHeadAttention(cfg.vis_dim, cfg.heads, rng)
        # neutral start: sigma(0) = 0.5 fusion strength for every class
        self.gates = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
        self.ffn_norm = LayerNorm(cfg.vis_dim)
        self.ffn = FeedForward(cfg.vis_dim, 2 * cfg.vis_dim, rng)

    # --- pipeline stages -------------------------------------------------

    def project_text(self, text_feats: Tensor) -> Tensor:
        if text_feats.shape[-1] != self.cfg.text_dim:
            raise ShapeError(f"text dim {text_feats.shape[-1]} != {self.cfg.text_dim}")
        return self.proj_norm(self.proj(text_feats))

    def cross_attend(self, vis: Tensor, t_hat: Tensor,
                     text_valid: np.ndarray) -> Tensor:
        """Queries LN(vis) against text keys/values; PAD keys masked.

        A fully padded row would make every key unattendable, so such rows
        fall back to attending position 0 (the BOS slot) alone.
        """
        valid = np.asarray(text_valid, dtype=bool).copy()
        dead = ~valid.any(axis=1)
        if dead.any():
            valid[dead, 0] = True
        return self.attn(self.query_norm(vis), t_hat, key_padding_bias(valid))

    def alpha_for_classes(self, class_ids: np.ndarray) -> Tensor:
        class_ids = np.asarray(class_ids, dtype=np.intp)
        if class_ids.min() < 0 or class_ids.max() >= self.cfg.num_classes:
            raise ContractError(f"class id outside [0, {self.cfg.num_classes})")
        g = T.embedding(self.gates, class_ids)            # (B,)
        return T.reshape(T.sigmoid(g), (len(class_ids), 1, 1))

    def alpha_mean(self, batch: int) -> Tensor:
        g = T.tmean(self.gates)
        return T.broadcast_to(T.reshape(T.sigmoid(g), (1, 1, 1)), (batch, 1, 1))

    def gate_and_fuse(self, vis: Tensor, attended: Tensor,
                      alpha: Union[Tensor, float]) -> Tensor:
        if isinstance(alpha, Tensor):
            return T.add(vis, T.mul(alpha, attended))
        return T.add(vis, T.mul_const(attended, float(alpha)))

    def ffn_refine(self, fused: Tensor) -> Tensor:
        return T.add(fused, self.ffn(self.ffn_norm(fused)))

    def pool(self, refined: Tensor) -> Tensor:
        return T.tmean(refined, axis=1)

    # --- assembled paths -------------------------------------------------

    def fuse(self, vis: Tensor, text_feats: Tensor, text_valid: np.ndarray,
             alpha: Union[Tensor, float]) -> Tensor:
        t_hat = self.project_text(text_feats)
        attended = self.cross_attend(vis, t_hat, text_valid)
        fused = self.gate_and_fuse(vis, attended, alpha)
        return self.pool(self.ffn_refine(fused))

    def fuse_vision_only(self, vis: Tensor) -> Tensor:
        """Text path removed entirely (ablation): p = pool(V + FFN(LN(V)))."""
        return self.pool(self.ffn_refine(vis))

    def gates_csv(self, class_names) -> str:
        from scipy.special import expit
        lines = ["class,gate,alpha"]
        for name, g in zip(class_names, self.gates.data):
            lines.append(f"{name},{g:.8f},{expit(g):.8f}")
        return "\n".join(lines)


class VisionOnlyFusion(Module):
    """No-text ablation head: p = pool(V + FFN(LN(V))).

    A separate class (rather than FusionModule with the text path idle) so
    the no-text model genuinely carries fewer parameters.
    """

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.ffn_norm = LayerNorm(cfg.vis_dim)
        self.ffn = FeedForward(cfg.vis_dim, 2 * cfg.vis_dim, rng)

    def fuse(self, vis: Tensor) -> Tensor:
        refined = T.add(vis, self.ffn(self.ffn_norm(vis)))
        return T.tmean(refined, axis=1)


class ConcatFusion(Module):
    """Simple-fusion ablation: mean-pooled vision and projected text are
    concatenated and pushed through a two-layer MLP; no attention, no gates.
    Owns a private text projection rather than borrowing the gated one."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.text_dim, cfg.vis_dim, rng)
        self.proj_norm = LayerNorm(cfg.vis_dim)
        self.fc1 = Linear(2 * cfg.vis_dim, cfg.vis_dim, rng)
        self.fc2 = Linear(cfg.vis_dim, cfg.vis_dim, rng)

    def fuse(self, vis: Tensor, text_feats: Tensor, text_valid: np.ndarray) -> Tensor:
        t_hat = self.proj_norm(self.proj(text_feats))
        # PAD rows must not drag the text mean toward the PAD embedding
        valid = np.asarray(text_valid, dtype=float)
        counts = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
        masked = T.mul(t_hat, T.const(valid[:, :, None]))
        t_mean = T.mul(T.tsum(masked, axis=1), T.const(1.0 / counts))
        v_mean = T.tmean(vis, axis=1)
        h = T.gelu(self.fc1(T.concat([v_mean, t_mean], axis=1)))
        return self.fc2(h)
