"""Latent predictor: fills masked grid positions with a shared learnable
token and regresses the EMA-target embeddings there from the visible context.

Works on padded ragged batches: context and target index arrays carry
validity masks, invalid slots contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, TransformerBlock
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class PredictorConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    num_tokens: int = 64

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")


class LatentPredictor(Module):
    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.mask_token = Tensor(rng.normal(0.0, 0.02, size=(cfg.dim,)), requires_grad=True)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.dim)), requires_grad=True)
        # blocks start as identity: keeps early targets close to the mask token
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng,
                                        zero_init_outputs=True)
                       for _ in range(cfg.depth)]

    def predict_targets(self, context_emb: Tensor, context_idx: np.ndarray,
                        context_valid: np.ndarray, target_idx: np.ndarray,
                        target_valid: np.ndarray) -> Tensor:
        """(B, Cmax, D) context -> (B, Kmax, D) predictions at target slots.

        The full grid is assembled: mask token everywhere, context rows
        scattered into their true positions, predictor positions added, all
        blocks run with full attention (every grid position is a real token).
        Output rows follow ``target_idx`` order; invalid slots are zeroed.
        """
        cfg = self.cfg
        if not target_valid.any():
            raise ContractError("predict_targets: batch has no target positions")
        B = context_emb.shape[0]
        if context_emb.shape[2] != cfg.dim:
            raise ShapeError(f"context dim {context_emb.shape[2]} != {cfg.dim}")
        base = T.broadcast_to(T.reshape(self.mask_token, (1, 1, cfg.dim)),
                              (B, cfg.num_tokens, cfg.dim))
        seq = T.scatter_rows(base, context_idx, context_emb, context_valid)
        seq = T.add(seq, T.reshape(self.pos_embed, (1, cfg.num_tokens, cfg.dim)))
        for block in self.blocks:
            seq = block(seq)
        return T.gather_rows(seq, target_idx, target_valid)
