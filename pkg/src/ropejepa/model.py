"""Whole-model assembly: encoders, masking, predictor, text, fusion, head.

The six experiment arms share this class; construction wires each arm so the
unused machinery is absent rather than idle (the no-text arm must genuinely
be smaller, and the uniform-masking arm has no saliency net to train).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .fusion import (ConcatFusion, FusionConfig, FusionModule, GATE_MODES,
                     VisionOnlyFusion)
from .masking import MaskConfig, MaskPlan, SaliencyNet, build_mask_plan, pad_ragged
from .nn import Linear, Module
from .predictor import LatentPredictor, PredictorConfig
from .taxonomy import NUM_CLASSES
from .tensor import ContractError, Tensor
from .text import TextConfig, TextEncoder, Vocabulary
from .vision import EncoderPair, VitConfig

ABLATIONS = ("E1", "E2", "E3", "E4", "E5", "E6")

TEXT_MODES = ("paired", "null")


@dataclass
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    predictor_depth: int = 2
    predictor_heads: int = 4
    text_dim: int = 48
    text_depth: int = 6
    text_heads: int = 4
    text_max_len: int = 32
    tap_layers: tuple = (2, 4, 6)
    mask: MaskConfig = field(default_factory=MaskConfig)
    uniform_mask_p: float = 0.46      # budget for the uniform-masking arm
    use_saliency_weights: bool = True
    num_classes: int = NUM_CLASSES
    ablation: str = "E1"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ContractError(f"unknown ablation tag: {self.ablation}")
        if not 0.0 < self.uniform_mask_p < 1.0:
            raise ContractError(
                f"uniform_mask_p must lie in (0, 1), got {self.uniform_mask_p}")

    def text_config(self, vocab_size: int) -> TextConfig:
        return TextConfig(vocab_size=vocab_size, dim=self.text_dim,
                          depth=self.text_depth, heads=self.text_heads,
                          max_len=self.text_max_len, tap_layers=self.tap_layers)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(vis_dim=self.vit.embed_dim, text_dim=self.text_dim,
                            num_classes=self.num_classes)


class CrossModalModel(Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int,
                 rng: np.random.Generator, ema_lambda: float = 0.996):
        self.cfg = cfg
        self.encoders = EncoderPair(cfg.vit, rng, ema_lambda)
        if cfg.ablation != "E3":
            self.saliency = SaliencyNet(cfg.vit.image_size, cfg.vit.grid, rng)
        self.predictor = LatentPredictor(
            PredictorConfig(dim=cfg.vit.embed_dim, depth=cfg.predictor_depth,
                            heads=cfg.predictor_heads,
                            num_tokens=cfg.vit.num_tokens), rng)
        if cfg.ablation != "E4":
            self.text = TextEncoder(cfg.text_config(vocab_size), rng)
            self.null_text = Tensor(
                rng.normal(0.0, 0.02, size=(1, cfg.text_dim)), requires_grad=True)
        fusion_cfg = cfg.fusion_config()
        if cfg.ablation == "E4":
            self.fusion = VisionOnlyFusion(fusion_cfg, rng)
        elif cfg.ablation == "E6":
            self.fusion = ConcatFusion(fusion_cfg, rng)
        else:
            self.fusion = FusionModule(fusion_cfg, rng)
        self.head = Linear(cfg.vit.embed_dim, cfg.num_classes, rng)

    # --- masking ---------------------------------------------------------

    def saliency_scores(self, images: Tensor) -> Optional[Tensor]:
        if self.cfg.ablation == "E3":
            return None
        return self.saliency(images)

    def make_plan(self, scores: Optional[np.ndarray], batch_size: int,
                  rng: np.random.Generator) -> MaskPlan:
        cfg = self.cfg
        if cfg.ablation == "E3":
            p = cfg.uniform_mask_p
            uniform = replace(cfg.mask, p_dense=p, p_background=p)
            flat = np.full((batch_size, cfg.vit.num_tokens), 0.5)
            return build_mask_plan(flat, rng, uniform)
        if scores is None:
            raise ContractError("saliency scores required outside the uniform arm")
        return build_mask_plan(scores, rng, cfg.mask)

    # --- JEPA branch ------------------------------------------------------

    def predict_masked(self, images: Tensor, plan: MaskPlan):
        """-> (z_hat, z_target rows, target_idx, target_valid)."""
        tokens = self.encoders.online.patchify(images)
        cidx, cval = pad_ragged(plan.context)
        tidx, tval = pad_ragged(plan.targets)
        ctx_tokens = T.gather_rows(tokens, cidx, cval)
        ctx_emb = self.encoders.online.encode(ctx_tokens, cval)
        z_hat = self.predictor.predict_targets(ctx_emb, cidx, cval, tidx, tval)
        full_targets = self.encoders.encode_targets(images)     # no grads
        B = tidx.shape[0]
        z_target = np.stack([full_targets[b, tidx[b]] for b in range(B)])
        return z_hat, z_target, tidx, tval

    # --- text branch ------------------------------------------------------

    def encode_text(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        if self.cfg.ablation == "E4":
            raise ContractError("the no-text arm has no text encoder")
        return self.text.encode(ids, valid)

    def null_text_features(self, batch_size: int):
        """Learnable constant standing in for a description at deployment."""
        if self.cfg.ablation == "E4":
            raise ContractError("the no-text arm has no text features")
        feats = T.reshape(self.null_text, (1, 1, self.cfg.text_dim))
        feats = T.broadcast_to(feats, (batch_size, 1, self.cfg.text_dim))
        return feats, np.ones((batch_size, 1), dtype=bool)

    # --- fusion to pooled embeddings -------------------------------------

    def fuse(self, vis: Tensor, text_feats: Optional[Tensor],
             text_valid: Optional[np.ndarray],
             class_indices: Optional[np.ndarray] = None,
             gate_mode: str = "label") -> Tensor:
        """Pooled embedding p for any arm.

        Gate modes (full arm only): 'label' uses true class gates,
        'predicted' runs a mean-gated pass, classifies, then regates with the
        argmax, 'mean' averages all gates.
        """
        ab = self.cfg.ablation
        if ab == "E4":
            return self.fusion.fuse(vis)
        if text_feats is None:
            raise ContractError("text features required outside the no-text arm")
        if ab == "E6":
            return self.fusion.fuse(vis, text_feats, text_valid)
        if ab == "E2":
            return self.fusion.fuse(vis, text_feats, text_valid, alpha=1.0)
        if gate_mode not in GATE_MODES:
            raise ContractError(f"unknown gate mode: {gate_mode}")
        if gate_mode == "label":
            if class_indices is None:
                raise ContractError("label gating needs class indices")
            alpha = self.fusion.alpha_for_classes(class_indices)
        elif gate_mode == "mean":
            alpha = self.fusion.alpha_mean(vis.shape[0])
        else:
            first = self.fusion.fuse(vis, text_feats, text_valid,
                                     self.fusion.alpha_mean(vis.shape[0]))
            guess = np.argmax(self.head(first).data, axis=1)
            alpha = self.fusion.alpha_for_classes(guess)
        return self.fusion.fuse(vis, text_feats, text_valid, alpha)

    def logits(self, pooled: Tensor) -> Tensor:
        return self.head(pooled)

    # --- inference-time embedding extraction ------------------------------

    def embed(self, images: np.ndarray, ids: Optional[np.ndarray],
              valid: Optional[np.ndarray], gate_mode: str = "predicted",
              class_indices: Optional[np.ndarray] = None,
              text_mode: str = "paired") -> np.ndarray:
        """Frozen forward to pooled embeddings; never records a tape."""
        if text_mode not in TEXT_MODES:
            raise ContractError(f"unknown text mode: {text_mode}")
        img = Tensor(np.asarray(images, dtype=np.float64))
        vis = self.encoders.online.forward_full(img)
        if self.cfg.ablation == "E4":
            return self.fuse(vis, None, None).data
        if text_mode == "null" or ids is None:
            feats, tvalid = self.null_text_features(img.shape[0])
        else:
            feats, tvalid = self.encode_text(ids, valid), valid
        p = self.fuse(vis, feats, tvalid, class_indices=class_indices,
                      gate_mode=gate_mode)
        return p.data


def build_vocabulary(samples) -> Vocabulary:
    return Vocabulary.build([s.description for s in samples])


def encode_descriptions(vocab: Vocabulary, samples, max_len: int):
    ids = np.stack([vocab.encode(s.description, max_len)[0] for s in samples])
    valid = np.stack([vocab.encode(s.description, max_len)[1] for s in samples])
    return ids, valid


def parameter_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())
