"""Toy bidirectional text encoder with multi-scale tap averaging.

Stands in for a large decoder-only LM: word-level vocabulary, learnable token
and position embeddings, a short stack of bidirectional blocks, and the
output defined as the mean of three intermediate hidden states rather than
the final layer alone.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Module, TransformerBlock, key_padding_bias
from .tensor import ContractError, ShapeError, Tensor

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary; id 0/1/2 reserved for PAD/UNK/BOS."""

    PAD, UNK, BOS = 0, 1, 2
    SPECIALS = ("<pad>", "<unk>", "<bos>")

    def __init__(self, tokens: list[str]):
        self.tokens = list(self.SPECIALS) + list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        seen = set()
        for text in texts:
            seen.update(words(text))
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """-> (ids, valid), both length max_len; BOS first, PAD tail."""
        ids = [self.BOS] + [self.ids.get(w, self.UNK) for w in words(text)]
        ids = ids[:max_len]
        valid = np.zeros(max_len, dtype=bool)
        valid[:len(ids)] = True
        out = np.full(max_len, self.PAD, dtype=np.intp)
        out[:len(ids)] = ids
        return out, valid

    def to_lines(self) -> str:
        return "\n".join(self.tokens)

    @classmethod
    def from_lines(cls, blob: str) -> "Vocabulary":
        lines = blob.split("\n")
        if tuple(lines[:3]) != cls.SPECIALS:
            raise ContractError("vocabulary blob missing special tokens")
        return cls(lines[3:])


@dataclass
class TextConfig:
    vocab_size: int = 0           # filled once the vocabulary exists
    dim: int = 48
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 32
    tap_layers: tuple = (2, 4, 6)

    def __post_init__(self):
        if len(self.tap_layers) != 3:
            raise ContractError(f"exactly 3 tap layers required, got {self.tap_layers}")
        for k in self.tap_layers:
            if not 1 <= k <= self.depth:
                raise ContractError(f"tap layer {k} outside [1, {self.depth}]")


def tail_block_count(depth: int) -> int:
    """Trainable tail size at the reference 4-of-28 ratio."""
    return math.ceil(depth * 4 / 28)


class TextEncoder(Module):
    def __init__(self, cfg: TextConfig, rng: np.random.Generator):
        if cfg.vocab_size < 3:
            raise ContractError("vocab_size must cover the special tokens")
        self.cfg = cfg
        self.tok_embed = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.dim)), requires_grad=True)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.dim)), requires_grad=True)
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.final_norm = LayerNorm(cfg.dim)

    def encode(self, ids: np.ndarray, valid: np.ndarray,
               return_taps: bool = False):
        """(B, L) ids -> (B, L, D) multi-scale features.

        Hidden states are recorded after each tapped block (the final layer's
        tap is taken after the closing LayerNorm) and averaged. PAD keys are
        excluded from every attention pattern, so PAD content cannot leak
        into valid positions.
        """
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.intp)
        if ids.ndim != 2 or ids.shape[1] != cfg.max_len:
            raise ShapeError(f"ids must be (B, {cfg.max_len}), got {ids.shape}")
        if ids.max() >= cfg.vocab_size:
            raise ShapeError(f"token id {ids.max()} outside vocabulary {cfg.vocab_size}")
        bias = key_padding_bias(valid)
        x = T.add(T.embedding(self.tok_embed, ids),
                  T.reshape(self.pos_embed, (1, cfg.max_len, cfg.dim)))
        taps = {}
        for k, block in enumerate(self.blocks, start=1):
            x = block(x, bias)
            if k in cfg.tap_layers:
                taps[k] = self.final_norm(x) if k == cfg.depth else x
        feats = taps[cfg.tap_layers[0]]
        for k in cfg.tap_layers[1:]:
            feats = T.add(feats, taps[k])
        feats = T.mul_const(feats, 1.0 / len(cfg.tap_layers))
        if return_taps:
            return feats, taps
        return feats

    def set_trainable(self, mode: str) -> None:
        """'tail' -> last ceil(depth*4/28) blocks + final norm train;
        'frozen' -> nothing in the trunk trains."""
        if mode not in ("tail", "frozen"):
            raise ContractError(f"unknown text trainability mode: {mode}")
        self.set_requires_grad(False)
        if mode == "tail":
            k = tail_block_count(self.cfg.depth)
            for block in self.blocks[self.cfg.depth - k:]:
                block.set_requires_grad(True)
            self.final_norm.set_requires_grad(True)
