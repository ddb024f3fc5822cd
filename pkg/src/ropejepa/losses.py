"""The four-term training objective.

Latent reconstruction (smooth-L1 on unit-normalized predictions vs EMA
targets, saliency-weighted), severity-contrastive InfoNCE (positives share a
damage type at a different severity, negatives are other types), type
orthogonality on per-type centroids, and class-weighted focal classification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .taxonomy import CLASSES
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lambda_recon: float = 1.0
    lambda_sev: float = 0.5
    lambda_orth: float = 0.3
    lambda_focal: float = 1.0
    tau: float = 0.07
    beta_orth: float = 0.5
    gamma_focal: int = 2
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        for lam in (self.lambda_recon, self.lambda_sev, self.lambda_orth, self.lambda_focal):
            if lam < 0:
                raise ContractError(f"loss weight must be >= 0, got {lam}")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")


def recon_loss(z_hat: Tensor, z_target: np.ndarray, valid: np.ndarray,
               weights: Optional[Tensor] = None, beta: float = 1.0) -> Tensor:
    """Smooth-L1 between unit-normalized predictions and targets.

    ``z_target`` arrives as a plain array: targets are gradient-blocked by
    construction. ``weights`` are per-target-patch scalars (normalized to
    mean 1 upstream); they stay on the tape so the saliency net learns from
    this loss. Means run over valid (patch, dim) cells only.
    """
    if not valid.any():
        raise ContractError("recon_loss: batch has no target patches")
    zh = T.l2_normalize(z_hat, axis=-1)
    zt = np.asarray(z_target)
    norms = np.linalg.norm(zt, axis=-1, keepdims=True)
    zt = zt / np.maximum(norms, 1e-12)
    per_dim = T.smooth_l1(zh, T.const(zt), beta=beta)
    per_patch = T.tmean(per_dim, axis=-1)                 # (B, K)
    if weights is not None:
        per_patch = T.mul(per_patch, weights)
    per_patch = T.mul(per_patch, T.const(valid.astype(float)))
    return T.mul_const(T.tsum(per_patch), 1.0 / float(valid.sum()))


def _type_severity(class_indices: np.ndarray) -> tuple[list, list]:
    types = [CLASSES[int(c)].damage_type for c in class_indices]
    sevs = [CLASSES[int(c)].severity for c in class_indices]
    return types, sevs


def infonce_pair_masks(class_indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(positives, negatives) boolean B x B masks.

    Positive: same damage type, different severity grade. Negative:
    different damage type. Same type at the same grade (including the
    diagonal and severity-less same-type pairs) joins neither set.
    """
    types, sevs = _type_severity(class_indices)
    B = len(types)
    pos = np.zeros((B, B), dtype=bool)
    neg = np.zeros((B, B), dtype=bool)
    for i in range(B):
        for j in range(B):
            if i == j:
                continue
            if types[i] != types[j]:
                neg[i, j] = True
            elif sevs[i] is not None and sevs[j] is not None and sevs[i] != sevs[j]:
                pos[i, j] = True
    return pos, neg


def severity_infonce(p: Tensor, class_indices: np.ndarray, tau: float = 0.07) -> Tensor:
    """Mean over anchors with at least one positive of
    -log(sum_P e^{cos/tau} / (sum_P e^{cos/tau} + sum_N e^{cos/tau})).

    Batches without any valid anchor contribute zero.
    """
    class_indices = np.asarray(class_indices)
    B = p.shape[0]
    if B < 2 or len(class_indices) != B:
        raise ContractError(f"need a batch of >= 2 labelled embeddings, got {B}")
    pos, neg = infonce_pair_masks(class_indices)
    anchors = pos.any(axis=1)
    if not anchors.any():
        log.warning("severity InfoNCE: no valid anchors in batch, contributing 0")
        return T.const(np.zeros(()))
    z = T.l2_normalize(p, axis=-1)
    sim = T.mul_const(T.matmul(z, T.transpose(z, (1, 0))), 1.0 / tau)
    # |cos/tau| <= 1/0.07 ~ 14.3, comfortably inside exp range: no shift needed
    e = T.exp(sim)
    pos_sum = T.tsum(T.mul(e, T.const(pos.astype(float))), axis=1)
    den_sum = T.tsum(T.mul(e, T.const((pos | neg).astype(float))), axis=1)
    a = anchors.astype(float)
    # non-anchor rows are forced to log(1) - log(1) = 0
    pos_safe = T.add(T.mul(pos_sum, T.const(a)), T.const(1.0 - a))
    den_safe = T.add(T.mul(den_sum, T.const(a)), T.const(1.0 - a))
    losses = T.sub(T.log(den_safe), T.log(pos_safe))
    return T.mul_const(T.tsum(losses), 1.0 / float(anchors.sum()))


def type_orthogonality(p: Tensor, class_indices: np.ndarray,
                       beta: float = 0.5) -> Tensor:
    """Inter-type centroid separation plus intra-type compactness.

    Centroids are batch-local means of unit-normalized embeddings, one per
    damage type present. inter = mean over unordered type pairs of
    cos^2(c_i, c_j); intra = mean over samples of 1 - cos(p, c_type(p)).
    """
    class_indices = np.asarray(class_indices)
    B = p.shape[0]
    types, _ = _type_severity(class_indices)
    present = sorted(set(types))
    z = T.l2_normalize(p, axis=-1)
    avg = np.zeros((len(present), B))
    sel = np.zeros((B, len(present)))
    for ti, typ in enumerate(present):
        members = [b for b in range(B) if types[b] == typ]
        avg[ti, members] = 1.0 / len(members)
        sel[members, ti] = 1.0
    centroids = T.matmul(T.const(avg), z)                  # (T, D)
    cn = T.l2_normalize(centroids, axis=-1)
    n_types = len(present)
    if n_types > 1:
        gram = T.matmul(cn, T.transpose(cn, (1, 0)))
        pair_mask = np.triu(np.ones((n_types, n_types)), k=1)
        n_pairs = pair_mask.sum()
        inter = T.mul_const(
            T.tsum(T.mul(T.powi(gram, 2), T.const(pair_mask))), 1.0 / n_pairs)
    else:
        inter = T.const(np.zeros(()))
    own = T.matmul(T.const(sel), cn)                       # (B, D) unit centroid rows
    cos = T.tsum(T.mul(z, own), axis=1)
    intra = T.tmean(T.add_const(T.neg(cos), 1.0))
    return T.add(inter, T.mul_const(intra, beta))


def focal_loss(logits: Tensor, labels: np.ndarray, class_weights: np.ndarray,
               gamma: int = 2) -> Tensor:
    """w_y * (1 - p_t)^gamma * (-log p_t), mean over the batch."""
    labels = np.asarray(labels, dtype=np.intp)
    C = logits.shape[1]
    if labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"label outside [0, {C})")
    class_weights = np.asarray(class_weights, dtype=float)
    if (class_weights <= 0).any():
        raise ContractError("class weights must be strictly positive")
    logp = T.log_softmax(logits, axis=-1)
    lp_t = T.take_per_row(logp, labels)
    nll = T.neg(lp_t)
    if gamma > 0:
        p_t = T.exp(lp_t)
        focus = T.powi(T.add_const(T.neg(p_t), 1.0), gamma)
        nll = T.mul(focus, nll)
    weighted = T.mul(nll, T.const(class_weights[labels]))
    return T.tmean(weighted)


def inverse_frequency_weights(train_counts: np.ndarray) -> np.ndarray:
    """w_c = N / (C * n_c)."""
    counts = np.asarray(train_counts, dtype=float)
    if (counts <= 0).any():
        raise ContractError("every class needs at least one training sample")
    return counts.sum() / (len(counts) * counts)


def total_loss(terms: dict[str, Union[Tensor, float]],
               cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the four terms plus a float breakdown for logging.

    Missing terms count as zero (phase 1 runs without the contrastive pair).
    """
    lams = {"recon": cfg.lambda_recon, "severity": cfg.lambda_sev,
            "orthogonality": cfg.lambda_orth, "focal": cfg.lambda_focal}
    unknown = set(terms) - set(lams)
    if unknown:
        raise ContractError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    breakdown = {}
    for name, lam in lams.items():
        term = terms.get(name)
        if term is None:
            breakdown[name] = 0.0
            continue
        if not isinstance(term, Tensor):
            term = T.const(np.asarray(term, dtype=float))
        breakdown[name] = term.item()
        piece = T.mul_const(term, lam)
        total = piece if total is None else T.add(total, piece)
    if total is None:
        total = T.const(np.zeros(()))
    breakdown["total"] = total.item()
    return total, breakdown
