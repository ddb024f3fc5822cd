"""Two-phase curriculum: frozen-backbone warmup, then partial unfreeze.

Phase 1 trains the heads (saliency, predictor, fusion, classifier, text tail)
with the reconstruction and focal terms while every vision block stays
frozen. Phase 2 unfreezes the last vision block and the final norm at a
backbone learning rate 10x below the head rate and turns on all four loss
terms. Both phases get a fresh optimizer; the EMA target updates once per
step and never sees the optimizer.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset, augment, make_splits
from .losses import (LossConfig, focal_loss, inverse_frequency_weights,
                     recon_loss, severity_infonce, total_loss,
                     type_orthogonality)
from .masking import saliency_loss_weights
from .metrics import accuracy, macro_f1
from .model import (ABLATIONS, CrossModalModel, ModelConfig, TEXT_MODES,
                    build_vocabulary, encode_descriptions)
from .fusion import GATE_MODES
from .tensor import ContractError, Tape, Tensor, clip_grad_norm, global_grad_norm, zero_grads


@dataclass
class TrainConfig:
    phase1_epochs: int = 10
    phase2_epochs: int = 40
    batch_size: int = 32
    # lr table scaled x30 from the reference fine-tuning values, which
    # assume a pretrained backbone; ratios and cosine shape preserved
    lr_phase1: float = 3e-3
    lr_phase1_end: float = 3e-5
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    lr_phase2_end: float = 1e-5
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    ema_lambda: float = 0.996
    seed: int = 0
    ablation: str = "E1"
    gate_mode: str = "predicted"       # evaluation-time gating
    text_mode: str = "paired"
    phase1_full_cdd: bool = False      # all four terms from the start
    uniform_mask_p: float = 0.46
    use_saliency_weights: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.phase1_epochs < 1 or self.phase2_epochs < 1:
            raise ContractError("both phases need at least one epoch")
        for name in ("lr_phase1", "lr_phase1_end", "lr_backbone", "lr_head",
                     "lr_phase2_end"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.ablation not in ABLATIONS:
            raise ContractError(f"unknown ablation tag: {self.ablation}")
        if self.gate_mode not in GATE_MODES:
            raise ContractError(f"unknown gate mode: {self.gate_mode}")
        if self.text_mode not in TEXT_MODES:
            raise ContractError(f"unknown text mode: {self.text_mode}")


@dataclass
class StepRecord:
    step: int
    phase: int
    lrs: dict
    losses: dict
    grad_norm: float


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the offending step record."""

    def __init__(self, record: StepRecord):
        super().__init__(f"non-finite loss at step {record.step}: {record.losses}")
        self.record = record


def cosine_schedule(step: int, total_steps: int, lr_start: float,
                    lr_end: float) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    cos = math.cos(math.pi * step / total_steps)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + cos)


# --- optimizer --------------------------------------------------------------

def wants_decay(name: str, p: Tensor) -> bool:
    """Matrices decay; biases, norms, gates, and embedding tables do not."""
    if p.data.ndim < 2:
        return False
    return not name.endswith(("pos_embed", "tok_embed", "null_text"))


class AdamW:
    """Decoupled weight decay; learning rate supplied per group at each step."""

    def __init__(self, named_params: dict, groups: dict, weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = {n: p for n, p in named_params.items() if p.requires_grad}
        self.groups = {n: groups[n] for n in self.params}
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lrs: dict) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            lr = lrs[self.groups[name]]
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - lr * update
            if wants_decay(name, p):
                p.data = p.data - lr * self.weight_decay * p.data

    def state_arrays(self) -> dict:
        out = {"t": np.array([float(self.t)])}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, blobs: dict) -> None:
        self.t = int(blobs["t"][0])
        for n in self.params:
            self.m[n] = blobs[f"m.{n}"].copy()
            self.v[n] = blobs[f"v.{n}"].copy()


def parameter_groups(model: CrossModalModel) -> dict:
    """'backbone' = online vision trunk; everything else is 'head'."""
    groups = {}
    for name in model.named_parameters():
        trunk = name.startswith("encoders.online.")
        groups[name] = "backbone" if trunk else "head"
    return groups


# --- model wiring per experiment arm ---------------------------------------

def apply_ablation(cfg: TrainConfig, vocab_size: int,
                   rng: np.random.Generator) -> CrossModalModel:
    model_cfg = ModelConfig(ablation=cfg.ablation,
                            uniform_mask_p=cfg.uniform_mask_p,
                            use_saliency_weights=cfg.use_saliency_weights)
    model = CrossModalModel(model_cfg, vocab_size, rng,
                            ema_lambda=cfg.ema_lambda)
    if cfg.ablation != "E4":
        model.text.set_trainable("frozen" if cfg.ablation == "E5" else "tail")
    return model


# --- single optimization step ----------------------------------------------

@dataclass
class TrainBatch:
    """One step's raw inputs; augmentation happens inside train_step."""
    samples: list
    ids: Optional[np.ndarray]         # (B, L) token ids, None for E4
    valid: Optional[np.ndarray]
    aug_seeds: list                   # one seed per sample
    mask_rng: np.random.Generator


def _ema_digest(model: CrossModalModel) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for name, p in sorted(model.encoders.target.named_parameters().items()):
        h.update(np.ascontiguousarray(p.data))
    return h.digest()


def cdd_objective(model: CrossModalModel, img: Tensor, plan,
                  ids: Optional[np.ndarray], valid: Optional[np.ndarray],
                  labels: np.ndarray, class_weights: np.ndarray,
                  cfg: TrainConfig, full_cdd: bool):
    """One forward pass of the training objective over a fixed mask plan.

    The plan is data, not a differentiable quantity: perturbing saliency
    must not reshuffle which patches are masked, or finite differences
    would chase a discontinuity. Saliency still enters smoothly through
    the reconstruction weights.
    """
    scores = model.saliency_scores(img)
    z_hat, z_target, tidx, tval = model.predict_masked(img, plan)
    weights = None
    if scores is not None and cfg.use_saliency_weights:
        weights = saliency_loss_weights(scores, tidx, tval)
    terms = {"recon": recon_loss(z_hat, z_target, tval, weights=weights,
                                 beta=cfg.loss.smooth_l1_beta)}
    vis = model.encoders.online.forward_full(img)
    if cfg.ablation == "E4":
        pooled = model.fuse(vis, None, None)
    else:
        feats = model.encode_text(ids, valid)
        pooled = model.fuse(vis, feats, valid, class_indices=labels,
                            gate_mode="label")
    logits = model.logits(pooled)
    if full_cdd:
        terms["severity"] = severity_infonce(pooled, labels, cfg.loss.tau)
        terms["orthogonality"] = type_orthogonality(
            pooled, labels, cfg.loss.beta_orth)
    terms["focal"] = focal_loss(logits, labels, class_weights,
                                gamma=cfg.loss.gamma_focal)
    return total_loss(terms, cfg.loss)


def train_step(model: CrossModalModel, opt: AdamW, batch: TrainBatch,
               class_weights: np.ndarray, cfg: TrainConfig, phase: int,
               step: int, lrs: dict, mean: np.ndarray,
               std: np.ndarray) -> StepRecord:
    images = np.stack([augment(s.image, seed, mean, std, train=True)
                       for s, seed in zip(batch.samples, batch.aug_seeds)])
    labels = np.array([s.class_index for s in batch.samples], dtype=np.intp)
    ids, valid = batch.ids, batch.valid
    img = Tensor(images)
    scores = model.saliency_scores(img)
    plan = model.make_plan(None if scores is None else scores.data,
                           img.shape[0], batch.mask_rng)
    full_cdd = phase == 2 or cfg.phase1_full_cdd
    with Tape() as tape:
        loss, breakdown = cdd_objective(model, img, plan, ids, valid, labels,
                                        class_weights, cfg, full_cdd)
        record = StepRecord(step=step, phase=phase, lrs=dict(lrs),
                            losses=breakdown, grad_norm=0.0)
        if not math.isfinite(breakdown["total"]):
            raise TrainingAborted(record)
        tape.backward(loss)
    trainable = [p for p in model.parameters() if p.requires_grad]
    record.grad_norm = global_grad_norm(trainable)
    clip_grad_norm(trainable, cfg.clip_norm)
    before = _ema_digest(model)
    opt.step(lrs)
    if _ema_digest(model) != before:
        raise ContractError("optimizer touched the EMA target parameters")
    zero_grads(model.parameters())
    model.encoders.ema_update()
    return record


# --- evaluation helpers ----------------------------------------------------

def embed_samples(model, samples, vocab, mean, std, cfg: TrainConfig,
                  batch_size: int = 64, gate_mode: Optional[str] = None,
                  text_mode: Optional[str] = None) -> np.ndarray:
    """Frozen embeddings for a list of samples, deterministic."""
    gate_mode = cfg.gate_mode if gate_mode is None else gate_mode
    text_mode = cfg.text_mode if text_mode is None else text_mode
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images = np.stack([augment(s.image, 0, mean, std, train=False)
                           for s in chunk])
        if cfg.ablation == "E4" or text_mode == "null":
            ids = valid = None
        else:
            ids, valid = encode_descriptions(vocab, chunk,
                                             model.cfg.text_max_len)
        out.append(model.embed(images, ids, valid, gate_mode=gate_mode,
                               text_mode=text_mode))
    return np.concatenate(out, axis=0)


def evaluate_split(model, samples, vocab, mean, std, cfg: TrainConfig):
    """-> (accuracy, macro-F1) using the training-time classifier head."""
    pooled = embed_samples(model, samples, vocab, mean, std, cfg)
    logits = model.logits(Tensor(pooled)).data
    pred = np.argmax(logits, axis=1)
    labels = np.array([s.class_index for s in samples])
    return accuracy(pred, labels), macro_f1(pred, labels, model.cfg.num_classes)


def snapshot_parameters(model) -> dict:
    return {n: p.data.copy() for n, p in model.named_parameters().items()}


def restore_parameters(model, snapshot: dict) -> None:
    named = model.named_parameters()
    if set(named) != set(snapshot):
        missing = set(named) ^ set(snapshot)
        raise ContractError(f"parameter snapshot mismatch: {sorted(missing)[:4]}")
    for n, p in named.items():
        p.data = snapshot[n].copy()


# --- the curriculum ---------------------------------------------------------

@dataclass
class TrainResult:
    model: CrossModalModel
    vocab: object
    mean: np.ndarray
    std: np.ndarray
    history: list
    val_scores: list                  # (epoch, phase, accuracy, macro_f1)
    best_epoch: int
    best_val_macro_f1: float
    best_snapshot: dict
    final_val_macro_f1: float


def _phase_lrs(cfg: TrainConfig, phase: int, step_in_phase: int,
               total_steps: int) -> dict:
    if phase == 1:
        lr = cosine_schedule(step_in_phase, total_steps, cfg.lr_phase1,
                             cfg.lr_phase1_end)
        return {"backbone": 0.0, "head": lr}
    return {
        "backbone": cosine_schedule(step_in_phase, total_steps,
                                    cfg.lr_backbone, cfg.lr_phase2_end),
        "head": cosine_schedule(step_in_phase, total_steps, cfg.lr_head,
                                cfg.lr_phase2_end),
    }


def run_curriculum(cfg: TrainConfig, dataset: Optional[Dataset] = None,
                   log=None) -> TrainResult:
    if dataset is None:
        dataset = make_splits(seed=cfg.seed)
    train_set = dataset.splits["train"]
    val_set = dataset.splits["val"]
    vocab = build_vocabulary(train_set)
    rng_init = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    model = apply_ablation(cfg, len(vocab), rng_init)
    counts = np.bincount([s.class_index for s in train_set],
                         minlength=model.cfg.num_classes)
    class_weights = inverse_frequency_weights(counts)
    mean, std = dataset.channel_mean, dataset.channel_std
    if cfg.ablation == "E4":
        train_ids = train_valid = None
    else:
        train_ids, train_valid = encode_descriptions(vocab, train_set,
                                                     model.cfg.text_max_len)

    history: list = []
    val_scores: list = []
    best = (-1.0, -1, None)           # (macro_f1, epoch, snapshot)
    global_step = 0
    epoch_index = 0
    for phase, n_epochs in ((1, cfg.phase1_epochs), (2, cfg.phase2_epochs)):
        model.encoders.online.backbone_blocks_trainable(phase)
        opt = AdamW(model.named_parameters(), parameter_groups(model),
                    weight_decay=cfg.weight_decay)
        steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
        total_steps = steps_per_epoch * n_epochs
        step_in_phase = 0
        for epoch in range(n_epochs):
            erng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, phase, epoch)))
            order = erng.permutation(len(train_set))
            for lo in range(0, len(order), cfg.batch_size):
                pick = order[lo:lo + cfg.batch_size]
                batch = TrainBatch(
                    samples=[train_set[i] for i in pick],
                    ids=None if train_ids is None else train_ids[pick],
                    valid=None if train_valid is None else train_valid[pick],
                    aug_seeds=[np.random.SeedSequence(
                        (cfg.seed, phase, epoch, int(i))) for i in pick],
                    mask_rng=np.random.default_rng(
                        np.random.SeedSequence((cfg.seed, phase, epoch, lo, 1))))
                lrs = _phase_lrs(cfg, phase, step_in_phase, total_steps)
                record = train_step(model, opt, batch, class_weights, cfg,
                                    phase, global_step, lrs, mean, std)
                history.append(record)
                global_step += 1
                step_in_phase += 1
            acc, f1 = evaluate_split(model, val_set, vocab, mean, std, cfg)
            val_scores.append((epoch_index, phase, acc, f1))
            if log is not None:
                log(f"epoch {epoch_index} phase {phase} "
                    f"val acc {acc:.4f} macro-F1 {f1:.4f}")
            if f1 > best[0]:
                best = (f1, epoch_index, snapshot_parameters(model))
            epoch_index += 1
    final_f1 = val_scores[-1][3] if val_scores else 0.0
    best_f1, best_epoch, best_snap = best
    if best_snap is None:
        best_snap = snapshot_parameters(model)
        best_epoch, best_f1 = epoch_index - 1, final_f1
    return TrainResult(model=model, vocab=vocab, mean=mean, std=std,
                       history=history, val_scores=val_scores,
                       best_epoch=best_epoch, best_val_macro_f1=best_f1,
                       best_snapshot=best_snap,
                       final_val_macro_f1=final_f1)


def cdd_gradient_check(seed: int, n_samples: int = 4, h: float = 1e-5,
                       max_coords_per_param: Optional[int] = 2):
    """Finite-difference audit of the full objective on a tiny batch.

    Builds a fresh model with phase-2 trainability, freezes one mask plan,
    and probes a seeded subsample of coordinates in every trainable tensor.
    Everything runs in float64, so at h=1e-5 the central difference should
    agree with the tape to well under 1e-4 relative.
    """
    from .data import generate_sample, normalize
    from .gradcheck import finite_difference_check

    # two grades of one type, a third type, and an ungraded class: enough
    # variety that every loss term is active and non-degenerate
    classes = (0, 2, 4, 9)[:n_samples]
    samples = [generate_sample(c, np.random.SeedSequence((seed, 11, i)),
                               sample_id=f"gc{i:02d}")
               for i, c in enumerate(classes)]
    vocab = build_vocabulary(samples)
    cfg = TrainConfig(seed=seed, phase1_full_cdd=True)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 12)))
    model = apply_ablation(cfg, len(vocab), rng)
    model.encoders.online.backbone_blocks_trainable(2)

    raw = np.stack([s.image for s in samples])
    mean = raw.mean(axis=(0, 2, 3))
    std = raw.std(axis=(0, 2, 3)) + 1e-6
    images = np.stack([normalize(s.image, mean, std) for s in samples])
    labels = np.array([s.class_index for s in samples], dtype=np.intp)
    class_weights = np.ones(model.cfg.num_classes)
    ids, valid = encode_descriptions(vocab, samples, model.cfg.text_max_len)

    img = Tensor(images)
    scores = model.saliency_scores(img)
    plan = model.make_plan(None if scores is None else scores.data,
                           img.shape[0],
                           np.random.default_rng(np.random.SeedSequence((seed, 13))))

    def objective():
        loss, _ = cdd_objective(model, img, plan, ids, valid, labels,
                                class_weights, cfg, full_cdd=True)
        return loss

    params = {name: p for name, p in model.named_parameters().items()
              if p.requires_grad}
    return finite_difference_check(
        objective, params, h=h, max_coords_per_param=max_coords_per_param,
        rng=np.random.default_rng(np.random.SeedSequence((seed, 14))))


def history_csv(history) -> str:
    lines = ["step,phase,lr_backbone,lr_head,total,recon,severity,orthogonality,focal,grad_norm"]
    for r in history:
        ls = r.losses
        lines.append(
            f"{r.step},{r.phase},{r.lrs['backbone']:.10g},{r.lrs['head']:.10g},"
            f"{ls['total']:.10g},{ls.get('recon', 0.0):.10g},"
            f"{ls.get('severity', 0.0):.10g},"
            f"{ls.get('orthogonality', 0.0):.10g},{ls.get('focal', 0.0):.10g},"
            f"{r.grad_norm:.10g}")
    return "\n".join(lines) + "\n"
