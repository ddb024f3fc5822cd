"""Frozen-embedding task heads and analyses.

Everything here consumes an EmbeddingStore produced by one fixed
checkpoint; no code path reaches back into the backbone. Heads are small
enough to train in seconds on the desk-scale store.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .losses import focal_loss, inverse_frequency_weights
from .metrics import (accuracy, macro_f1, mae, normal_ci, r_squared, rmse,
                      spearman_rho, within_one_ordinal)
from .nn import Dropout, Linear, Module
from .taxonomy import (ACTION_COLORS, ACTION_NAMES, ACTION_URGENCY, CLASSES,
                       NUM_CLASSES, SEVERITY_ORDINALS, SEVERITY_TYPES, Action,
                       action_for_class, class_by_index)
from .tensor import ContractError, Tape, Tensor
from .training import AdamW

STORE_MAGIC = "ROPEJEPA-EMB"
STORE_VERSION = 1

ORDINAL_NAMES = {v: k for k, v in SEVERITY_ORDINALS.items()}


# --- the store --------------------------------------------------------------

@dataclass
class EmbeddingStore:
    fingerprint: str                  # identifies the producing checkpoint
    ids: list
    split_tags: list
    embeddings: np.ndarray            # (N, D) float64
    labels: np.ndarray                # (N,) int
    severity: np.ndarray              # (N,) float, generator ground truth

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.split_tags) == n == self.embeddings.shape[0]
                == self.labels.shape[0] == self.severity.shape[0]):
            raise ContractError("store record arrays disagree on length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def select(self, split: Optional[str] = None,
               classes: Optional[set] = None) -> "EmbeddingStore":
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= np.array([t == split for t in self.split_tags])
        if classes is not None:
            keep &= np.isin(self.labels, sorted(classes))
        idx = np.flatnonzero(keep)
        return EmbeddingStore(
            fingerprint=self.fingerprint,
            ids=[self.ids[i] for i in idx],
            split_tags=[self.split_tags[i] for i in idx],
            embeddings=self.embeddings[idx],
            labels=self.labels[idx],
            severity=self.severity[idx])

    def centroid(self, class_index: int) -> np.ndarray:
        mask = self.labels == class_index
        if not mask.any():
            raise ContractError(f"no records for class {class_index}")
        return self.embeddings[mask].mean(axis=0)


def save_store(store: EmbeddingStore, path) -> None:
    lines = [f"{STORE_MAGIC} {STORE_VERSION}",
             f"fingerprint {store.fingerprint}",
             f"dim {store.dim}",
             f"count {len(store)}"]
    for i in range(len(store)):
        blob = np.ascontiguousarray(store.embeddings[i],
                                    dtype=np.float64).tobytes().hex()
        lines.append(f"{store.ids[i]}\t{store.split_tags[i]}\t"
                     f"{int(store.labels[i])}\t{float(store.severity[i])!r}\t{blob}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_store(path) -> EmbeddingStore:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(STORE_MAGIC):
        raise ContractError(f"{path}: not an embedding store")
    version = int(lines[0].split()[1])
    if version != STORE_VERSION:
        raise ContractError(f"{path}: store version {version} unsupported")
    fingerprint = lines[1].split(" ", 1)[1]
    dim = int(lines[2].split()[1])
    count = int(lines[3].split()[1])
    records = lines[4:4 + count]
    if len(records) != count:
        raise ContractError(f"{path}: header claims {count} records, "
                            f"found {len(records)}")
    ids, tags, labels, sev, embs = [], [], [], [], []
    for row in records:
        sid, tag, label, scalar, blob = row.split("\t")
        ids.append(sid)
        tags.append(tag)
        labels.append(int(label))
        sev.append(float(scalar))
        e = np.frombuffer(bytes.fromhex(blob), dtype=np.float64)
        if e.shape[0] != dim:
            raise ContractError(f"{path}: record {sid} has dim {e.shape[0]}, "
                                f"header says {dim}")
        embs.append(e)
    return EmbeddingStore(fingerprint=fingerprint, ids=ids, split_tags=tags,
                          embeddings=np.stack(embs),
                          labels=np.array(labels, dtype=np.intp),
                          severity=np.array(sev))


def build_store(model, vocab, dataset, cfg, fingerprint: str,
                splits=("train", "val", "test"), batch_size: int = 64,
                gate_mode: Optional[str] = None,
                text_mode: Optional[str] = None) -> EmbeddingStore:
    from .training import embed_samples
    ids, tags, labels, sev, blocks = [], [], [], [], []
    for split in splits:
        samples = dataset.splits[split]
        blocks.append(embed_samples(model, samples, vocab,
                                    dataset.channel_mean, dataset.channel_std,
                                    cfg, batch_size=batch_size,
                                    gate_mode=gate_mode, text_mode=text_mode))
        for s in samples:
            ids.append(s.sample_id)
            tags.append(split)
            labels.append(s.class_index)
            sev.append(s.severity_scalar)
    return EmbeddingStore(fingerprint=fingerprint, ids=ids, split_tags=tags,
                          embeddings=np.concatenate(blocks, axis=0),
                          labels=np.array(labels, dtype=np.intp),
                          severity=np.array(sev))


# --- shared numeric helpers -------------------------------------------------

def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit(a) @ _unit(b).T


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


GRADED_CLASSES = {c.index for c in CLASSES if c.severity is not None}


def ordinal_of_class(index: int) -> int:
    ordinal = class_by_index(index).severity_ordinal
    if ordinal is None:
        raise ContractError(f"class {index} carries no severity grade")
    return ordinal


# --- classifier head --------------------------------------------------------

class ClassifierHead(Module):
    """Two-layer MLP on frozen embeddings; dropout only while training."""

    def __init__(self, dim: int, rng: np.random.Generator,
                 hidden: int = 512, num_classes: int = NUM_CLASSES,
                 dropout: float = 0.1):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self.drop = Dropout(dropout)

    def logits(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = T.gelu(self.fc1(x))
        h = self.drop(h, training=rng is not None, rng=rng)
        return self.fc2(h)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(Tensor(x)).data, axis=1)

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(Tensor(x)).data)


def _head_epochs(model: Module, X: np.ndarray, y: np.ndarray,
                 loss_fn, rng: np.random.Generator, epochs: int,
                 batch_size: int, lr: float, on_epoch) -> None:
    named = model.named_parameters()
    opt = AdamW(named, {n: "head" for n in named}, weight_decay=0.0)
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(order), batch_size):
            pick = order[lo:lo + batch_size]
            with Tape() as tape:
                loss = loss_fn(model, Tensor(X[pick]), y[pick], rng)
                tape.backward(loss)
            opt.step({"head": lr})
            for p in model.parameters():
                p.grad = None
        if on_epoch(epoch):
            return


def train_classifier_head(train_store: EmbeddingStore,
                          val_store: EmbeddingStore,
                          seed: int = 0, epochs: int = 200,
                          patience: int = 20, lr: float = 1e-3,
                          batch_size: int = 64):
    """-> (head, info). Early stop on validation macro-F1."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 201)))
    head = ClassifierHead(train_store.dim, rng)
    counts = np.bincount(train_store.labels, minlength=NUM_CLASSES)
    weights = inverse_frequency_weights(counts)
    best = {"f1": -1.0, "epoch": -1, "params": None, "stale": 0}

    def loss_fn(m, x, y, r):
        return focal_loss(m.logits(x, rng=r), y, weights)

    def on_epoch(epoch):
        pred = head.predict(val_store.embeddings)
        f1 = macro_f1(pred, val_store.labels, NUM_CLASSES)
        if f1 > best["f1"]:
            best.update(f1=f1, epoch=epoch, stale=0,
                        params={n: p.data.copy()
                                for n, p in head.named_parameters().items()})
        else:
            best["stale"] += 1
        return best["stale"] > patience

    _head_epochs(head, train_store.embeddings, train_store.labels, loss_fn,
                 rng, epochs, batch_size, lr, on_epoch)
    if best["params"] is not None:
        for n, p in head.named_parameters().items():
            p.data = best["params"][n].copy()
    info = {"best_epoch": best["epoch"], "best_val_macro_f1": best["f1"]}
    return head, info


# --- severity regressor -----------------------------------------------------

class SeverityRegressor(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 256):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def score(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(np.atleast_2d(x))).data[:, 0]


def severity_regress(train_store: EmbeddingStore, test_store: EmbeddingStore,
                     seed: int = 0, epochs: int = 300, lr: float = 1e-3,
                     batch_size: int = 64):
    """Train on severity-bearing classes; -> (regressor, metrics dict)."""
    tr = train_store.select(classes=GRADED_CLASSES)
    te = test_store.select(classes=GRADED_CLASSES)
    if len(tr) == 0 or len(te) == 0:
        raise ContractError("severity regression needs graded samples")
    y_tr = np.array([ordinal_of_class(c) for c in tr.labels], dtype=np.float64)
    y_te = np.array([ordinal_of_class(c) for c in te.labels], dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 202)))
    reg = SeverityRegressor(tr.dim, rng)

    def loss_fn(m, x, y, r):
        diff = T.sub(m.forward(x), Tensor(y[:, None]))
        return T.tmean(T.mul(diff, diff))

    _head_epochs(reg, tr.embeddings, y_tr, loss_fn, rng, epochs, batch_size,
                 lr, lambda epoch: False)
    pred = reg.score(te.embeddings)
    metrics = regression_metrics(pred, y_te)
    return reg, metrics


def regression_metrics(pred: np.ndarray, target: np.ndarray) -> dict:
    rho = spearman_rho(pred, target)
    degenerate = np.ptp(pred) == 0.0 or np.ptp(target) == 0.0
    return {"mae": mae(pred, target), "rmse": rmse(pred, target),
            "r2": r_squared(pred, target), "spearman": rho,
            "spearman_degenerate": bool(degenerate),
            "within_1": within_one_ordinal(pred, target)}


# --- few-shot prototypes ----------------------------------------------------

def prototype_classify(prototypes: np.ndarray, proto_classes: np.ndarray,
                       queries: np.ndarray) -> np.ndarray:
    sims = cosine_matrix(queries, prototypes)
    return proto_classes[np.argmax(sims, axis=1)]


def fewshot_episode(store: EmbeddingStore, k: int, n_episodes: int = 100,
                    seed: int = 0, cap_support: bool = False) -> dict:
    """Support from train, queries = whole test split; macro-F1 mean +- CI.

    With cap_support a class whose pool is smaller than k contributes its
    whole pool instead of erroring; its prototype is then the class
    centroid in every episode. Needed for the rarest class, which has
    fewer train samples than the largest requested shot count.
    """
    train = store.select(split="train")
    test = store.select(split="test")
    present = sorted(set(train.labels.tolist()))
    for c in present:
        have = int((train.labels == c).sum())
        if have < k and not cap_support:
            raise ContractError(
                f"class {c} has {have} train samples, fewer than k={k}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 203, k)))
    scores = []
    for _ in range(n_episodes):
        protos = []
        for c in present:
            pool = np.flatnonzero(train.labels == c)
            pick = rng.choice(pool, size=min(k, pool.size), replace=False)
            protos.append(train.embeddings[pick].mean(axis=0))
        pred = prototype_classify(np.stack(protos), np.array(present),
                                  test.embeddings)
        scores.append(macro_f1(pred, test.labels, NUM_CLASSES))
    mean, half = normal_ci(np.array(scores))
    return {"k": k, "episodes": n_episodes, "macro_f1_mean": mean,
            "ci95_half_width": half, "scores": scores}


def nearest_centroid_classify(store: EmbeddingStore,
                              queries: np.ndarray) -> np.ndarray:
    train = store.select(split="train")
    present = sorted(set(train.labels.tolist()))
    centroids = np.stack([train.centroid(c) for c in present])
    return prototype_classify(centroids, np.array(present), queries)


# --- embedding geometry -----------------------------------------------------

@dataclass
class InterpolationReport:
    damage_type: str
    steps: int
    path: np.ndarray                  # (steps, D)
    neighbour_ids: list
    scores: np.ndarray                # severity-regressor scores per step
    monotone_fraction: float
    midpoint_medium_distance: float


def _grade_centroid(train: EmbeddingStore, damage_type: str,
                    grade: str) -> np.ndarray:
    match = [c.index for c in CLASSES
             if c.damage_type == damage_type and c.severity == grade]
    if not match:
        raise ContractError(f"{damage_type}/{grade} is not a graded class")
    cls = match[0]
    if not (train.labels == cls).any():
        raise ContractError(f"store has no train samples for {damage_type}/{grade}")
    return train.centroid(cls)


def interpolate_centroids(store: EmbeddingStore, damage_type: str,
                          regressor: SeverityRegressor,
                          steps: int = 7) -> InterpolationReport:
    if damage_type not in SEVERITY_TYPES:
        raise ContractError(f"{damage_type} carries no severity axis")
    if steps < 2:
        raise ContractError("interpolation needs at least 2 steps")
    train = store.select(split="train")
    low = _grade_centroid(train, damage_type, "Low")
    high = _grade_centroid(train, damage_type, "High")
    medium = _grade_centroid(train, damage_type, "Medium")
    ts = np.linspace(0.0, 1.0, steps)
    path = (1.0 - ts[:, None]) * low[None, :] + ts[:, None] * high[None, :]
    sims = cosine_matrix(path, train.embeddings)
    neighbour_ids = [train.ids[j] for j in np.argmax(sims, axis=1)]
    scores = regressor.score(path)
    steps_up = sum(1 for a, b in zip(scores, scores[1:]) if b >= a)
    midpoint = 0.5 * (low + high)
    dist = 1.0 - float(cosine_matrix(midpoint[None, :], medium[None, :])[0, 0])
    return InterpolationReport(damage_type=damage_type, steps=steps,
                               path=path, neighbour_ids=neighbour_ids,
                               scores=scores,
                               monotone_fraction=steps_up / (steps - 1),
                               midpoint_medium_distance=dist)


def severity_offset(store: EmbeddingStore) -> np.ndarray:
    """High-minus-Low direction measured on Chafing train centroids."""
    train = store.select(split="train")
    return (_grade_centroid(train, "Chafing", "High")
            - _grade_centroid(train, "Chafing", "Low"))


def severity_arithmetic(store: EmbeddingStore, top: int = 3) -> dict:
    """Transfer the Chafing severity offset onto other types' Low queries."""
    train = store.select(split="train")
    v_sev = severity_offset(store)
    out = {}
    for typ in SEVERITY_TYPES:
        low_cls = [c.index for c in CLASSES
                   if c.damage_type == typ and c.severity == "Low"][0]
        high_cls = [c.index for c in CLASSES
                    if c.damage_type == typ and c.severity == "High"][0]
        queries = np.flatnonzero(train.labels == low_cls)
        hits = 0
        for qi in queries:
            moved = train.embeddings[qi] + v_sev
            sims = cosine_matrix(moved[None, :], train.embeddings)[0]
            sims[qi] = -np.inf          # the query never retrieves itself
            ranked = np.argsort(-sims)[:top]
            if (train.labels[ranked] == high_cls).any():
                hits += 1
        out[typ] = {"queries": len(queries), "hits": hits,
                    "rate": hits / len(queries) if len(queries) else 0.0}
    return out


def deterioration_timeline(store: EmbeddingStore, damage_type: str,
                           length: int,
                           regressor: SeverityRegressor) -> list:
    """Ordered (id, score) walk from the Low toward the High centroid."""
    if length < 1:
        raise ContractError("timeline length must be >= 1")
    train = store.select(split="train")
    low = _grade_centroid(train, damage_type, "Low")
    high = _grade_centroid(train, damage_type, "High")
    pool_classes = {c.index for c in CLASSES
                    if c.damage_type == damage_type and c.severity is not None}
    pool = train.select(classes=pool_classes)
    if length > len(pool):
        raise ContractError(
            f"timeline of {length} exceeds the {len(pool)} available samples")
    ts = np.zeros(1) if length == 1 else np.linspace(0.0, 1.0, length)
    visited = np.zeros(len(pool), dtype=bool)
    walk = []
    for t in ts:
        probe = (1.0 - t) * low + t * high
        sims = cosine_matrix(probe[None, :], pool.embeddings)[0]
        sims[visited] = -np.inf
        j = int(np.argmax(sims))
        visited[j] = True
        walk.append((pool.ids[j], float(regressor.score(pool.embeddings[j])[0])))
    return walk


# --- maintenance recommendation ---------------------------------------------

class ActionHead(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc = Linear(dim, len(Action), rng)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.fc(Tensor(x)).data, axis=1)


def action_labels(labels: np.ndarray) -> np.ndarray:
    return np.array([int(action_for_class(int(c))) for c in labels],
                    dtype=np.intp)


def urgency_mae(pred_actions: np.ndarray, true_actions: np.ndarray) -> float:
    u = np.array([ACTION_URGENCY[Action(int(a))] for a in pred_actions])
    v = np.array([ACTION_URGENCY[Action(int(a))] for a in true_actions])
    return float(np.mean(np.abs(u - v)))


def recommend(train_store: EmbeddingStore, test_store: EmbeddingStore,
              seed: int = 0, epochs: int = 200, lr: float = 1e-3,
              batch_size: int = 64):
    """Linear head vs rule-derived action labels; -> (head, metrics)."""
    y_tr = action_labels(train_store.labels)
    y_te = action_labels(test_store.labels)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 204)))
    head = ActionHead(train_store.dim, rng)
    weights = inverse_frequency_weights(np.bincount(y_tr, minlength=len(Action)))

    def loss_fn(m, x, y, r):
        # gamma 0 reduces focal to weighted cross-entropy
        return focal_loss(m.fc(x), y, weights, gamma=0)

    _head_epochs(head, train_store.embeddings, y_tr, loss_fn, rng, epochs,
                 batch_size, lr, lambda e: False)
    pred = head.predict(test_store.embeddings)
    metrics = {"accuracy": accuracy(pred, y_te),
               "macro_f1": macro_f1(pred, y_te, len(Action)),
               "urgency_mae": urgency_mae(pred, y_te)}
    return head, metrics


# --- anomaly screening ------------------------------------------------------

@dataclass
class AnomalyModel:
    means: np.ndarray                 # (C_present, D)
    mean_classes: np.ndarray
    precision: np.ndarray             # inverse of the shrunk shared covariance
    threshold: float

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        d2 = np.empty((x.shape[0], self.means.shape[0]))
        for j, mu in enumerate(self.means):
            diff = x - mu[None, :]
            d2[:, j] = np.einsum("nd,dk,nk->n", diff, self.precision, diff)
        return np.sqrt(np.maximum(d2.min(axis=1), 0.0))

    def flag(self, x: np.ndarray) -> np.ndarray:
        return self.score(x) > self.threshold


def fit_anomaly(store: EmbeddingStore, quantile: float = 0.95) -> AnomalyModel:
    train = store.select(split="train")
    if len(train) == 0:
        raise ContractError("anomaly fit needs train records")
    present = np.array(sorted(set(train.labels.tolist())))
    means = np.stack([train.centroid(int(c)) for c in present])
    centered = train.embeddings - means[np.searchsorted(present, train.labels)]
    cov = np.cov(centered, rowvar=False, ddof=1)
    eps = 1e-3 * np.trace(cov) / cov.shape[0]
    cov = cov + eps * np.eye(cov.shape[0])
    precision = np.linalg.inv(cov)
    model = AnomalyModel(means=means, mean_classes=present,
                         precision=precision, threshold=0.0)
    model.threshold = float(np.quantile(model.score(train.embeddings), quantile))
    return model


# --- inspection reports -----------------------------------------------------

REPORT_SECTIONS = ("Identification", "Damage Assessment", "Severity",
                   "Recommended Action", "Anomaly Screening", "Similar Cases")


@dataclass
class InspectionReport:
    sample_id: str
    predicted_class: int
    class_name: str
    confidence: float
    severity_score: Optional[float]
    severity_grade: Optional[str]
    action: str
    urgency: float
    color: str
    anomaly_flag: bool
    anomaly_score: float
    similar: list                     # (train id, cosine similarity)
    summary: str

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["similar"] = [[i, round(s, 6)] for i, s in self.similar]
        return json.dumps(d, indent=2, sort_keys=True)

    def render(self) -> str:
        lines = ["== Identification ==",
                 f"sample: {self.sample_id}",
                 "",
                 "== Damage Assessment ==",
                 f"class: {self.class_name} "
                 f"(confidence {self.confidence:.3f})"]
        if self.severity_score is not None:
            lines += ["",
                      "== Severity ==",
                      f"score: {self.severity_score:.3f} "
                      f"(grade {self.severity_grade})"]
        lines += ["",
                  "== Recommended Action ==",
                  f"action: {self.action} [{self.color}] "
                  f"urgency {self.urgency:.2f}",
                  "",
                  "== Anomaly Screening ==",
                  f"score: {self.anomaly_score:.3f} "
                  f"flag: {'YES' if self.anomaly_flag else 'no'}",
                  "",
                  "== Similar Cases =="]
        for sid, sim in self.similar:
            lines.append(f"{sid} (cos {sim:.3f})")
        lines += ["", self.summary]
        return "\n".join(lines) + "\n"


def _summary_text(report: "InspectionReport") -> str:
    cls = class_by_index(report.predicted_class)
    bits = [f"Detected {cls.name}"]
    if report.severity_grade is not None:
        bits.append(f"at {report.severity_grade.lower()} severity")
    bits.append(f"; recommended action is {report.action}")
    if report.anomaly_flag:
        bits.append("; embedding flagged as atypical, manual review advised")
    return "".join(bits) + "."


def generate_report(embedding: np.ndarray, sample_id: str,
                    head: ClassifierHead, regressor: SeverityRegressor,
                    anomaly: AnomalyModel, store: EmbeddingStore,
                    top: int = 3) -> InspectionReport:
    probs = head.probabilities(embedding[None, :])[0]
    pred = int(np.argmax(probs))
    cls = class_by_index(pred)
    if cls.severity is not None:
        score = float(regressor.score(embedding)[0])
        grade = ORDINAL_NAMES[int(np.clip(np.rint(score), 0, 2))]
    else:
        score = grade = None
    action = cls.action
    train = store.select(split="train")
    sims = cosine_matrix(embedding[None, :], train.embeddings)[0]
    ranked = np.argsort(-sims)[:top]
    report = InspectionReport(
        sample_id=sample_id,
        predicted_class=pred,
        class_name=cls.name,
        confidence=float(probs[pred]),
        severity_score=score,
        severity_grade=grade,
        action=ACTION_NAMES[action],
        urgency=ACTION_URGENCY[action],
        color=ACTION_COLORS[action],
        anomaly_flag=bool(anomaly.flag(embedding[None, :])[0]),
        anomaly_score=float(anomaly.score(embedding[None, :])[0]),
        similar=[(train.ids[j], float(sims[j])) for j in ranked],
        summary="")
    report.summary = _summary_text(report)
    return report
