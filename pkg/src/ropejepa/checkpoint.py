"""Checkpoint container, config files, and run manifests.

The checkpoint is a single file: a magic line, an integrity hash, a JSON
header describing every array (name, dtype, shape, byte offset), then the
raw blobs. Everything needed to rebuild the model travels inside: config
snapshot, vocabulary, all parameters including the EMA copy, optimizer
moments, RNG state, and the metric history. No serialization framework,
so any language can read it back.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import CrossModalModel
from .text import Vocabulary
from .training import TrainConfig, apply_ablation
from .vision import VitConfig

MAGIC = "ROPEJEPA-CKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


# --- flat config representation --------------------------------------------

# every key a config file may contain; the nested loss weights are part of
# the objective definition and stay fixed
CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig)
                      if f.name != "loss")


def config_to_dict(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in CONFIG_FIELDS}


def config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - set(CONFIG_FIELDS)
    if unknown:
        raise CheckpointError(
            f"unknown config keys {sorted(unknown)}; "
            f"valid keys: {', '.join(CONFIG_FIELDS)}")
    return TrainConfig(**d)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    if ftype in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise CheckpointError(f"config key {key} expects a boolean, got {raw!r}")
    return raw


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' starts a comment; keys must be TrainConfig fields."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise CheckpointError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise CheckpointError(
                f"line {lineno}: unknown config key {key!r}; "
                f"valid keys: {', '.join(CONFIG_FIELDS)}")
        out[key] = _coerce(key, raw)
    return out


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in config_to_dict(cfg).items()]
    return "\n".join(lines) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.blake2b(canon.encode(), digest_size=6).hexdigest()


# --- the container ----------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict                      # flat TrainConfig snapshot
    vit: dict                         # vision geometry, checked on load
    vocab_lines: str
    params: dict                      # name -> ndarray, every module
    opt_state: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    metric_history: list = field(default_factory=list)
    loss_csv: str = ""
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None
    format_version: int = FORMAT_VERSION


def _array_section(arrays: dict, prefix: str, offset: int):
    entries, blobs = [], []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.tobytes()
        entries.append({"name": f"{prefix}{name}", "dtype": str(a.dtype),
                        "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    return entries, blobs, offset


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    stats = {}
    if ckpt.channel_mean is not None:
        stats["channel_mean"] = ckpt.channel_mean
        stats["channel_std"] = ckpt.channel_std
    entries, blobs, off = _array_section(ckpt.params, "param.", 0)
    e2, b2, off = _array_section(ckpt.opt_state, "opt.", off)
    e3, b3, off = _array_section(stats, "stat.", off)
    entries += e2 + e3
    blobs += b2 + b3
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "vit": ckpt.vit,
        "vocab": ckpt.vocab_lines,
        "rng_state": ckpt.rng_state,
        "metric_history": ckpt.metric_history,
        "loss_csv": ckpt.loss_csv,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = header_bytes + b"".join(blobs)
    digest = hashlib.blake2b(payload, digest_size=32).hexdigest()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {ckpt.format_version}\n".encode())
        fh.write(f"{digest}\n".encode())
        fh.write(f"{len(header_bytes)}\n".encode())
        fh.write(payload)


def stored_digest(path) -> str:
    """The integrity digest on a checkpoint's second line, without a full load."""
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace")
        if not first.startswith(MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        return fh.readline().decode().strip()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.decode().rsplit(" ", 1)
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: not a checkpoint file")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(version) != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} needs migration; "
            f"this build reads version {FORMAT_VERSION}")
    digest_line, rest = rest.split(b"\n", 1)
    length_line, payload = rest.split(b"\n", 1)
    if hashlib.blake2b(payload, digest_size=32).hexdigest() != digest_line.decode():
        raise CheckpointError(f"{path}: integrity hash mismatch, file corrupted")
    header_len = int(length_line)
    header = json.loads(payload[:header_len])
    blob = payload[header_len:]
    params, opt_state, stats = {}, {}, {}
    for e in header["arrays"]:
        a = np.frombuffer(blob[e["offset"]:e["offset"] + e["nbytes"]],
                          dtype=e["dtype"]).reshape(e["shape"]).copy()
        name = e["name"]
        if name.startswith("param."):
            params[name[len("param."):]] = a
        elif name.startswith("opt."):
            opt_state[name[len("opt."):]] = a
        else:
            stats[name[len("stat."):]] = a
    return Checkpoint(config=header["config"], vit=header["vit"],
                      vocab_lines=header["vocab"], params=params,
                      opt_state=opt_state, rng_state=header["rng_state"],
                      metric_history=header["metric_history"],
                      loss_csv=header["loss_csv"],
                      channel_mean=stats.get("channel_mean"),
                      channel_std=stats.get("channel_std"),
                      format_version=header["format_version"])


# --- model <-> checkpoint ---------------------------------------------------

def make_checkpoint(model: CrossModalModel, vocab: Vocabulary,
                    cfg: TrainConfig, mean: np.ndarray, std: np.ndarray,
                    metric_history=None, loss_csv: str = "",
                    opt_state: Optional[dict] = None,
                    rng: Optional[np.random.Generator] = None) -> Checkpoint:
    params = {n: p.data.copy() for n, p in model.named_parameters().items()}
    rng_state = {}
    if rng is not None:
        rng_state["master"] = rng.bit_generator.state
    return Checkpoint(config=config_to_dict(cfg),
                      vit=dataclasses.asdict(model.cfg.vit),
                      vocab_lines=vocab.to_lines(),
                      params=params,
                      opt_state=opt_state or {},
                      rng_state=rng_state,
                      metric_history=list(metric_history or []),
                      loss_csv=loss_csv,
                      channel_mean=np.asarray(mean, dtype=np.float64),
                      channel_std=np.asarray(std, dtype=np.float64))


def check_vit_compatible(ckpt: Checkpoint, vit: VitConfig) -> None:
    stored = ckpt.vit
    for key, want in dataclasses.asdict(vit).items():
        if stored.get(key) != want:
            raise CheckpointError(
                f"VitConfig mismatch on field {key!r}: "
                f"checkpoint has {stored.get(key)}, requested {want}")


def restore_model(ckpt: Checkpoint, expect_vit: Optional[VitConfig] = None):
    """-> (model, vocab, train_config, channel_mean, channel_std)."""
    if expect_vit is not None:
        check_vit_compatible(ckpt, expect_vit)
    cfg = config_from_dict(ckpt.config)
    vocab = Vocabulary.from_lines(ckpt.vocab_lines)
    model = apply_ablation(cfg, len(vocab), np.random.default_rng(0))
    named = model.named_parameters()
    missing = set(named) - set(ckpt.params)
    extra = set(ckpt.params) - set(named)
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match this build: "
            f"missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for name, p in named.items():
        stored = ckpt.params[name]
        if tuple(stored.shape) != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {stored.shape}, "
                f"model {p.shape}")
        p.data = stored.copy()
    return model, vocab, cfg, ckpt.channel_mean, ckpt.channel_std


# --- run manifests ----------------------------------------------------------

def code_fingerprint(root: Optional[Path] = None) -> str:
    """Content hash over the package sources, stable across checkouts."""
    root = Path(__file__).parent if root is None else Path(root)
    h = hashlib.blake2b(digest_size=8)
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    code_fingerprint: str
    outputs: list = field(default_factory=list)
    started: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, run_dir) -> Path:
        out = Path(run_dir) / "manifest.json"
        out.write_text(self.to_json() + "\n")
        return out


def new_manifest(command: str, cfg: TrainConfig) -> RunManifest:
    return RunManifest(command=command, config_hash=config_hash(cfg),
                       seed=cfg.seed, code_fingerprint=code_fingerprint(),
                       started=time.strftime("%Y-%m-%dT%H:%M:%S"))


def run_dir_name(cfg: TrainConfig, now: Optional[float] = None) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S",
                          time.localtime(time.time() if now is None else now))
    return f"{stamp}-{config_hash(cfg)}"
