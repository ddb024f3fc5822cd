"""Command-line front end.

Every invocation makes a fresh run directory under --out (named by
timestamp plus config hash), writes its artifacts there, and finishes
with a manifest listing them. Nothing is ever modified in place: datasets,
checkpoints and embedding stores are inputs only, and gen-data refuses to
write into an existing directory.

Seed resolution order: --seed flag, then the config file, then the
ROPEJEPA_SEED environment variable, then the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .data import DEFAULT_COUNTS, SPLIT_NAMES, load_dataset, make_splits, \
    export_dataset, noise_images, normalize
from .downstream import (build_store, deterioration_timeline, fewshot_episode,
                         fit_anomaly, generate_report, interpolate_centroids,
                         load_store, recommend, save_store,
                         severity_arithmetic, severity_regress,
                         train_classifier_head)
from .fusion import GATE_MODES
from .metrics import accuracy, auroc, macro_f1, weighted_f1
from .model import ABLATIONS, TEXT_MODES
from .taxonomy import NUM_CLASSES, SEVERITY_TYPES
from .tensor import Tensor
from .training import (TrainConfig, cdd_gradient_check, embed_samples,
                       history_csv, restore_parameters, run_curriculum)

SEED_ENV = "ROPEJEPA_SEED"


def _fail(message: str) -> "NoReturn":
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(2)


def _require(path, what: str, want_dir: bool = False) -> Path:
    p = Path(path)
    if not p.exists():
        _fail(f"{what} not found: {p}")
    if p.is_dir() != want_dir:
        shape = "a directory" if want_dir else "a file"
        _fail(f"{what} is not {shape}: {p}")
    return p


def _resolve_seed(args, file_values: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in file_values:
        return file_values["seed"]
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            _fail(f"{SEED_ENV} must be an integer, got {env!r}")
    return TrainConfig().seed


def _resolve_config(args) -> TrainConfig:
    """Defaults <- config file <- --set pairs <- dedicated flags."""
    values: dict = {}
    if getattr(args, "config", None):
        text = _require(args.config, "config file").read_text()
        try:
            values.update(ck.parse_config_text(text))
        except ck.CheckpointError as e:
            _fail(str(e))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            _fail(f"--set expects key=value, got {item!r}")
        try:
            values.update(ck.parse_config_text(item))
        except ck.CheckpointError as e:
            _fail(str(e))
    if getattr(args, "ablation", None):
        values["ablation"] = args.ablation
    values["seed"] = _resolve_seed(args, values)
    merged = {**ck.config_to_dict(TrainConfig()), **values}
    try:
        return ck.config_from_dict(merged)
    except Exception as e:                      # bad value combinations
        _fail(str(e))


def _fresh_run_dir(args, cfg: TrainConfig) -> Path:
    parent = Path(getattr(args, "out", None) or "runs")
    base = ck.run_dir_name(cfg)
    d = parent / base
    n = 1
    while d.exists():
        d = parent / f"{base}-{n}"
        n += 1
    d.mkdir(parents=True)
    return d


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header: list, rows: list) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _load_store(args):
    return load_store(_require(args.store, "embedding store"))


def _split_selection(store, name: str):
    sel = store.select(split=name)
    if len(sel) == 0:
        _fail(f"embedding store has no '{name}' records")
    return sel


def _parse_int_list(text: str, flag: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        _fail(f"{flag} expects comma-separated integers, got {text!r}")


# --- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("gen-data", cfg)
    dest = Path(args.dest) if args.dest else run_dir / "dataset"
    if dest.exists():
        _fail(f"refusing to overwrite existing path: {dest}")
    counts = None
    if args.scale != 1.0:
        if args.scale <= 0:
            _fail("--scale must be positive")
        counts = {name: tuple(max(1, round(c * args.scale)) for c in row)
                  for name, row in DEFAULT_COUNTS.items()}
    ds = make_splits(counts=counts, seed=cfg.seed)
    export_dataset(ds, dest)
    manifest.add_output(dest)
    for name in SPLIT_NAMES:
        manifest.add_output(dest / name / "manifest.jsonl")
    manifest.write(run_dir)
    for name in SPLIT_NAMES:
        print(f"{name}: {len(ds.splits[name])} samples")
    print(f"dataset written to {dest}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("train", cfg)
    if args.data:
        ds = load_dataset(_require(args.data, "dataset", want_dir=True))
    else:
        ds = make_splits(seed=cfg.seed)
    result = run_curriculum(cfg, ds, log=print)
    restore_parameters(result.model, result.best_snapshot)
    csv_text = history_csv(result.history)
    ckpt = ck.make_checkpoint(result.model, result.vocab, cfg,
                              result.mean, result.std,
                              metric_history=[list(t) for t in result.val_scores],
                              loss_csv=csv_text)
    ckpt_path = run_dir / "checkpoint.ckpt"
    ck.save_checkpoint(ckpt, ckpt_path)
    (run_dir / "loss.csv").write_text(csv_text)
    (run_dir / "config.txt").write_text(ck.format_config(cfg))
    metrics = {"best_epoch": result.best_epoch,
               "best_val_macro_f1": result.best_val_macro_f1,
               "final_val_macro_f1": result.final_val_macro_f1,
               "val_scores": [list(t) for t in result.val_scores]}
    _write_json(run_dir / "metrics.json", metrics)
    for name in ("checkpoint.ckpt", "loss.csv", "config.txt", "metrics.json"):
        manifest.add_output(run_dir / name)
    manifest.write(run_dir)
    print(f"best epoch {result.best_epoch} "
          f"val macro-F1 {result.best_val_macro_f1:.4f}")
    print(f"checkpoint written to {ckpt_path}")
    return 0


def cmd_embed(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    try:
        model, vocab, cfg, mean, std = ck.restore_model(
            ck.load_checkpoint(ckpt_path))
    except ck.CheckpointError as e:
        _fail(str(e))
    ds = load_dataset(_require(args.data, "dataset", want_dir=True))
    # normalization statistics travel with the checkpoint, not the dataset
    ds = dataclasses.replace(ds, channel_mean=mean, channel_std=std)
    splits = tuple(s for s in args.splits.split(",") if s)
    for s in splits:
        if s not in ds.splits:
            _fail(f"unknown split {s!r}; dataset has {sorted(ds.splits)}")
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("embed", cfg)
    store = build_store(model, vocab, ds, cfg,
                        fingerprint=ck.stored_digest(ckpt_path),
                        splits=splits, gate_mode=args.gate_mode,
                        text_mode=args.text_mode)
    path = run_dir / "embeddings.emb"
    save_store(store, path)
    manifest.add_output(path)
    manifest.write(run_dir)
    print(f"{len(store)} embeddings of dim {store.dim} written to {path}")
    return 0


def cmd_eval_classify(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("eval-classify", cfg)
    head, info = train_classifier_head(_split_selection(store, "train"),
                                       _split_selection(store, "val"),
                                       seed=cfg.seed)
    test = _split_selection(store, "test")
    pred = head.predict(test.embeddings)
    metrics = {"accuracy": accuracy(pred, test.labels),
               "macro_f1": macro_f1(pred, test.labels, NUM_CLASSES),
               "weighted_f1": weighted_f1(pred, test.labels, NUM_CLASSES),
               "head_best_epoch": info["best_epoch"],
               "head_val_macro_f1": info["best_val_macro_f1"]}
    _write_json(run_dir / "metrics.json", metrics)
    _write_csv(run_dir / "metrics.csv",
               ["accuracy", "macro_f1", "weighted_f1"],
               [[f"{metrics[k]:.6f}" for k in
                 ("accuracy", "macro_f1", "weighted_f1")]])
    manifest.add_output(run_dir / "metrics.json")
    manifest.add_output(run_dir / "metrics.csv")
    manifest.write(run_dir)
    print(f"test accuracy {metrics['accuracy']:.4f} "
          f"macro-F1 {metrics['macro_f1']:.4f} "
          f"weighted-F1 {metrics['weighted_f1']:.4f}")
    return 0


def cmd_eval_severity(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("eval-severity", cfg)
    _, metrics = severity_regress(_split_selection(store, "train"),
                                  _split_selection(store, "test"),
                                  seed=cfg.seed)
    _write_json(run_dir / "metrics.json", metrics)
    keys = ["mae", "rmse", "r2", "spearman", "within_1"]
    _write_csv(run_dir / "metrics.csv", keys,
               [[f"{metrics[k]:.6f}" for k in keys]])
    manifest.add_output(run_dir / "metrics.json")
    manifest.add_output(run_dir / "metrics.csv")
    manifest.write(run_dir)
    print(f"severity MAE {metrics['mae']:.4f} "
          f"spearman {metrics['spearman']:.4f} "
          f"within-1 {metrics['within_1']:.4f}")
    return 0


def cmd_eval_fewshot(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    ks = _parse_int_list(args.k, "--k")
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("eval-fewshot", cfg)
    rows, results = [], []
    for k in ks:
        res = fewshot_episode(store, k, n_episodes=args.episodes,
                              seed=cfg.seed, cap_support=True)
        results.append({key: res[key] for key in
                        ("k", "episodes", "macro_f1_mean", "ci95_half_width")})
        rows.append([k, args.episodes, f"{res['macro_f1_mean']:.6f}",
                     f"{res['ci95_half_width']:.6f}"])
        print(f"k={k:>3} macro-F1 {res['macro_f1_mean']:.4f} "
              f"+- {res['ci95_half_width']:.4f} (95% CI)")
    _write_csv(run_dir / "metrics.csv",
               ["k", "episodes", "macro_f1_mean", "ci95_half_width"], rows)
    _write_json(run_dir / "metrics.json", results)
    manifest.add_output(run_dir / "metrics.csv")
    manifest.add_output(run_dir / "metrics.json")
    manifest.write(run_dir)
    return 0


def cmd_eval_geometry(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("eval-geometry", cfg)
    reg, _ = severity_regress(_split_selection(store, "train"),
                              _split_selection(store, "test"),
                              seed=cfg.seed)
    arithmetic = severity_arithmetic(store, top=args.top)
    payload = {"interpolation": {}, "severity_arithmetic": arithmetic}
    rows = []
    for typ in SEVERITY_TYPES:
        rep = interpolate_centroids(store, typ, reg, steps=args.steps)
        payload["interpolation"][typ] = {
            "monotone_fraction": rep.monotone_fraction,
            "midpoint_medium_distance": rep.midpoint_medium_distance,
            "scores": [float(s) for s in rep.scores],
            "neighbour_ids": rep.neighbour_ids,
        }
        rows.append([typ, f"{rep.monotone_fraction:.6f}",
                     f"{rep.midpoint_medium_distance:.6f}",
                     f"{arithmetic[typ]['rate']:.6f}"])
        print(f"{typ}: monotone {rep.monotone_fraction:.2f} "
              f"midpoint-to-Medium {rep.midpoint_medium_distance:.4f} "
              f"arithmetic top-{args.top} {arithmetic[typ]['rate']:.2f}")
    payload["timeline"] = [
        {"id": sid, "score": score}
        for sid, score in deterioration_timeline(store, args.timeline_type,
                                                 args.timeline_length, reg)]
    _write_csv(run_dir / "geometry.csv",
               ["damage_type", "monotone_fraction",
                "midpoint_medium_distance", "arithmetic_rate"], rows)
    _write_json(run_dir / "geometry.json", payload)
    manifest.add_output(run_dir / "geometry.csv")
    manifest.add_output(run_dir / "geometry.json")
    manifest.write(run_dir)
    return 0


def cmd_eval_recommend(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("eval-recommend", cfg)
    _, metrics = recommend(_split_selection(store, "train"),
                           _split_selection(store, "test"), seed=cfg.seed)
    _write_json(run_dir / "metrics.json", metrics)
    keys = ["accuracy", "macro_f1", "urgency_mae"]
    _write_csv(run_dir / "metrics.csv", keys,
               [[f"{metrics[k]:.6f}" for k in keys]])
    manifest.add_output(run_dir / "metrics.json")
    manifest.add_output(run_dir / "metrics.csv")
    manifest.write(run_dir)
    print(f"action accuracy {metrics['accuracy']:.4f} "
          f"urgency MAE {metrics['urgency_mae']:.4f}")
    return 0


def cmd_eval_anomaly(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("eval-anomaly", cfg)
    model = fit_anomaly(store, quantile=args.quantile)
    train = _split_selection(store, "train")
    test = _split_selection(store, "test")
    metrics = {"threshold": model.threshold,
               "train_flag_rate": float(model.flag(train.embeddings).mean()),
               "test_flag_rate": float(model.flag(test.embeddings).mean()),
               "noise_auroc": None, "noise_flag_rate": None}
    if args.checkpoint:
        ckpt_path = _require(args.checkpoint, "checkpoint")
        try:
            net, _, net_cfg, mean, std = ck.restore_model(
                ck.load_checkpoint(ckpt_path))
        except ck.CheckpointError as e:
            _fail(str(e))
        noise = noise_images(args.noise,
                             np.random.SeedSequence((cfg.seed, 301)))
        emb = net.embed(normalize(noise, mean, std), None, None,
                        gate_mode=net_cfg.gate_mode, text_mode="null")
        s_ood = model.score(emb)
        s_in = model.score(test.embeddings)
        scores = np.concatenate([s_in, s_ood])
        is_pos = np.concatenate([np.zeros(len(s_in), dtype=bool),
                                 np.ones(len(s_ood), dtype=bool)])
        metrics["noise_auroc"] = auroc(scores, is_pos)
        metrics["noise_flag_rate"] = float(model.flag(emb).mean())
    _write_json(run_dir / "metrics.json", metrics)
    keys = ["threshold", "train_flag_rate", "test_flag_rate"]
    _write_csv(run_dir / "metrics.csv", keys,
               [[f"{metrics[k]:.6f}" for k in keys]])
    manifest.add_output(run_dir / "metrics.json")
    manifest.add_output(run_dir / "metrics.csv")
    manifest.write(run_dir)
    line = (f"train flag rate {metrics['train_flag_rate']:.4f} "
            f"test flag rate {metrics['test_flag_rate']:.4f}")
    if metrics["noise_auroc"] is not None:
        line += f" noise AUROC {metrics['noise_auroc']:.4f}"
    print(line)
    return 0


def cmd_report(args) -> int:
    cfg = _resolve_config(args)
    store = _load_store(args)
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("report", cfg)
    head, _ = train_classifier_head(_split_selection(store, "train"),
                                    _split_selection(store, "val"),
                                    seed=cfg.seed)
    reg, _ = severity_regress(_split_selection(store, "train"),
                              _split_selection(store, "test"), seed=cfg.seed)
    anomaly = fit_anomaly(store)
    sel = _split_selection(store, args.split)
    dest = run_dir / "reports"
    dest.mkdir()
    index = []
    for i in range(len(sel)):
        rep = generate_report(sel.embeddings[i], sel.ids[i], head, reg,
                              anomaly, store, top=args.top)
        (dest / f"{rep.sample_id}.json").write_text(rep.to_json() + "\n")
        (dest / f"{rep.sample_id}.txt").write_text(rep.render())
        index.append([rep.sample_id, rep.class_name,
                      rep.severity_grade or "", rep.action,
                      "yes" if rep.anomaly_flag else "no"])
    _write_csv(run_dir / "index.csv",
               ["id", "predicted_class", "severity", "action", "anomaly"],
               index)
    manifest.add_output(dest)
    manifest.add_output(run_dir / "index.csv")
    manifest.write(run_dir)
    print(f"{len(sel)} reports written to {dest}")
    return 0


def _model_test_metrics(model, samples, vocab, mean, std, cfg):
    pooled = embed_samples(model, samples, vocab, mean, std, cfg)
    pred = np.argmax(model.logits(Tensor(pooled)).data, axis=1)
    labels = np.array([s.class_index for s in samples])
    return (accuracy(pred, labels), macro_f1(pred, labels, NUM_CLASSES),
            weighted_f1(pred, labels, NUM_CLASSES))


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    seeds = _parse_int_list(args.seeds, "--seeds")
    arms = tuple(a for a in args.arms.split(",") if a)
    for arm in arms:
        if arm not in ABLATIONS:
            _fail(f"unknown ablation arm {arm!r}; valid: {', '.join(ABLATIONS)}")
    run_dir = _fresh_run_dir(args, base)
    manifest = ck.new_manifest("ablate", base)
    if args.data:
        ds = load_dataset(_require(args.data, "dataset", want_dir=True))
    else:
        ds = make_splits(seed=base.seed)
    rows, table = [], {}
    for arm in arms:
        metrics = []
        for seed in seeds:
            cfg = dataclasses.replace(base, ablation=arm, seed=seed)
            result = run_curriculum(cfg, ds)
            restore_parameters(result.model, result.best_snapshot)
            triple = _model_test_metrics(result.model, ds.splits["test"],
                                         result.vocab, result.mean,
                                         result.std, cfg)
            metrics.append(triple)
            print(f"{arm} seed {seed}: acc {triple[0]:.4f} "
                  f"macro-F1 {triple[1]:.4f} weighted-F1 {triple[2]:.4f}")
        arr = np.array(metrics)
        mean_, std_ = arr.mean(axis=0), arr.std(axis=0, ddof=1)
        table[arm] = {"accuracy": [mean_[0], std_[0]],
                      "macro_f1": [mean_[1], std_[1]],
                      "weighted_f1": [mean_[2], std_[2]]}
        rows.append([arm] + [f"{v:.6f}" for pair in
                    (table[arm]["accuracy"], table[arm]["macro_f1"],
                     table[arm]["weighted_f1"]) for v in pair])
    header = ["arm", "accuracy_mean", "accuracy_std", "macro_f1_mean",
              "macro_f1_std", "weighted_f1_mean", "weighted_f1_std"]
    _write_csv(run_dir / "ablation.csv", header, rows)
    _write_json(run_dir / "ablation.json",
                {"seeds": seeds, "arms": list(arms), "table": table})
    manifest.add_output(run_dir / "ablation.csv")
    manifest.add_output(run_dir / "ablation.json")
    manifest.write(run_dir)
    for arm in arms:
        t = table[arm]
        print(f"{arm}: acc {t['accuracy'][0]:.4f}+-{t['accuracy'][1]:.4f} "
              f"macro-F1 {t['macro_f1'][0]:.4f}+-{t['macro_f1'][1]:.4f} "
              f"weighted-F1 {t['weighted_f1'][0]:.4f}+-{t['weighted_f1'][1]:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    seeds = _parse_int_list(args.seeds, "--seeds")
    run_dir = _fresh_run_dir(args, cfg)
    manifest = ck.new_manifest("gradcheck", cfg)
    results, ok = [], True
    for seed in seeds:
        rep = cdd_gradient_check(seed, n_samples=args.samples, h=args.h,
                                 max_coords_per_param=args.coords)
        passed = rep.passed(args.tol)
        ok = ok and passed
        results.append({"seed": seed, "max_rel_err": rep.max_rel_err,
                        "worst_param": rep.worst_param,
                        "n_coords": rep.n_coords, "passed": passed})
        print(f"seed {seed}: {rep.summary()} -> "
              f"{'pass' if passed else 'FAIL'} at tol {args.tol:g}")
    _write_json(run_dir / "gradcheck.json",
                {"h": args.h, "tol": args.tol, "results": results})
    manifest.add_output(run_dir / "gradcheck.json")
    manifest.write(run_dir)
    return 0 if ok else 1


# --- argument wiring --------------------------------------------------------

def _add_common(p, config: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help=f"seed (falls back to config, then ${SEED_ENV})")
    p.add_argument("--out", default=None,
                   help="parent directory for the run directory (default runs/)")
    if config:
        p.add_argument("--config", default=None,
                       help="key = value config file (TrainConfig fields)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ropejepa",
        description="Rope condition monitoring: data, training, evaluation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export the dataset")
    _add_common(p)
    p.add_argument("--dest", default=None,
                   help="dataset directory (default <run dir>/dataset)")
    p.add_argument("--scale", type=float, default=1.0,
                   help="shrink every per-class count by this factor")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-phase curriculum")
    _add_common(p)
    p.add_argument("--data", default=None, help="exported dataset directory")
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="write an embedding store")
    _add_common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="exported dataset directory")
    p.add_argument("--splits", default="train,val,test")
    p.add_argument("--gate-mode", choices=GATE_MODES, default=None)
    p.add_argument("--text-mode", choices=TEXT_MODES, default=None)
    p.set_defaults(fn=cmd_embed)

    for name, fn in (("eval-classify", cmd_eval_classify),
                     ("eval-severity", cmd_eval_severity),
                     ("eval-recommend", cmd_eval_recommend)):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} metrics on a store")
        _add_common(p, config=False)
        p.add_argument("--store", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval-fewshot", help="episodic prototype evaluation")
    _add_common(p, config=False)
    p.add_argument("--store", required=True)
    p.add_argument("--k", default="1,5,10,20")
    p.add_argument("--episodes", type=int, default=100)
    p.set_defaults(fn=cmd_eval_fewshot)

    p = sub.add_parser("eval-geometry", help="embedding-space structure checks")
    _add_common(p, config=False)
    p.add_argument("--store", required=True)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--timeline-type", default="Chafing")
    p.add_argument("--timeline-length", type=int, default=10)
    p.set_defaults(fn=cmd_eval_geometry)

    p = sub.add_parser("eval-anomaly", help="Mahalanobis screening metrics")
    _add_common(p, config=False)
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="embed noise frames for an OOD AUROC")
    p.add_argument("--noise", type=int, default=120)
    p.add_argument("--quantile", type=float, default=0.95)
    p.set_defaults(fn=cmd_eval_anomaly)

    p = sub.add_parser("report", help="inspection reports for a split")
    _add_common(p, config=False)
    p.add_argument("--store", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--top", type=int, default=3)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("ablate", help="train all arms over seeds, emit a table")
    _add_common(p)
    p.add_argument("--data", default=None, help="exported dataset directory")
    p.add_argument("--seeds", default="42,123,999")
    p.add_argument("--arms", default=",".join(ABLATIONS))
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of gradients")
    _add_common(p, config=False)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--coords", type=int, default=2,
                   help="coordinates probed per parameter tensor")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
