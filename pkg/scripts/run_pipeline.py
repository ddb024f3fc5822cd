"""Drive the whole pipeline in one process: data, curriculum, embeddings,
every frozen-backbone evaluation, and a handful of rendered reports.

The default configuration reproduces the headline run (about 15 minutes
on one core). --fast shrinks the dataset and epoch counts to a smoke
profile that finishes in under a minute and is only good for checking
that the plumbing holds together.

    python3 scripts/run_pipeline.py --out runs/pipeline
    python3 scripts/run_pipeline.py --fast
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from ropejepa.checkpoint import make_checkpoint, save_checkpoint
from ropejepa.data import DEFAULT_COUNTS, make_splits, noise_images, normalize
from ropejepa.downstream import (build_store, fewshot_episode, fit_anomaly,
                                 generate_report, interpolate_centroids,
                                 save_store, severity_arithmetic,
                                 severity_regress, train_classifier_head)
from ropejepa.metrics import accuracy, auroc, macro_f1
from ropejepa.taxonomy import NUM_CLASSES, SEVERITY_TYPES
from ropejepa.training import (TrainConfig, evaluate_split, history_csv,
                               restore_parameters, run_curriculum)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--fast", action="store_true",
                    help="tiny data and epochs, smoke profile")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.fast:
        counts = {name: tuple(max(1, round(c * 0.08)) for c in row)
                  for name, row in DEFAULT_COUNTS.items()}
        cfg = TrainConfig(seed=args.seed, phase1_epochs=2, phase2_epochs=2,
                          batch_size=16)
        ds = make_splits(counts=counts, seed=args.seed)
    else:
        cfg = TrainConfig(seed=args.seed)
        ds = make_splits(seed=args.seed)
    print(f"dataset: {', '.join(f'{k} {len(v)}' for k, v in ds.splits.items())}")

    t0 = time.time()
    result = run_curriculum(cfg, ds, log=print)
    restore_parameters(result.model, result.best_snapshot)
    acc, f1 = evaluate_split(result.model, ds.splits["test"], result.vocab,
                             result.mean, result.std, cfg)
    print(f"curriculum {time.time() - t0:.0f}s; "
          f"test acc {acc:.4f} macro-F1 {f1:.4f}")

    save_checkpoint(make_checkpoint(result.model, result.vocab, cfg,
                                    result.mean, result.std,
                                    loss_csv=history_csv(result.history)),
                    out / "checkpoint.ckpt")

    store = build_store(result.model, result.vocab, ds, cfg,
                        fingerprint="pipeline")
    save_store(store, out / "embeddings.emb")
    train_sel = store.select(split="train")
    val_sel = store.select(split="val")
    test_sel = store.select(split="test")

    head, _ = train_classifier_head(train_sel, val_sel, seed=args.seed)
    pred = head.predict(test_sel.embeddings)
    print(f"frozen-head classify: acc {accuracy(pred, test_sel.labels):.4f} "
          f"macro-F1 {macro_f1(pred, test_sel.labels, NUM_CLASSES):.4f}")

    reg, sev = severity_regress(train_sel, test_sel, seed=args.seed)
    print(f"severity: spearman {sev['spearman']:.4f} "
          f"within-1 {sev['within_1']:.4f} mae {sev['mae']:.4f}")

    for k in (1, 5, 10, 20):
        few = fewshot_episode(store, k, n_episodes=100, seed=args.seed,
                              cap_support=True)
        print(f"few-shot k={k:>2}: macro-F1 {few['macro_f1_mean']:.4f} "
              f"+- {few['ci95_half_width']:.4f}")

    for typ in SEVERITY_TYPES:
        rep = interpolate_centroids(store, typ, reg)
        print(f"interpolation {typ}: monotone {rep.monotone_fraction:.2f} "
              f"midpoint-to-Medium {rep.midpoint_medium_distance:.4f}")
    arith = severity_arithmetic(store)
    rate = (sum(v["hits"] for v in arith.values())
            / sum(v["queries"] for v in arith.values()))
    print(f"severity arithmetic top-3: {rate:.3f}")

    null_store = build_store(result.model, result.vocab, ds, cfg,
                             fingerprint="pipeline", text_mode="null")
    anomaly = fit_anomaly(null_store)
    frames = normalize(noise_images(120, np.random.SeedSequence(
        (args.seed, 301))), result.mean, result.std)
    ood = result.model.embed(frames, None, None, gate_mode=cfg.gate_mode,
                             text_mode="null")
    s_in = anomaly.score(null_store.select(split="test").embeddings)
    s_ood = anomaly.score(ood)
    area = auroc(np.concatenate([s_in, s_ood]),
                 np.concatenate([np.zeros(len(s_in), dtype=bool),
                                 np.ones(len(s_ood), dtype=bool)]))
    print(f"anomaly: train flag rate "
          f"{float(anomaly.flag(train_sel.embeddings).mean()):.4f} "
          f"noise AUROC {area:.4f}")

    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    for i in range(min(5, len(test_sel))):
        rep = generate_report(test_sel.embeddings[i], test_sel.ids[i],
                              head, reg, anomaly, store)
        (reports / f"{rep.sample_id}.txt").write_text(rep.render())
    print(f"sample reports in {reports}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
