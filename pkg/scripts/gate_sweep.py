"""How much of the frozen embedding's quality comes from the text stream
and the class-conditional gates at extraction time?

Takes a trained checkpoint, embeds the dataset once per (gate mode, text
mode) combination, and reruns the frozen-head classifier and severity
regressor on each store. Paired text is the oracle setting; null text is
what deployment sees. Gate modes at extraction: predicted (two-pass
self-gating) and mean (average over all class gates); label gating needs
ground truth and exists only inside the training loss path.

    python3 scripts/gate_sweep.py --checkpoint runs/pipeline/checkpoint.ckpt
"""

import argparse
import dataclasses
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ropejepa.checkpoint import load_checkpoint, restore_model
from ropejepa.data import load_dataset, make_splits
from ropejepa.downstream import (build_store, severity_regress,
                                 train_classifier_head)
from ropejepa.metrics import accuracy, macro_f1
from ropejepa.taxonomy import NUM_CLASSES


def evaluate(store, seed):
    train = store.select(split="train")
    val = store.select(split="val")
    test = store.select(split="test")
    head, _ = train_classifier_head(train, val, seed=seed)
    pred = head.predict(test.embeddings)
    _, sev = severity_regress(train, test, seed=seed)
    return (accuracy(pred, test.labels),
            macro_f1(pred, test.labels, NUM_CLASSES), sev["spearman"])


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", default=None,
                    help="exported dataset; regenerated from the "
                         "checkpoint seed when omitted")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model, vocab, cfg, mean, std = restore_model(
        load_checkpoint(args.checkpoint))
    if args.data:
        ds = load_dataset(args.data)
        ds = dataclasses.replace(ds, channel_mean=mean, channel_std=std)
    else:
        ds = make_splits(seed=cfg.seed)

    print(f"{'gates':<10} {'text':<8} {'acc':>7} {'macroF1':>8} {'sev rho':>8}")
    for gate_mode in ("predicted", "mean"):
        for text_mode in ("paired", "null"):
            store = build_store(model, vocab, ds, cfg, fingerprint="sweep",
                                gate_mode=gate_mode, text_mode=text_mode)
            acc, f1, rho = evaluate(store, args.seed)
            print(f"{gate_mode:<10} {text_mode:<8} {acc:7.4f} "
                  f"{f1:8.4f} {rho:8.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
