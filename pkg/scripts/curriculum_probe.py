"""Does the two-phase curriculum earn its keep at short budgets?

Trains three short variants on the same data and seed and prints their
validation trajectories side by side:

  staged     the default: recon+focal with a frozen backbone, then the
             full objective with the last block unfrozen
  full-cdd   every loss term active from step one (phase1_full_cdd)
  no-warmup  skips phase 1 entirely, spending the whole budget in phase 2

Budgets are deliberately tiny; the point is the shape of the curves,
not final accuracy.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ropejepa.data import make_splits
from ropejepa.training import TrainConfig, evaluate_split, \
    restore_parameters, run_curriculum


def run(cfg, ds):
    scores = []
    result = run_curriculum(cfg, ds, log=None)
    for epoch, phase, acc, f1 in result.val_scores:
        scores.append(f1)
    restore_parameters(result.model, result.best_snapshot)
    acc, f1 = evaluate_split(result.model, ds.splits["test"], result.vocab,
                             result.mean, result.std, cfg)
    return scores, acc, f1


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=6,
                    help="total epoch budget per variant")
    args = ap.parse_args()

    ds = make_splits(seed=0)
    half = max(1, args.epochs // 2)
    variants = {
        "staged": TrainConfig(seed=args.seed, phase1_epochs=half,
                              phase2_epochs=args.epochs - half),
        "full-cdd": TrainConfig(seed=args.seed, phase1_epochs=half,
                                phase2_epochs=args.epochs - half,
                                phase1_full_cdd=True),
        "no-warmup": TrainConfig(seed=args.seed, phase1_epochs=1,
                                 phase2_epochs=max(1, args.epochs - 1)),
    }

    rows = {}
    for name, cfg in variants.items():
        scores, acc, f1 = run(cfg, ds)
        rows[name] = (scores, acc, f1)
        print(f"{name}: done")

    width = max(len(s) for s, _, _ in rows.values())
    header = "epoch      " + " ".join(f"{e:>7}" for e in range(width))
    print("\nval macro-F1 by epoch")
    print(header)
    for name, (scores, _, _) in rows.items():
        cells = " ".join(f"{s:7.4f}" for s in scores)
        print(f"{name:<10} {cells}")
    print("\ntest (best-val checkpoint)")
    for name, (_, acc, f1) in rows.items():
        print(f"{name:<10} acc {acc:.4f}  macro-F1 {f1:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
