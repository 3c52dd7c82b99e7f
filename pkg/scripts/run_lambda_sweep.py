#!/usr/bin/env python3
"""Sweep the number of selected patches and record AUC/ACC vs training time.

Desk-scale analogue of the lambda trade-off study: bigger lambda buys
accuracy up to a point while training time keeps growing.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from efficientmil.config import EncoderConfig, TrainConfig
from efficientmil.data import WitnessSpec, synth_witness
from efficientmil.training import fit


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--model", default="gru", choices=["gru", "lstm", "mamba"])
    parser.add_argument("--lambdas", default="4,8,16,32,50")
    parser.add_argument("--instances", type=int, default=50)
    parser.add_argument("--bags", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=25)
    parser.add_argument("--out", default="lambda_sweep.csv")
    args = parser.parse_args()

    data = synth_witness(WitnessSpec(n_bags=args.bags, instances_per_bag=args.instances,
                                     d=32, mu=2.5, seed=42))
    lines = ["big_lambda,val_auc,val_acc,train_seconds,epochs"]
    for lam in (int(x) for x in args.lambdas.split(",")):
        config = TrainConfig(big_lambda=lam, lr=1e-3, min_lr=5e-6,
                             epochs=args.epochs, patience=5)
        result = fit(data.bags, EncoderConfig(kind=args.model), config)
        seconds = sum(r.seconds for r in result.history)
        best = result.history[result.best_epoch]
        lines.append(f"{lam},{result.best_val_auc!r},{best.val_acc!r},"
                     f"{seconds:.2f},{len(result.history)}")
        print(f"lambda={lam:4d}  val AUC {result.best_val_auc:.4f}  "
              f"ACC {best.val_acc:.4f}  {seconds:6.1f}s")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"table -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
