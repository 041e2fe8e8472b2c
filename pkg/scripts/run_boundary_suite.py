"""Decision-boundary comparison on the concentric-rings task.

Trains every mixing method over a handful of seeds, collects final test
accuracies, and leaves one boundary.csv per run for plotting.  The summary
table at the end is the quickest way to eyeball whether channel-wise mixing
is buying anything over plain training or whole-tensor interpolation.
"""

import argparse
import json
import os
import sys
import time

from shufflemix import cli

METHODS = ("erm", "input-mixup", "manifold-mixup", "soft-shufflemix", "hard-shufflemix")


def run_one(method: str, seed: int, args) -> dict:
    out_dir = os.path.join(args.out_dir, method, f"s{seed}")
    argv = [
        "--dataset", args.dataset,
        "--method", method,
        "--seed", str(seed),
        "--epochs", str(args.epochs),
        "--lr-decay-epochs", args.lr_decay_epochs,
        "--out-dir", out_dir,
    ]
    rc = cli.main(argv)
    if rc != 0:
        raise SystemExit(f"run failed: {method} seed={seed}")
    with open(os.path.join(out_dir, "record.json")) as fh:
        return json.load(fh)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dataset", choices=("rings3", "circles"), default="rings3")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr-decay-epochs", default="100,150,180")
    args = p.parse_args(argv)

    t0 = time.time()
    means = {}
    for method in METHODS:
        accs = []
        for seed in range(args.seeds):
            record = run_one(method, seed, args)
            accs.append(record["final_metrics"]["test_accuracy"])
            print(f"{method:18s} seed={seed}  acc={accs[-1]:.4f}", flush=True)
        means[method] = sum(accs) / len(accs)

    print(f"\n{args.dataset}, {args.seeds} seeds, {args.epochs} epochs "
          f"({time.time() - t0:.0f}s)")
    for method in METHODS:
        delta = means[method] - means["erm"]
        print(f"  {method:18s} mean acc {means[method]:.4f}  ({delta:+.4f} vs erm)")
    print(f"boundary grids in {args.out_dir}/<method>/s<seed>/boundary.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
