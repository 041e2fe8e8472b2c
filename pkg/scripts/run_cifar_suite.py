"""Desk-scale CIFAR-10 robustness suite.

Trains a small CNN per method and seed on a class-balanced subset, evaluates
each model clean and under salt-and-pepper corruption, and summarizes the
accuracy drops.  Point --data-path at a directory of CIFAR-10 binary batches
(data_batch_*.bin plus test_batch.bin); without it the script renders a
deterministic synthetic stand-in corpus with the same file format, which keeps
the pipeline runnable on machines that have no dataset handy.
"""

import argparse
import json
import os
import sys
import time

from shufflemix import cli, datasets

METHODS = ("erm", "soft-shufflemix", "shufflemix-nfm")
CORPUS_SEED = 20260815


def run_one(method: str, seed: int, data_path: str, args) -> dict:
    out_dir = os.path.join(args.out_dir, method, f"s{seed}")
    argv = [
        "--dataset", "cifar10",
        "--data-path", data_path,
        "--method", method,
        "--seed", str(seed),
        "--epochs", str(args.epochs),
        "--lr-decay-epochs", args.lr_decay_epochs,
        "--subset-per-class", str(args.subset_per_class),
        "--eval-noise", f"salt-pepper:{args.noise_level}",
        "--out-dir", out_dir,
    ]
    rc = cli.main(argv)
    if rc != 0:
        raise SystemExit(f"run failed: {method} seed={seed}")
    with open(os.path.join(out_dir, "record.json")) as fh:
        return json.load(fh)


def clean_and_noisy(record: dict, noise_level: float):
    clean = noisy = None
    for row in record["context"]["evaluations"]:
        if row["perturbation"] == "none":
            clean = row["value"]
        elif row["perturbation"] == "salt-pepper" and row["level"] == noise_level:
            noisy = row["value"]
    return clean, noisy


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--data-path", default=None,
                   help="CIFAR-10 binary batches; omit to use a synthetic corpus")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr-decay-epochs", default="20,26")
    p.add_argument("--subset-per-class", type=int, default=500)
    p.add_argument("--noise-level", type=float, default=0.1)
    args = p.parse_args(argv)

    data_path = args.data_path
    if data_path is None:
        data_path = os.path.join(args.out_dir, "synthetic_corpus")
        if not os.path.exists(os.path.join(data_path, "data_batch_1.bin")):
            print(f"rendering synthetic corpus in {data_path}", flush=True)
            datasets.write_synthetic_cifar_corpus(
                data_path, n_train_per_class=600, n_test_per_class=200,
                seed=CORPUS_SEED)

    t0 = time.time()
    results = {m: [] for m in METHODS}
    for method in METHODS:
        for seed in range(args.seeds):
            record = run_one(method, seed, data_path, args)
            clean, noisy = clean_and_noisy(record, args.noise_level)
            results[method].append((clean, noisy))
            print(f"{method:16s} seed={seed}  clean={clean:.4f}  "
                  f"salt-pepper={noisy:.4f}  drop={clean - noisy:+.4f}", flush=True)

    print(f"\n{args.seeds} seeds, {args.epochs} epochs, "
          f"{args.subset_per_class}/class ({time.time() - t0:.0f}s)")
    for method in METHODS:
        rows = results[method]
        mean_clean = sum(c for c, _ in rows) / len(rows)
        mean_drop = sum(c - n for c, n in rows) / len(rows)
        print(f"  {method:16s} mean clean {mean_clean:.4f}   mean drop {mean_drop:.4f}")

    wins = sum(1 for (ec, en), (fc, fn) in zip(results["erm"], results["shufflemix-nfm"])
               if (fc - fn) < (ec - en))
    print(f"noise-injected mixing beats erm on corruption drop in "
          f"{wins}/{args.seeds} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
