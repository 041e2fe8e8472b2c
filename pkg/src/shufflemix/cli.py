"""Command line entry point: one invocation = one training experiment.

The CLI builds datasets and a network from the flags, trains with the chosen
method, evaluates under the requested perturbations, and writes artifacts to
--out-dir:

    record.json    canonical run record (byte-stable across reruns)
    metrics.csv    method,seed,metric,perturbation,level,value rows
    boundary.csv   class probabilities on a 2-D grid (2-D datasets only)
    checkpoint.npz / checkpoint.json   trained parameters + architecture
    timing.txt     wall-clock seconds (deliberately outside record.json)
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from dataclasses import dataclass

from shufflemix import datasets, evaluate, nets, sampling, train
from shufflemix.errors import ParameterError, ShuffleMixError

DATASETS = ("circles", "rings3", "multilabel", "cifar10")

MLP_HIDDEN = (64, 64, 64)
# Four conv stage widths for the image runs. Sized so the full desk-scale
# suite (three methods, three seeds, 30 epochs on 5000 images) stays inside
# its half-hour budget on one core; wider stages add accuracy headroom the
# directional comparisons do not need.
CNN_WIDTHS = (8, 16, 16, 32)
BOUNDARY_RESOLUTION = 200
BOUNDARY_RANGE = (-1.5, 1.5)

# Synthetic dataset sizes (train, test) when the CLI builds the data itself.
# The rings sizes and noise are calibrated so the plain-SGD baseline tests in
# the high-0.8s: hard enough that augmentation has something to improve.
SYNTH_SIZES = {"circles": (400, 400), "rings3": (300, 600), "multilabel": (2000, 1000)}
SYNTH_NOISE = {"circles": 0.08, "rings3": 0.12}


@dataclass(frozen=True)
class ExperimentManifest:
    """Fully resolved description of one experiment."""

    config: train.TrainConfig
    dataset: str
    data_path: str | None
    subset_per_class: int
    keep_fraction: float
    eval_noise: tuple
    out_dir: str


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shufflemix",
        description="Train a small network with hidden-state mixing and record the results.",
    )
    p.add_argument("--method", choices=train.METHODS, default="erm")
    p.add_argument("--alpha", type=float, default=1.0,
                   help="Beta(alpha, alpha) parameter for interpolation draws")
    p.add_argument("--ratio", type=float, default=0.5,
                   help="fraction of channels each shuffle mask targets")
    p.add_argument("--layers", default="all",
                   help="comma-separated hook indices eligible for mixing, or 'all'")
    p.add_argument("--nfm-add", type=float, default=0.2)
    p.add_argument("--nfm-mult", type=float, default=0.4)
    p.add_argument("--threshold-m", type=float, default=None,
                   help="binarization threshold for mixed multi-label targets")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay-epochs", default="100,150,180",
                   help="comma-separated 1-based epochs at which lr decays ('' for none)")
    p.add_argument("--lr-decay-factor", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--data-path", default=None,
                   help="directory of CIFAR-10 binary batches (cifar10 only)")
    p.add_argument("--subset-per-class", type=int, default=500,
                   help="training images drawn per class (cifar10 only)")
    p.add_argument("--keep-fraction", type=float, default=1.0,
                   help="stratified fraction of the training set to keep")
    p.add_argument("--eval-noise", action="append", default=[],
                   metavar="KIND:LEVEL",
                   help="extra evaluation under a perturbation, e.g. white:0.1 "
                        "or salt-pepper:0.1; repeatable")
    p.add_argument("--flip", action="store_true",
                   help="random horizontal flips during training (image ablation; "
                        "off by default so runs isolate the mixing methods)")
    p.add_argument("--out-dir", required=True)
    return p


def _parse_layers(text: str):
    if text.strip().lower() == "all":
        return None
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ParameterError(f"--layers must be 'all' or comma-separated ints; got {text!r}")


def _parse_decay_epochs(text: str):
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ParameterError(f"--lr-decay-epochs must be comma-separated ints; got {text!r}")


def _parse_eval_noise(items):
    out = []
    for item in items:
        kind, sep, level = item.partition(":")
        if not sep:
            raise ParameterError(f"--eval-noise wants KIND:LEVEL; got {item!r}")
        try:
            out.append(evaluate.EvalPerturbation(kind.strip(), float(level)))
        except ValueError:
            raise ParameterError(f"--eval-noise level must be a float; got {item!r}")
    return tuple(out)


def manifest_from_args(args) -> ExperimentManifest:
    task = "multilabel" if args.dataset == "multilabel" else "classification"
    config = train.TrainConfig(
        method=args.method,
        alpha=args.alpha,
        ratio=args.ratio,
        eligible=_parse_layers(args.layers),
        nfm_add=args.nfm_add,
        nfm_mult=args.nfm_mult,
        threshold_m=args.threshold_m,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_decay_epochs=_parse_decay_epochs(args.lr_decay_epochs),
        lr_decay_factor=args.lr_decay_factor,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
        task=task,
        flip=args.flip,
    )
    if args.dataset == "cifar10" and not args.data_path:
        raise ParameterError("--dataset cifar10 needs --data-path")
    return ExperimentManifest(
        config=config,
        dataset=args.dataset,
        data_path=args.data_path,
        subset_per_class=args.subset_per_class,
        keep_fraction=args.keep_fraction,
        eval_noise=_parse_eval_noise(args.eval_noise),
        out_dir=args.out_dir,
    )


def _build_datasets(manifest: ExperimentManifest, rng):
    name = manifest.dataset
    if name == "circles":
        n_train, n_test = SYNTH_SIZES[name]
        return (datasets.make_circles(n_train, SYNTH_NOISE[name], rng),
                datasets.make_circles(n_test, SYNTH_NOISE[name], rng))
    if name == "rings3":
        n_train, n_test = SYNTH_SIZES[name]
        return (datasets.make_three_rings(n_train, SYNTH_NOISE[name], rng),
                datasets.make_three_rings(n_test, SYNTH_NOISE[name], rng))
    if name == "multilabel":
        n_train, n_test = SYNTH_SIZES[name]
        return (datasets.make_multilabel_synthetic(n_train, rng=rng),
                datasets.make_multilabel_synthetic(n_test, rng=rng))
    # cifar10: train subset from data batches, test from test_batch.bin using
    # the training subset's normalization constants.
    train_set = datasets.load_cifar10_subset(
        manifest.data_path, manifest.subset_per_class, rng
    )
    test_file = os.path.join(manifest.data_path, "test_batch.bin")
    test_per_class = min(200, 2 * manifest.subset_per_class)
    stats = (train_set.meta.extra["pixel_mean"], train_set.meta.extra["pixel_std"])
    test_set = datasets.load_cifar10_subset(test_file, test_per_class, rng, stats=stats)
    return train_set, test_set


def _build_net(manifest: ExperimentManifest, train_set, rng) -> nets.Network:
    if manifest.dataset == "cifar10":
        return nets.build_small_cnn(3, CNN_WIDTHS, 10, rng)
    num_classes = {"circles": 2, "rings3": 3, "multilabel": 5}[manifest.dataset]
    in_features = train_set.inputs.shape[1]
    return nets.build_mlp(in_features, MLP_HIDDEN, num_classes, rng)


def _atomic_write(path: str, data):
    tmp = path + ".tmp"
    if isinstance(data, bytes):
        with open(tmp, "wb") as fh:
            fh.write(data)
    else:
        with open(tmp, "w") as fh:
            fh.write(data)
    os.replace(tmp, path)


def _metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "seed", "metric", "perturbation", "level", "value"])
    for row in rows:
        writer.writerow([row[0], row[1], row[2], row[3], repr(float(row[4])),
                         repr(float(row[5]))])
    return buf.getvalue()


def _boundary_csv(grid, num_classes: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y"] + [f"p_{k}" for k in range(num_classes)])
    for row in grid:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def run_experiment(manifest: ExperimentManifest) -> dict:
    """Execute one experiment; returns paths and the evaluation rows."""
    t0 = time.perf_counter()
    streams = sampling.make_streams(manifest.config.seed)

    train_set, test_set = _build_datasets(manifest, streams["datagen"])
    if manifest.keep_fraction < 1.0:
        train_set = evaluate.subsample_dataset(
            train_set, manifest.keep_fraction, streams["datagen"]
        )
    net = _build_net(manifest, train_set, streams["init"])

    net, record = train.train(net, manifest.config, train_set, test_set)
    train_seconds = time.perf_counter() - t0

    metric_name = record.metric_name
    eval_rng = streams["eval"]

    def _measure(perturb):
        if manifest.config.task == "classification":
            return evaluate.evaluate_accuracy(net, test_set, perturb, eval_rng)
        return evaluate.evaluate_map(net, test_set, perturb, eval_rng)[1]

    rows = [(manifest.config.method, manifest.config.seed, metric_name, "none", 0.0,
             _measure(None))]
    for perturb in manifest.eval_noise:
        rows.append((manifest.config.method, manifest.config.seed, metric_name,
                     perturb.kind, perturb.level, _measure(perturb)))

    record.context = {
        "dataset": manifest.dataset,
        "n_train": len(train_set),
        "n_test": len(test_set),
        "keep_fraction": manifest.keep_fraction,
        "subset_per_class": manifest.subset_per_class if manifest.dataset == "cifar10" else None,
        "evaluations": [
            {"metric": m, "perturbation": k, "level": lv, "value": v}
            for (_, _, m, k, lv, v) in rows
        ],
    }

    os.makedirs(manifest.out_dir, exist_ok=True)
    paths = {
        "record": os.path.join(manifest.out_dir, "record.json"),
        "metrics": os.path.join(manifest.out_dir, "metrics.csv"),
        "checkpoint": os.path.join(manifest.out_dir, "checkpoint.npz"),
        "timing": os.path.join(manifest.out_dir, "timing.txt"),
    }
    _atomic_write(paths["record"], record.to_json())
    _atomic_write(paths["metrics"], _metrics_csv(rows))
    nets.save_checkpoint(net, paths["checkpoint"])

    if manifest.dataset in ("circles", "rings3"):
        grid = evaluate.decision_boundary_grid(
            net, BOUNDARY_RANGE, BOUNDARY_RANGE, BOUNDARY_RESOLUTION
        )
        paths["boundary"] = os.path.join(manifest.out_dir, "boundary.csv")
        _atomic_write(paths["boundary"], _boundary_csv(grid, net.num_classes))

    total_seconds = time.perf_counter() - t0
    _atomic_write(paths["timing"],
                  f"train_seconds {train_seconds:.3f}\ntotal_seconds {total_seconds:.3f}\n")

    for _, _, metric, kind, level, value in rows:
        label = metric if kind == "none" else f"{metric}[{kind}:{level:g}]"
        print(f"{manifest.config.method} seed={manifest.config.seed} {label} = {value:.4f}")
    print(f"artifacts in {manifest.out_dir} ({total_seconds:.1f}s)")
    return {"paths": paths, "rows": rows, "record": record}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        manifest = manifest_from_args(args)
        run_experiment(manifest)
    except (ShuffleMixError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
