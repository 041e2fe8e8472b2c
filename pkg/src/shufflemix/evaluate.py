"""Evaluation: accuracy, average precision, input perturbations, grids."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from shufflemix import nets
from shufflemix.datasets import Dataset, DatasetMeta
from shufflemix.errors import EvaluationError, ParameterError

PERTURBATION_KINDS = ("none", "white", "salt-pepper")

# Forward chunk size; keeps conv im2col buffers bounded during evaluation.
_CHUNK = 250


@dataclass(frozen=True)
class EvalPerturbation:
    """A named corruption applied to inputs at evaluation time."""

    kind: str = "none"
    level: float = 0.0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ParameterError(
                f"unknown perturbation {self.kind!r}; expected one of {PERTURBATION_KINDS}"
            )
        if self.kind == "none":
            if self.level != 0.0:
                raise ParameterError("perturbation 'none' takes level 0")
        elif not np.isfinite(self.level) or self.level < 0.0:
            raise ParameterError(f"perturbation level must be >= 0; got {self.level}")
        if self.kind == "salt-pepper" and self.level > 1.0:
            raise ParameterError(f"salt-pepper level is a probability; got {self.level}")


def apply_perturbation(inputs: np.ndarray, perturb: EvalPerturbation, rng=None,
                       input_range=None) -> np.ndarray:
    """Corrupted copy of inputs.

    white: add level * standard gaussian noise, then clamp to the
    per-channel input range when the dataset defines one.
    salt-pepper: each element independently becomes the channel's max or min
    (equal odds) with probability level; needs a defined input range.
    """
    x = np.array(inputs, dtype=np.float64)
    if perturb.kind == "none" or perturb.level == 0.0:
        return x
    if rng is None:
        raise ParameterError(f"perturbation {perturb.kind!r} needs an rng")
    if perturb.kind == "white":
        x = x + perturb.level * rng.standard_normal(x.shape)
        if input_range is not None:
            low, high = _range_tensors(input_range, x.shape[1])
            np.clip(x, low, high, out=x)
        return x
    # salt-pepper
    if input_range is None:
        raise ParameterError("salt-pepper needs a dataset with a defined input range")
    low, high = _range_tensors(input_range, x.shape[1])
    hit = rng.random(x.shape) < perturb.level
    salt = rng.random(x.shape) < 0.5
    x = np.where(hit & salt, np.broadcast_to(high, x.shape), x)
    x = np.where(hit & ~salt, np.broadcast_to(low, x.shape), x)
    return x


def _range_tensors(input_range, channels: int):
    low = np.asarray(input_range[0], dtype=np.float64).reshape(1, channels, 1, 1)
    high = np.asarray(input_range[1], dtype=np.float64).reshape(1, channels, 1, 1)
    return low, high


def forward_logits(net: nets.Network, inputs: np.ndarray) -> np.ndarray:
    """Clean forward over a whole array, chunked to bound memory."""
    pieces = [
        net.forward(inputs[i : i + _CHUNK]) for i in range(0, len(inputs), _CHUNK)
    ]
    return np.concatenate(pieces, axis=0)


def _perturbed_inputs(dataset: Dataset, perturb, rng):
    if perturb is None:
        perturb = EvalPerturbation()
    return apply_perturbation(dataset.inputs, perturb, rng=rng,
                              input_range=dataset.meta.input_range)


def evaluate_accuracy(net: nets.Network, dataset: Dataset, perturb=None, rng=None) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    labels = np.asarray(dataset.labels)
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    if labels.ndim != 1:
        raise ParameterError("accuracy needs integer single-label targets")
    x = _perturbed_inputs(dataset, perturb, rng)
    logits = forward_logits(net, x)
    pred = logits.argmax(axis=1)
    return float((pred == labels).mean())


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean of precision-at-rank over the positive items.

    Ranking is by descending score; equal scores rank by ascending sample
    index (stable sort), so the value is reproducible under ties.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives).astype(bool).ravel()
    if scores.shape != positives.shape:
        raise ParameterError(
            f"scores {scores.shape} and positives {positives.shape} must match"
        )
    if not positives.any():
        raise EvaluationError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum[hits] / ranks[hits]).mean())


def evaluate_map(net: nets.Network, dataset: Dataset, perturb=None, rng=None):
    """Per-class average precision and its mean.

    Classes with no positive example are skipped (with a warning) and carry
    nan in the returned vector. Returns (ap (K,), mAP).
    """
    labels = np.asarray(dataset.labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ParameterError("mAP needs multi-hot (N, K) targets")
    x = _perturbed_inputs(dataset, perturb, rng)
    logits = forward_logits(net, x)
    k = labels.shape[1]
    ap = np.full(k, np.nan)
    for cls in range(k):
        pos = labels[:, cls] > 0.5
        if not pos.any():
            warnings.warn(f"class {cls} has no positives; excluded from mAP")
            continue
        ap[cls] = average_precision(logits[:, cls], pos)
    valid = ~np.isnan(ap)
    if not valid.any():
        raise EvaluationError("no class has positive examples")
    return ap, float(ap[valid].mean())


def subsample_dataset(dataset: Dataset, keep_fraction: float, rng) -> Dataset:
    """Stratified random subset keeping round(keep_fraction * count) per class.

    Rounds half away from zero. A fraction small enough to empty a class is an
    error rather than a silent promotion to one sample. Defined for integer
    single-label datasets only.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ParameterError(f"keep_fraction must lie in (0, 1]; got {keep_fraction}")
    labels = np.asarray(dataset.labels)
    if labels.ndim != 1:
        raise ParameterError("subsampling is defined for single-label datasets")
    if keep_fraction == 1.0:
        return dataset
    chosen = []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        keep = min(int(np.floor(keep_fraction * pool.size + 0.5)), pool.size)
        if keep == 0:
            raise ParameterError(
                f"keep_fraction {keep_fraction} empties class {int(cls)} "
                f"({pool.size} samples)"
            )
        pick = rng.choice(pool.size, size=keep, replace=False)
        chosen.append(pool[pick])
    chosen = np.sort(np.concatenate(chosen))
    sub_labels = labels[chosen]
    counts = np.bincount(sub_labels, minlength=dataset.meta.num_classes).tolist()
    meta = DatasetMeta(
        name=dataset.meta.name,
        task=dataset.meta.task,
        num_classes=dataset.meta.num_classes,
        class_counts=counts,
        input_range=dataset.meta.input_range,
        extra=dict(dataset.meta.extra),
    )
    return Dataset(inputs=dataset.inputs[chosen], labels=sub_labels, meta=meta)


def decision_boundary_grid(net: nets.Network, x_range=(-1.5, 1.5), y_range=(-1.5, 1.5),
                           resolution: int = 200) -> np.ndarray:
    """Class probabilities over a regular 2-D grid.

    Returns (resolution**2, 2 + K) rows (x, y, p_0 .. p_{K-1}); y varies
    slowest, x fastest, and the grid endpoints hit the range bounds exactly.
    Only defined for networks taking (N, 2, 1, 1) inputs.
    """
    if net.hook_channels[0] != 2:
        raise ParameterError(
            f"boundary grids need a 2-feature input; net takes {net.hook_channels[0]}"
        )
    if resolution < 2:
        raise ParameterError(f"resolution must be >= 2; got {resolution}")
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logits = forward_logits(net, pts.reshape(-1, 2, 1, 1))
    probs = nets.softmax(logits)
    return np.concatenate([pts, probs], axis=1)
