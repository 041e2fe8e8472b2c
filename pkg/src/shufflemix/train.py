"""SGD training loop with per-sample hidden-state augmentation.

One TrainConfig fully determines a run: the seed fans out into the named
streams from shufflemix.sampling, every batch draws fresh per-sample plans,
and the update is plain SGD with momentum and weight decay. Two train()
calls on identically built networks produce bit-identical parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from shufflemix import augment, evaluate, nets, sampling
from shufflemix.datasets import Dataset
from shufflemix.errors import EvaluationError, ParameterError

METHODS = (
    "erm",
    "dropout",
    "input-mixup",
    "manifold-mixup",
    "hard-shufflemix",
    "soft-shufflemix",
    "nfm",
    "shufflemix-nfm",
)

# method -> (per-sample plan method, noise injection on/off)
_METHOD_TABLE = {
    "erm": ("none", False),
    "dropout": ("none", False),
    "input-mixup": ("input-mixup", False),
    "manifold-mixup": ("manifold-mixup", False),
    "hard-shufflemix": ("hard-shufflemix", False),
    "soft-shufflemix": ("soft-shufflemix", False),
    "nfm": ("manifold-mixup", True),
    "shufflemix-nfm": ("soft-shufflemix", True),
}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    alpha: float = 1.0
    ratio: float = 0.5
    eligible: tuple | None = None  # None: use the network's hook set
    nfm_add: float = 0.2
    nfm_mult: float = 0.4
    threshold_m: float | None = None
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    lr_decay_epochs: tuple = (100, 150, 180)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    task: str = "classification"
    dropout_rate: float = 0.2  # only consulted when method == "dropout"
    flip: bool = False  # random horizontal mirroring, an image-only ablation

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.alpha <= 0.0:
            raise ParameterError(f"alpha must be positive; got {self.alpha}")
        if not (0.0 < self.ratio <= 1.0):
            raise ParameterError(f"ratio must lie in (0, 1]; got {self.ratio}")
        if self.threshold_m is not None and not (0.0 < self.threshold_m < 1.0):
            raise ParameterError(f"threshold_m must lie in (0, 1); got {self.threshold_m}")
        if (self.task == "multilabel" and self.threshold_m is None
                and _METHOD_TABLE[self.method][0] != "none"):
            raise ParameterError(
                "multilabel training with a mixing method needs threshold_m: "
                "bce targets must stay binary"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ParameterError(f"lr must be positive; got {self.lr}")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise ParameterError(f"lr_decay_factor must lie in (0, 1]; got {self.lr_decay_factor}")
        if any(e < 1 for e in self.lr_decay_epochs):
            raise ParameterError(f"decay epochs must be >= 1; got {self.lr_decay_epochs}")
        milestones = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ParameterError(
                f"decay epochs must be strictly increasing; got {milestones}"
            )
        if any(e >= self.epochs for e in milestones):
            raise ParameterError(
                f"decay epochs must be below epochs={self.epochs}; got {milestones}"
            )
        if not (0.0 <= self.momentum < 1.0):
            raise ParameterError(f"momentum must lie in [0, 1); got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ParameterError(f"weight_decay must be >= 0; got {self.weight_decay}")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative; got {self.seed}")
        if self.task not in ("classification", "multilabel"):
            raise ParameterError(f"unknown task {self.task!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ParameterError(f"dropout_rate must lie in [0, 1); got {self.dropout_rate}")

    def plan_method(self) -> str:
        return _METHOD_TABLE[self.method][0]

    def noise_deltas(self) -> tuple:
        return (self.nfm_add, self.nfm_mult) if _METHOD_TABLE[self.method][1] else (0.0, 0.0)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """lr for a 1-based epoch: initial lr decayed once per passed milestone."""
    if epoch < 1:
        raise ParameterError(f"epochs are 1-based; got {epoch}")
    hits = sum(1 for d in config.lr_decay_epochs if d <= epoch)
    return config.lr * config.lr_decay_factor**hits


@dataclass
class RunRecord:
    """Everything a finished run reports, minus wall-clock time.

    Serialization is canonical (sorted keys, newline-terminated) so a repeat
    of the same run produces byte-identical JSON.
    """

    config: dict
    metric_name: str
    train_loss: list = field(default_factory=list)
    test_metric: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    context: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "metric_name": self.metric_name,
            "train_loss": self.train_loss,
            "test_metric": self.test_metric,
            "final_metrics": self.final_metrics,
            "context": self.context,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _config_as_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["eligible"] = None if config.eligible is None else list(config.eligible)
    d["lr_decay_epochs"] = list(config.lr_decay_epochs)
    return d


def _target_matrix(dataset: Dataset, task: str, num_classes: int) -> np.ndarray:
    labels = np.asarray(dataset.labels)
    if task == "classification":
        if labels.ndim != 1:
            raise ParameterError("classification expects integer labels")
        out = np.zeros((len(labels), num_classes))
        out[np.arange(len(labels)), labels.astype(int)] = 1.0
        return out
    if labels.ndim != 2 or labels.shape[1] != num_classes:
        raise ParameterError(
            f"multilabel expects (N, {num_classes}) targets; got {labels.shape}"
        )
    return labels.astype(np.float64)


def _test_metric(net, dataset: Dataset, task: str) -> float:
    if task == "classification":
        return evaluate.evaluate_accuracy(net, dataset)
    return evaluate.evaluate_map(net, dataset)[1]


def train(net: nets.Network, config: TrainConfig, train_set: Dataset,
          test_set: Dataset | None = None):
    """Fit net in place; returns (net, RunRecord).

    Per step: draw one plan per sample (partner, lam, hook, mask), run the
    injected forward, mix the targets with each sample's realized ratio, take
    the loss gradient, and apply one SGD step. The "data" stream drives epoch
    shuffles and the "augment" stream drives plans, noise, and dropout; both
    derive from config.seed, so the whole trajectory is seed-determined.
    """
    streams = sampling.make_streams(config.seed)
    data_rng, aug_rng = streams["data"], streams["augment"]

    # The dropout baseline is a network property; wire it from the config so
    # one builder serves every method.
    net.dropout_rate = config.dropout_rate if config.method == "dropout" else 0.0

    plan_method = config.plan_method()
    d_add, d_mult = config.noise_deltas()
    eligible = net.eligible if config.eligible is None else config.eligible
    bad = [k for k in eligible if k not in net.hook_channels]
    if bad:
        raise ParameterError(f"eligible hooks {bad} not present in the network")

    targets_full = _target_matrix(train_set, config.task, net.num_classes)
    loss_fn = nets.soft_cross_entropy if config.task == "classification" else nets.bce_multilabel

    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    n = len(train_set)
    record = RunRecord(config=_config_as_dict(config),
                       metric_name="accuracy" if config.task == "classification" else "map")

    for epoch in range(1, config.epochs + 1):
        lr = learning_rate_at(config, epoch)
        order = data_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = train_set.inputs[idx]
            y = targets_full[idx]
            if config.flip:
                mirrored = data_rng.random(len(idx)) < 0.5
                if mirrored.any():
                    x[mirrored] = x[mirrored][:, :, :, ::-1]
            plans = augment.draw_plans(
                plan_method, len(idx), net.hook_channels, eligible,
                config.alpha, config.ratio, aug_rng,
                nfm_add=d_add, nfm_mult=d_mult,
            )
            fwd = net.forward_injected(x, plans, rng=aug_rng, training=True)
            y_mix = augment.mixed_labels_for_plans(plans, y)
            if config.task == "multilabel" and config.threshold_m is not None:
                y_mix = augment.threshold_labels(y_mix, config.threshold_m)
            if not np.all(np.isfinite(fwd.logits)):
                raise EvaluationError(
                    f"loss diverged at epoch {epoch}, batch {start // config.batch_size}"
                )
            loss, grad_logits = loss_fn(fwd.logits, y_mix)
            if not np.isfinite(loss):
                raise EvaluationError(
                    f"loss diverged at epoch {epoch}, batch {start // config.batch_size}"
                )
            loss_sum += loss * len(idx)
            net.zero_grad()
            net.backward_injected(fwd, grad_logits)
            for p, g, v in zip(params, net.gradients(), velocity):
                v *= config.momentum
                v += g + config.weight_decay * p
                p -= lr * v
        record.train_loss.append(loss_sum / n)
        if test_set is not None:
            record.test_metric.append(_test_metric(net, test_set, config.task))

    record.final_metrics["train_loss"] = record.train_loss[-1]
    if test_set is not None:
        key = "test_accuracy" if config.task == "classification" else "test_map"
        record.final_metrics[key] = record.test_metric[-1]
    return net, record
