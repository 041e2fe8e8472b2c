"""Minimal network stack with hidden-state injection points.

A Network is a list of blocks plus a classification head. The tensor flowing
out of block j is "hook j" (hook 0 is the raw input). Training-time
augmentation replaces a sample's hook-k activation with a mixture of its own
and a partner's clean activation, then finishes the forward pass from there.

The injected forward/backward is the delicate part: the clean pass is
computed once for the whole batch, samples are grouped by (hook, method) for
the tail passes, and the backward pass scatters each mix operator's two
adjoints (own path and partner path) back into the clean activation gradients
before a single top-down clean backward sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from shufflemix import augment, ops
from shufflemix.errors import (
    DataFormatError,
    DimensionError,
    EvaluationError,
    ParameterError,
)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear:
    kind = "linear"
    has_params = True

    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if rng is None:
            self.weight = np.zeros((out_features, in_features))
        else:
            # He initialization, standard for relu stacks.
            std = np.sqrt(2.0 / in_features)
            self.weight = rng.standard_normal((out_features, in_features)) * std
        self.bias = np.zeros(out_features)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def forward(self, x):
        return ops.linear_forward(x, self.weight, self.bias), x

    def backward(self, cache, grad_out):
        grad_x, gw, gb = ops.linear_backward(cache, self.weight, grad_out)
        self.grad_weight += gw
        self.grad_bias += gb
        return grad_x

    def descriptor(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class Conv3x3:
    kind = "conv3x3"
    has_params = True

    def __init__(self, in_channels: int, out_channels: int, rng=None):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        if rng is None:
            self.weight = np.zeros((out_channels, in_channels, 3, 3))
        else:
            std = np.sqrt(2.0 / (in_channels * 9))
            self.weight = rng.standard_normal((out_channels, in_channels, 3, 3)) * std
        self.bias = np.zeros(out_channels)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def forward(self, x):
        # Keep the im2col buffer alive; backward reuses it instead of
        # rebuilding the patch matrix from the cached input.
        y, cols = ops.conv3x3_forward(x, self.weight, self.bias, with_cols=True)
        return y, (x, cols)

    def backward(self, cache, grad_out):
        x, cols = cache
        grad_x, gw, gb = ops.conv3x3_backward(x, self.weight, grad_out, cols)
        self.grad_weight += gw
        self.grad_bias += gb
        return grad_x

    def descriptor(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels}


class ReLU:
    kind = "relu"
    has_params = False

    def forward(self, x):
        return ops.relu_forward(x), x

    def backward(self, cache, grad_out):
        return ops.relu_backward(cache, grad_out)

    def descriptor(self):
        return {"kind": self.kind}


class AvgPool2x2:
    kind = "avgpool2x2"
    has_params = False

    def forward(self, x):
        return ops.avg_pool2x2_forward(x), x

    def backward(self, cache, grad_out):
        return ops.avg_pool2x2_backward(cache, grad_out)

    def descriptor(self):
        return {"kind": self.kind}


class GlobalAvgPool:
    kind = "gap"
    has_params = False

    def forward(self, x):
        return ops.global_avg_pool_forward(x), x

    def backward(self, cache, grad_out):
        return ops.global_avg_pool_backward(cache, grad_out)

    def descriptor(self):
        return {"kind": self.kind}


_LAYER_KINDS = {
    "linear": lambda d: Linear(d["in"], d["out"]),
    "conv3x3": lambda d: Conv3x3(d["in"], d["out"]),
    "relu": lambda d: ReLU(),
    "avgpool2x2": lambda d: AvgPool2x2(),
    "gap": lambda d: GlobalAvgPool(),
}


def _run_layers(layers, x):
    """Run a layer list, keeping whatever each layer's backward needs."""
    caches = []
    h = x
    for layer in layers:
        h, cache = layer.forward(h)
        caches.append(cache)
    return h, caches


def _backward_layers(layers, caches, grad):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        grad = layer.backward(cache, grad)
    return grad


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class GroupRecord:
    """Bookkeeping for one (hook, method) group inside an injected forward."""

    method: str
    k: int
    idx: np.ndarray
    partner: np.ndarray | None = None
    lam: np.ndarray | None = None
    mask: np.ndarray | None = None
    scale: np.ndarray | None = None  # nfm multiplicative factor, for backward
    tail_caches: list = field(default_factory=list)
    head_caches: list = field(default_factory=list)


@dataclass
class BatchForward:
    """Everything backward_injected needs to replay a training step."""

    logits: np.ndarray
    acts: list
    block_caches: list
    groups: list
    dropout_mask: np.ndarray | None


class Network:
    """Blocks + head with mix-in hooks between blocks.

    hook_channels maps hook index -> channel count at that hook; hook 0 is the
    input. eligible is the default set of hooks augmentation may target.
    """

    def __init__(self, blocks, head, num_classes, hook_channels, eligible=None,
                 dropout_rate: float = 0.0):
        self.blocks = blocks
        self.head = head
        self.num_classes = int(num_classes)
        self.hook_channels = {int(k): int(v) for k, v in hook_channels.items()}
        if eligible is None:
            eligible = tuple(range(len(blocks) + 1))
        self.eligible = tuple(sorted(set(int(k) for k in eligible)))
        if not (0.0 <= dropout_rate < 1.0):
            raise ParameterError(f"dropout_rate must lie in [0, 1); got {dropout_rate}")
        self.dropout_rate = float(dropout_rate)
        expected = set(range(len(blocks) + 1))
        if set(self.hook_channels) != expected:
            raise ParameterError(
                f"hook_channels keys {sorted(self.hook_channels)} must be exactly {sorted(expected)}"
            )
        if not set(self.eligible) <= expected:
            raise ParameterError(
                f"eligible hooks {self.eligible} outside available hooks {sorted(expected)}"
            )

    # -- parameter plumbing -------------------------------------------------

    def _param_layers(self):
        for layer in [l for block in self.blocks for l in block] + list(self.head):
            if layer.has_params:
                yield layer

    def parameters(self):
        out = []
        for layer in self._param_layers():
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def gradients(self):
        out = []
        for layer in self._param_layers():
            out.append(layer.grad_weight)
            out.append(layer.grad_bias)
        return out

    def zero_grad(self):
        for g in self.gradients():
            g[...] = 0.0

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_params(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        total = sum(p.size for p in self.parameters())
        if vec.shape != (total,):
            raise DimensionError(f"flat vector must have shape ({total},); got {vec.shape}")
        pos = 0
        for p in self.parameters():
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    # -- forward passes -----------------------------------------------------

    def forward(self, x) -> np.ndarray:
        """Clean inference pass; returns (N, K) logits. No dropout, no mixing."""
        h = ops.as_feature_tensor(x, "network input")
        for block in self.blocks:
            h, _ = _run_layers(block, h)
        h, _ = _run_layers(self.head, h)
        return h.reshape(h.shape[0], self.num_classes)

    def forward_injected(self, x, plans, rng=None, training: bool = True) -> BatchForward:
        """Forward pass with per-sample hidden-state augmentation.

        Each sample i is mixed with the clean activation of sample
        plans[i].partner at hook plans[i].k, then finishes the network from
        there. Draw order when rng is consumed: dropout mask first (whole
        batch), then noise-injection draws group by group in ascending
        (hook, method) order.
        """
        x = ops.as_feature_tensor(x, "network input")
        n = x.shape[0]
        if len(plans) != n:
            raise DimensionError(f"{len(plans)} plans for batch of {n}")
        num_blocks = len(self.blocks)

        acts = [x]
        block_caches = []
        h = x
        for block in self.blocks:
            h, caches = _run_layers(block, h)
            block_caches.append(caches)
            acts.append(h)

        buckets: dict[tuple, list[int]] = {}
        for i, plan in enumerate(plans):
            if plan.method == "none":
                key = (num_blocks, "none")
            else:
                if plan.k not in self.hook_channels:
                    raise ParameterError(f"plan hook {plan.k} outside network hooks")
                key = (plan.k, plan.method)
            buckets.setdefault(key, []).append(i)

        dropout_mask = None
        if training and self.dropout_rate > 0.0:
            if rng is None:
                raise ParameterError("dropout needs an rng during training")
            head_c = acts[num_blocks].shape[1]
            keep = rng.random((n, head_c, 1, 1)) >= self.dropout_rate
            dropout_mask = keep.astype(np.float64) / (1.0 - self.dropout_rate)

        logits = np.empty((n, self.num_classes))
        groups = []
        for key in sorted(buckets):
            k, method = key
            idx = np.asarray(buckets[key], dtype=np.intp)
            rec = GroupRecord(method=method, k=k, idx=idx)
            if method == "none":
                z = acts[num_blocks][idx]
            else:
                rec.partner = np.asarray([plans[i].partner for i in idx], dtype=np.intp)
                rec.lam = np.asarray([plans[i].lam for i in idx], dtype=np.float64)
                h_a = acts[k][idx]
                h_b = acts[k][rec.partner]
                if method in ("input-mixup", "manifold-mixup"):
                    z = augment.blend(h_a, h_b, rec.lam)
                elif method == "hard-shufflemix":
                    rec.mask = np.stack([plans[i].mask for i in idx])
                    z = augment.hard_shufflemix(h_a, h_b, rec.mask)
                elif method == "soft-shufflemix":
                    rec.mask = np.stack([plans[i].mask for i in idx])
                    z = augment.soft_shufflemix(h_a, h_b, rec.mask, rec.lam)
                else:
                    raise ParameterError(f"unknown plan method {method!r}")
                adds = {plans[i].nfm_add for i in idx}
                mults = {plans[i].nfm_mult for i in idx}
                if len(adds) > 1 or len(mults) > 1:
                    raise ParameterError("noise deltas must be uniform within a batch")
                d_add, d_mult = adds.pop(), mults.pop()
                if d_add > 0.0 or d_mult > 0.0:
                    if rng is None:
                        raise ParameterError("noise injection needs an rng")
                    z, rec.scale = augment.nfm_perturb(z, d_add, d_mult, rng)
            for bi in range(k if method != "none" else num_blocks, num_blocks):
                z, caches = _run_layers(self.blocks[bi], z)
                rec.tail_caches.append((bi, caches))
            if dropout_mask is not None:
                z = z * dropout_mask[idx]
            z, rec.head_caches = _run_layers(self.head, z)
            logits[idx] = z.reshape(len(idx), self.num_classes)
            groups.append(rec)
        return BatchForward(logits=logits, acts=acts, block_caches=block_caches,
                            groups=groups, dropout_mask=dropout_mask)

    def backward_injected(self, fwd: BatchForward, grad_logits) -> np.ndarray:
        """Accumulate parameter gradients for an injected forward.

        grad_logits is (N, K). Mix operators route their adjoint to both the
        anchor's and the partner's clean activation; the partner path uses
        unbuffered scatter-add because several samples may share a partner.
        Returns the gradient with respect to the network input.
        """
        grad_logits = np.asarray(grad_logits, dtype=np.float64)
        n = fwd.logits.shape[0]
        if grad_logits.shape != (n, self.num_classes):
            raise DimensionError(
                f"grad_logits must be ({n}, {self.num_classes}); got {grad_logits.shape}"
            )
        num_blocks = len(self.blocks)
        grad_acts: dict[int, np.ndarray] = {}

        def _bump(k: int) -> np.ndarray:
            if k not in grad_acts:
                grad_acts[k] = np.zeros_like(fwd.acts[k])
            return grad_acts[k]

        for rec in fwd.groups:
            idx = rec.idx
            g = grad_logits[idx].reshape(len(idx), self.num_classes, 1, 1)
            g = _backward_layers(self.head, rec.head_caches, g)
            if fwd.dropout_mask is not None:
                g = g * fwd.dropout_mask[idx]
            for bi, caches in reversed(rec.tail_caches):
                g = _backward_layers(self.blocks[bi], caches, g)
            if rec.scale is not None:
                g = g * rec.scale
            if rec.method == "none":
                _bump(num_blocks)[idx] += g
                continue
            lam4 = rec.lam.reshape(-1, 1, 1, 1)
            if rec.method in ("input-mixup", "manifold-mixup"):
                g_a = lam4 * g
                g_b = (1.0 - lam4) * g
            else:
                m4 = rec.mask[:, :, None, None]
                if rec.method == "hard-shufflemix":
                    g_a = np.where(m4, 0.0, g)
                    g_b = np.where(m4, g, 0.0)
                else:
                    g_a = np.where(m4, lam4 * g, g)
                    g_b = np.where(m4, (1.0 - lam4) * g, 0.0)
            target = _bump(rec.k)
            target[idx] += g_a
            np.add.at(target, rec.partner, g_b)

        g = grad_acts.pop(num_blocks, None)
        if g is None:
            g = np.zeros_like(fwd.acts[num_blocks])
        for bi in range(num_blocks - 1, -1, -1):
            g = _backward_layers(self.blocks[bi], fwd.block_caches[bi], g)
            if bi in grad_acts:
                g = g + grad_acts[bi]
        return g

    def descriptor(self) -> dict:
        return {
            "format_version": 1,
            "num_classes": self.num_classes,
            "dropout_rate": self.dropout_rate,
            "eligible": list(self.eligible),
            "hook_channels": {str(k): v for k, v in sorted(self.hook_channels.items())},
            "blocks": [[layer.descriptor() for layer in block] for block in self.blocks],
            "head": [layer.descriptor() for layer in self.head],
        }


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_mlp(in_features: int, hidden, num_classes: int, rng,
              eligible=None, dropout_rate: float = 0.0) -> Network:
    """Fully connected relu net; one hook after each hidden layer.

    hidden [16, 16, 16] with num_classes K gives four linear layers total and
    hooks 0..3 with channel counts (in_features, 16, 16, 16).
    """
    hidden = [int(w) for w in hidden]
    if not hidden:
        raise ParameterError("need at least one hidden width")
    blocks = []
    hook_channels = {0: int(in_features)}
    prev = int(in_features)
    for j, width in enumerate(hidden, start=1):
        blocks.append([Linear(prev, width, rng), ReLU()])
        hook_channels[j] = width
        prev = width
    head = [Linear(prev, num_classes, rng)]
    return Network(blocks, head, num_classes, hook_channels,
                   eligible=eligible, dropout_rate=dropout_rate)


def build_small_cnn(in_channels: int, widths, num_classes: int, rng,
                    eligible=None, dropout_rate: float = 0.0) -> Network:
    """Four conv3x3 stages with 2x2 mean pooling between them and a GAP head.

    Hooks: 0 input, 1..4 after each conv stage. Needs even input H and W;
    32x32 runs the stages at 32, 16, 8, 4.
    """
    widths = [int(w) for w in widths]
    if len(widths) != 4:
        raise ParameterError(f"expected four stage widths; got {widths}")
    w0, w1, w2, w3 = widths
    blocks = [
        [Conv3x3(in_channels, w0, rng), ReLU()],
        [AvgPool2x2(), Conv3x3(w0, w1, rng), ReLU()],
        [AvgPool2x2(), Conv3x3(w1, w2, rng), ReLU()],
        [AvgPool2x2(), Conv3x3(w2, w3, rng), ReLU(), GlobalAvgPool()],
    ]
    head = [Linear(w3, num_classes, rng)]
    hook_channels = {0: int(in_channels), 1: w0, 2: w1, 3: w2, 4: w3}
    return Network(blocks, head, num_classes, hook_channels,
                   eligible=eligible, dropout_rate=dropout_rate)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_cross_entropy(logits, targets):
    """Mean cross-entropy against soft target rows; returns (loss, grad_logits).

    Linear in the target, so the loss of a mixed target equals the same mix
    of the two clean-target losses. Gradient is (softmax - target) / N.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise DimensionError(
            f"logits {logits.shape} and targets {targets.shape} must be matching (N, K)"
        )
    if not np.all(np.isfinite(logits)):
        raise EvaluationError("non-finite logits in cross-entropy")
    if targets.min() < 0.0 or np.abs(targets.sum(axis=1) - 1.0).max() > 1e-6:
        raise ParameterError("soft targets must be non-negative and sum to 1 per row")
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m
    loss = float((lse.ravel() - (targets * logits).sum(axis=1)).mean())
    grad = (softmax(logits) - targets) / n
    return loss, grad


def bce_multilabel(logits, targets):
    """Per-label binary cross-entropy, summed over labels, averaged over the
    batch; returns (loss, grad_logits). Targets must be binary: mixed
    multi-label targets go through thresholding first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise DimensionError(
            f"logits {logits.shape} and targets {targets.shape} must be matching (N, K)"
        )
    if not np.all(np.isfinite(logits)):
        raise EvaluationError("non-finite logits in bce")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ParameterError("bce targets must be exactly 0 or 1")
    n = logits.shape[0]
    # softplus(z) - t*z, with softplus evaluated stably on both tails
    softplus = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    loss = float((softplus - targets * logits).sum(axis=1).mean())
    sigma = 1.0 / (1.0 + np.exp(-logits))
    grad = (sigma - targets) / n
    return loss, grad


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _sidecar(path: str) -> str:
    if not path.endswith(".npz"):
        raise ParameterError(f"checkpoint path must end in .npz; got {path!r}")
    return path[: -len(".npz")] + ".json"


def save_checkpoint(net: Network, path: str):
    """Write parameters to <path>.npz and the architecture to a JSON sidecar."""
    arrays = {f"param_{i:04d}": p for i, p in enumerate(net.parameters())}
    np.savez(path, **arrays)
    with open(_sidecar(path), "w") as fh:
        json.dump(net.descriptor(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> Network:
    """Rebuild a Network from save_checkpoint output; bit-exact round trip."""
    with open(_sidecar(path)) as fh:
        desc = json.load(fh)
    if desc.get("format_version") != 1:
        raise DataFormatError(f"unsupported checkpoint format: {desc.get('format_version')!r}")

    def _make(dlist):
        layers = []
        for d in dlist:
            if d["kind"] not in _LAYER_KINDS:
                raise DataFormatError(f"unknown layer kind {d['kind']!r} in checkpoint")
            layers.append(_LAYER_KINDS[d["kind"]](d))
        return layers

    blocks = [_make(b) for b in desc["blocks"]]
    head = _make(desc["head"])
    net = Network(
        blocks,
        head,
        desc["num_classes"],
        {int(k): v for k, v in desc["hook_channels"].items()},
        eligible=desc["eligible"],
        dropout_rate=desc["dropout_rate"],
    )
    with np.load(path) as data:
        params = net.parameters()
        if len(data.files) != len(params):
            raise DataFormatError(
                f"checkpoint holds {len(data.files)} arrays, architecture needs {len(params)}"
            )
        for i, p in enumerate(params):
            arr = data[f"param_{i:04d}"]
            if arr.shape != p.shape:
                raise DataFormatError(
                    f"checkpoint array {i} has shape {arr.shape}, expected {p.shape}"
                )
            p[...] = arr
    return net
