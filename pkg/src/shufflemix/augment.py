"""Feature and label mixing operators.

Every operator here is pure array algebra over (N, C, H, W) tensors; the
random draws that parameterize them live in AugmentPlan / draw_plans so a
training step can be replayed exactly from its plans.

Endpoint behaviour is engineered to be bit-exact, not merely close: blending
with lam 0 or 1 returns a copy of the corresponding operand, a full channel
mask makes soft shuffling identical to plain interpolation, and lam 0 makes
it identical to hard channel swapping. The reduction identities among the
methods hold at the bit level because they all funnel through one blend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from shufflemix import ops, sampling
from shufflemix.errors import DimensionError, ParameterError

PLAN_METHODS = (
    "none",
    "input-mixup",
    "manifold-mixup",
    "hard-shufflemix",
    "soft-shufflemix",
)


def _check_pair(a, b, what: str):
    a = ops.as_feature_tensor(a, f"{what} first input")
    b = ops.as_feature_tensor(b, f"{what} second input")
    if a.shape != b.shape:
        raise DimensionError(f"{what} inputs must share a shape; got {a.shape} vs {b.shape}")
    return a, b


def _check_lam(lam, n: int):
    """Validate lam in [0, 1]; returns (scalar_or_None, per_sample_or_None)."""
    arr = np.asarray(lam, dtype=np.float64)
    if arr.ndim == 0:
        v = float(arr)
        if not (0.0 <= v <= 1.0) or not np.isfinite(v):
            raise ParameterError(f"lam must lie in [0, 1]; got {v}")
        return v, None
    if arr.shape != (n,):
        raise DimensionError(f"per-sample lam must have shape ({n},); got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError("per-sample lam values must lie in [0, 1]")
    return None, arr


def blend(a, b, lam) -> np.ndarray:
    """lam * a + (1 - lam) * b, with exact endpoints.

    Computed as a + (1 - lam) * (b - a), which returns a bitwise copy of a
    when a == b regardless of lam. lam may be a scalar or an (N,) vector.
    """
    a, b = _check_pair(a, b, "blend")
    scalar, per_sample = _check_lam(lam, a.shape[0])
    if per_sample is None:
        if scalar == 0.0:
            return b.copy()
        if scalar == 1.0:
            return a.copy()
        return a + (1.0 - scalar) * (b - a)
    u = (1.0 - per_sample).reshape(-1, 1, 1, 1)
    out = a + u * (b - a)
    # Per-row endpoint repair keeps the scalar and vector paths consistent.
    at_zero = per_sample == 0.0
    if at_zero.any():
        out[at_zero] = b[at_zero]
    at_one = per_sample == 1.0
    if at_one.any():
        out[at_one] = a[at_one]
    return out


def input_mixup(x_a, x_b, lam) -> np.ndarray:
    """Classic mixup on raw inputs: lam * x_a + (1 - lam) * x_b."""
    return blend(x_a, x_b, lam)


def manifold_mixup(h_a, h_b, lam) -> np.ndarray:
    """Mixup applied to hidden features; same algebra, different call site."""
    return blend(h_a, h_b, lam)


def _check_mask(mask, n: int, c: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise ParameterError(f"channel mask must be boolean; got dtype {m.dtype}")
    if m.shape == (c,):
        m = np.broadcast_to(m, (n, c))
    elif m.shape != (n, c):
        raise DimensionError(
            f"channel mask must have shape ({c},) or ({n}, {c}); got {m.shape}"
        )
    return m


def hard_shufflemix(h_a, h_b, mask) -> np.ndarray:
    """Swap the masked channels of h_a for the partner's channels.

    Unmasked channels are h_a's bits unchanged; masked channels are h_b's.
    """
    a, b = _check_pair(h_a, h_b, "hard_shufflemix")
    m = _check_mask(mask, a.shape[0], a.shape[1])
    return np.where(m[:, :, None, None], b, a)


def soft_shufflemix(h_a, h_b, mask, lam) -> np.ndarray:
    """Interpolate only the masked channels; unmasked channels stay h_a's.

    Masked channels become lam * h_a + (1 - lam) * h_b. With lam 0 this is
    hard_shufflemix bit-for-bit; with a full mask it is manifold_mixup.
    """
    a, b = _check_pair(h_a, h_b, "soft_shufflemix")
    m = _check_mask(mask, a.shape[0], a.shape[1])
    mixed = blend(a, b, lam)
    return np.where(m[:, :, None, None], mixed, a)


def mix_labels(y_a, y_b, ratio, lam) -> np.ndarray:
    """Target for a mixed sample: (1 - t) * y_a + t * y_b with t = ratio * (1 - lam).

    ratio is the realized fraction of mixed channels (1 for plain mixup).
    Computed as y_a + t * (y_b - y_a) so t == 0 returns y_a's exact bits.
    """
    y_a = np.asarray(y_a, dtype=np.float64)
    y_b = np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape or y_a.ndim not in (1, 2):
        raise DimensionError(
            f"labels must be matching (K,) or (N, K) arrays; got {y_a.shape} vs {y_b.shape}"
        )
    n = y_a.shape[0] if y_a.ndim == 2 else 1
    ratio_arr = np.asarray(ratio, dtype=np.float64)
    if not np.all(np.isfinite(ratio_arr)) or ratio_arr.min() <= 0.0 or ratio_arr.max() > 1.0:
        raise ParameterError(f"ratio must lie in (0, 1]; got {ratio}")
    scalar, per_sample = _check_lam(lam, n)
    lam_arr = np.full(n, scalar) if per_sample is None else per_sample
    if ratio_arr.ndim == 0:
        ratio_arr = np.full(n, float(ratio_arr))
    elif ratio_arr.shape != (n,):
        raise DimensionError(f"per-sample ratio must have shape ({n},); got {ratio_arr.shape}")
    t = ratio_arr * (1.0 - lam_arr)
    if y_a.ndim == 1:
        return y_a + t[0] * (y_b - y_a)
    return y_a + t[:, None] * (y_b - y_a)


def threshold_labels(y, threshold: float) -> np.ndarray:
    """Binarize soft multi-label targets: entries at or above threshold become 1."""
    y = np.asarray(y, dtype=np.float64)
    if not (0.0 < threshold < 1.0):
        raise ParameterError(f"threshold must lie in (0, 1); got {threshold}")
    return (y >= threshold).astype(np.float64)


def _noise_pair(shape, rng):
    # Multiplicative noise is standard normal and additive noise is uniform on
    # [-1, 1]; swap the two draws below to flip that convention package-wide.
    mult = rng.standard_normal(shape)
    add = rng.uniform(-1.0, 1.0, size=shape)
    return mult, add


def nfm_perturb(h, delta_add: float, delta_mult: float, rng):
    """Noisy feature perturbation: (1 + delta_mult * xi_m) * h + delta_add * xi_a.

    Returns (perturbed, scale) where scale is the elementwise factor
    1 + delta_mult * xi_m that the backward pass multiplies gradients by.
    Both deltas zero is a bit-exact no-op.
    """
    h = ops.as_feature_tensor(h, "nfm input")
    for name, d in (("delta_add", delta_add), ("delta_mult", delta_mult)):
        if not np.isfinite(d) or d < 0.0:
            raise ParameterError(f"{name} must be a finite non-negative float; got {d}")
    if delta_add == 0.0 and delta_mult == 0.0:
        return h.copy(), np.ones_like(h)
    xi_mult, xi_add = _noise_pair(h.shape, rng)
    scale = 1.0 + delta_mult * xi_mult
    return scale * h + delta_add * xi_add, scale


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPlan:
    """All random choices for one sample in one training step."""

    method: str
    partner: int
    k: int = 0
    lam: float = 1.0
    mask: np.ndarray | None = field(default=None, repr=False)
    nfm_add: float = 0.0
    nfm_mult: float = 0.0

    def label_ratio(self) -> float:
        """Realized mixing ratio feeding the label: ||mask|| / C, or 1, or 0."""
        if self.method == "none":
            return 0.0
        if self.mask is not None:
            return float(self.mask.sum()) / float(self.mask.size)
        return 1.0

    def label_coefficient(self) -> float:
        """Weight t on the partner's label."""
        return self.label_ratio() * (1.0 - self.lam)


def draw_plans(
    method: str,
    batch_size: int,
    hook_channels: dict[int, int],
    eligible,
    alpha: float,
    ratio: float,
    rng: np.random.Generator,
    nfm_add: float = 0.0,
    nfm_mult: float = 0.0,
) -> list[AugmentPlan]:
    """Draw one AugmentPlan per sample.

    Draw order is fixed: the partner permutation first, then per sample in
    batch order lam (if the method interpolates), then the hook index, then
    the channel mask. "none" consumes no randomness. Hard shuffling draws no
    lam; its lam is pinned to 0.
    """
    if method not in PLAN_METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {PLAN_METHODS}")
    if method == "none":
        if nfm_add != 0.0 or nfm_mult != 0.0:
            raise ParameterError("noise injection requires a mixing method")
        return [AugmentPlan("none", partner=i) for i in range(batch_size)]

    eligible = sorted(set(int(k) for k in eligible))
    unknown = [k for k in eligible if k not in hook_channels]
    if unknown:
        raise ParameterError(
            f"eligible hooks {unknown} not among network hooks {sorted(hook_channels)}"
        )
    partners = sampling.pairing_permutation(batch_size, rng)
    plans = []
    for i in range(batch_size):
        if method == "input-mixup":
            lam = sampling.sample_beta(alpha, rng)
            plans.append(
                AugmentPlan("input-mixup", partner=int(partners[i]), k=0, lam=lam,
                            nfm_add=nfm_add, nfm_mult=nfm_mult)
            )
            continue
        if method == "manifold-mixup":
            lam = sampling.sample_beta(alpha, rng)
            k = sampling.sample_layer_index(eligible, rng)
            plans.append(
                AugmentPlan("manifold-mixup", partner=int(partners[i]), k=k, lam=lam,
                            nfm_add=nfm_add, nfm_mult=nfm_mult)
            )
            continue
        if method == "hard-shufflemix":
            k = sampling.sample_layer_index(eligible, rng)
            mask = sampling.sample_channel_mask(hook_channels[k], ratio, rng)
            plans.append(
                AugmentPlan("hard-shufflemix", partner=int(partners[i]), k=k, lam=0.0,
                            mask=mask, nfm_add=nfm_add, nfm_mult=nfm_mult)
            )
            continue
        lam = sampling.sample_beta(alpha, rng)
        k = sampling.sample_layer_index(eligible, rng)
        mask = sampling.sample_channel_mask(hook_channels[k], ratio, rng)
        plans.append(
            AugmentPlan("soft-shufflemix", partner=int(partners[i]), k=k, lam=lam,
                        mask=mask, nfm_add=nfm_add, nfm_mult=nfm_mult)
        )
    return plans


def mixed_labels_for_plans(plans: list[AugmentPlan], labels: np.ndarray) -> np.ndarray:
    """Vector of training targets implied by the plans.

    labels is (N, K) float64 (one-hot or multi-hot). Rows with method "none"
    come back bit-identical.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] != len(plans):
        raise DimensionError(
            f"labels must be (N, K) with N == len(plans); got {labels.shape} for {len(plans)} plans"
        )
    partners = np.array([p.partner for p in plans], dtype=np.intp)
    t = np.array([p.label_coefficient() for p in plans], dtype=np.float64)
    return labels + t[:, None] * (labels[partners] - labels)
