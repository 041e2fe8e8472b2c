"""Seeded randomness for the whole package.

One integer seed fans out into named child streams via SeedSequence.spawn, so
adding draws to one consumer never shifts another consumer's sequence. All
generators are PCG64, which numpy guarantees to be platform-stable.
"""

from __future__ import annotations

import numpy as np

from shufflemix.errors import ParameterError

# Fixed spawn order; position in this tuple defines the child index.
# init: parameter initialization; data: epoch shuffles; augment: plan draws,
# noise, dropout; eval: evaluation-time perturbations; datagen: dataset
# synthesis and subset selection.
STREAM_NAMES = ("init", "data", "augment", "eval", "datagen")


def make_rng(seed: int) -> np.random.Generator:
    """Fresh PCG64 generator from a plain integer seed."""
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ParameterError(f"seed must be an integer; got {seed!r}")
    if seed < 0:
        raise ParameterError(f"seed must be non-negative; got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named independent generators derived from one seed."""
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ParameterError(f"seed must be an integer; got {seed!r}")
    if seed < 0:
        raise ParameterError(f"seed must be non-negative; got {seed}")
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAM_NAMES))
    return {
        name: np.random.Generator(np.random.PCG64(child))
        for name, child in zip(STREAM_NAMES, children)
    }


def sample_beta(alpha: float, rng: np.random.Generator) -> float:
    """One draw from Beta(alpha, alpha); alpha=1 degenerates to uniform."""
    if not np.isfinite(alpha) or alpha <= 0.0:
        raise ParameterError(f"alpha must be a positive finite float; got {alpha}")
    return float(rng.beta(alpha, alpha))


def mask_cardinality(channels: int, ratio: float) -> int:
    """round(ratio * channels), half away from zero, promoted to at least 1."""
    if not isinstance(channels, (int, np.integer)) or channels < 1:
        raise ParameterError(f"channels must be a positive integer; got {channels!r}")
    if not (0.0 < ratio <= 1.0):
        raise ParameterError(f"ratio must lie in (0, 1]; got {ratio}")
    n = int(np.floor(ratio * channels + 0.5))
    if n == 0:
        n = 1
    return min(n, int(channels))


def sample_channel_mask(channels: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of shape (channels,) with exactly mask_cardinality ones.

    The ones are placed on a uniformly random subset of the given size.
    """
    n = mask_cardinality(channels, ratio)
    mask = np.zeros(channels, dtype=bool)
    idx = rng.choice(channels, size=n, replace=False)
    mask[idx] = True
    return mask


def sample_layer_index(eligible, rng: np.random.Generator) -> int:
    """Uniform choice from a non-empty collection of hook indices."""
    layers = sorted(set(int(k) for k in eligible))
    if not layers:
        raise ParameterError("eligible layer set must be non-empty")
    if layers[0] < 0:
        raise ParameterError(f"layer indices must be >= 0; got {layers}")
    return layers[int(rng.integers(len(layers)))]


def pairing_permutation(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of 0..batch_size-1 used to pick mixing partners."""
    if not isinstance(batch_size, (int, np.integer)) or batch_size < 1:
        raise ParameterError(f"batch_size must be a positive integer; got {batch_size!r}")
    return rng.permutation(batch_size)
