"""Dense tensor primitives with manual forward and backward passes.

All feature tensors are float64 arrays of shape (N, C, H, W). Vector data is
carried as (N, C, 1, 1) so a single layer algebra covers both MLPs and CNNs.
Backward functions return gradients computed analytically; ``fd_gradient`` is
the independent central-difference oracle the tests check them against.
"""

from __future__ import annotations

import numpy as np

from shufflemix.errors import DimensionError, EvaluationError, ParameterError


def as_feature_tensor(x, name: str = "input") -> np.ndarray:
    """Coerce to a float64 rank-4 array, rejecting anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(
            f"{name} must have shape (N, C, H, W); got rank-{arr.ndim} shape {arr.shape}"
        )
    return arr


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative difference, safe when both arrays are tiny."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def linear_forward(x, weight, bias) -> np.ndarray:
    """Affine map on (N, C, 1, 1) tensors; weight is (C_out, C_in).

    The product is evaluated one row at a time via a batched (1, C) @ (C, K)
    matmul so each sample's output bits do not depend on where the sample
    sits in the batch.
    """
    x = as_feature_tensor(x, "linear input")
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    n, c, h, w = x.shape
    if h != 1 or w != 1:
        raise DimensionError(f"linear input must be (N, C, 1, 1); got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != c:
        raise DimensionError(
            f"linear weight {weight.shape} does not accept input shape {x.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear bias {bias.shape} must be ({weight.shape[0]},)")
    x2 = x.reshape(n, 1, c)
    y2 = np.matmul(x2, weight.T) + bias  # (N, 1, C_out)
    return y2.reshape(n, weight.shape[0], 1, 1)


def linear_backward(x, weight, grad_out):
    """Return (grad_x, grad_weight, grad_bias) for linear_forward."""
    x = as_feature_tensor(x, "linear input")
    grad_out = as_feature_tensor(grad_out, "linear grad_out")
    weight = np.asarray(weight, dtype=np.float64)
    n, c = x.shape[0], x.shape[1]
    k = weight.shape[0]
    if grad_out.shape != (n, k, 1, 1):
        raise DimensionError(
            f"linear grad_out {grad_out.shape} does not match output (N={n}, {k}, 1, 1)"
        )
    g2 = grad_out.reshape(n, k)
    x2 = x.reshape(n, c)
    grad_x = (g2 @ weight).reshape(n, c, 1, 1)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# conv3x3, stride 1, zero padding 1 (cross-correlation)
# ---------------------------------------------------------------------------


def _im2col3x3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Stack the nine 3x3 shifts of padded input into (N, C_in*9, H*W)."""
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, 9, h * w), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di : di + h, dj : dj + w]
            cols[:, :, di * 3 + dj, :] = patch.reshape(n, c, h * w)
    return cols.reshape(n, c * 9, h * w)


def conv3x3_forward(x, weight, bias, with_cols: bool = False):
    """3x3 cross-correlation, stride 1, zero padding 1; output spatial size equals input.

    with_cols=True additionally returns the im2col buffer so a paired
    backward call can skip rebuilding it.
    """
    x = as_feature_tensor(x, "conv input")
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise DimensionError(
            f"conv weight {weight.shape} does not accept input shape {x.shape}"
        )
    co = weight.shape[0]
    if bias.shape != (co,):
        raise DimensionError(f"conv bias {bias.shape} must be ({co},)")
    xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    cols = _im2col3x3(xp, h, w)
    w2 = weight.reshape(co, c * 9)
    y = np.matmul(w2, cols)  # broadcast over N: one GEMM per sample
    y = y.reshape(n, co, h, w)
    y += bias.reshape(1, co, 1, 1)
    if with_cols:
        return y, cols
    return y


def conv3x3_backward(x, weight, grad_out, cols=None):
    """Return (grad_x, grad_weight, grad_bias) for conv3x3_forward.

    cols, when given, must be the im2col buffer of the matching forward
    call; it is rebuilt from x otherwise.
    """
    x = as_feature_tensor(x, "conv input")
    grad_out = as_feature_tensor(grad_out, "conv grad_out")
    weight = np.asarray(weight, dtype=np.float64)
    n, c, h, w = x.shape
    co = weight.shape[0]
    if grad_out.shape != (n, co, h, w):
        raise DimensionError(
            f"conv grad_out {grad_out.shape} does not match output ({n}, {co}, {h}, {w})"
        )
    if cols is None:
        xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
        xp[:, :, 1 : h + 1, 1 : w + 1] = x
        cols = _im2col3x3(xp, h, w)
    g2 = grad_out.reshape(n, co, h * w)
    w2 = weight.reshape(co, c * 9)

    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(co, c, 3, 3)

    grad_cols = np.matmul(w2.T, g2).reshape(n, c, 9, h * w)
    grad_xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            grad_xp[:, :, di : di + h, dj : dj + w] += grad_cols[
                :, :, di * 3 + dj, :
            ].reshape(n, c, h, w)
    grad_x = grad_xp[:, :, 1 : h + 1, 1 : w + 1].copy()
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# elementwise and pooling
# ---------------------------------------------------------------------------


def relu_forward(x) -> np.ndarray:
    x = as_feature_tensor(x, "relu input")
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    """Gradient is masked wherever the forward input was <= 0."""
    x = as_feature_tensor(x, "relu input")
    grad_out = as_feature_tensor(grad_out, "relu grad_out")
    if grad_out.shape != x.shape:
        raise DimensionError(f"relu grad_out {grad_out.shape} must match input {x.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


def avg_pool2x2_forward(x) -> np.ndarray:
    """Non-overlapping 2x2 mean pooling; H and W must be even."""
    x = as_feature_tensor(x, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x2 needs even spatial dims; got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2x2_backward(x, grad_out) -> np.ndarray:
    x = as_feature_tensor(x, "pool input")
    grad_out = as_feature_tensor(grad_out, "pool grad_out")
    n, c, h, w = x.shape
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise DimensionError(
            f"pool grad_out {grad_out.shape} does not match output ({n}, {c}, {h // 2}, {w // 2})"
        )
    g = grad_out * 0.25
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def global_avg_pool_forward(x) -> np.ndarray:
    """Mean over the spatial grid; (N, C, H, W) -> (N, C, 1, 1)."""
    x = as_feature_tensor(x, "gap input")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x, grad_out) -> np.ndarray:
    x = as_feature_tensor(x, "gap input")
    grad_out = as_feature_tensor(grad_out, "gap grad_out")
    n, c, h, w = x.shape
    if grad_out.shape != (n, c, 1, 1):
        raise DimensionError(
            f"gap grad_out {grad_out.shape} does not match output ({n}, {c}, 1, 1)"
        )
    return np.broadcast_to(grad_out / (h * w), x.shape).copy()


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def fd_gradient(fn, x0, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    fn maps a 1-D float64 array to a python float. Kept deliberately dumb so
    it cannot share bugs with the analytic backward passes.
    """
    if step <= 0.0:
        raise ParameterError(f"fd step must be positive; got {step}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise DimensionError(f"fd_gradient expects a flat vector; got shape {x0.shape}")
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(fn(xp))
        fm = float(fn(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"fd probe at coordinate {i} produced non-finite loss")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad
