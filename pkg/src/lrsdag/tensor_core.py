"""Dense float64 tensor primitives with hand-written gradients.

Tensors are plain numpy float64 arrays (row-major). Every public operation
either returns an all-finite array or raises. Reduction orders are fixed so
repeated runs on the same machine are bit-identical.
"""

import numpy as np


class TensorError(Exception):
    pass


class ShapeMismatch(TensorError):
    pass


class LabelOutOfRange(TensorError):
    pass


class NonFiniteValue(TensorError):
    pass


def as_tensor(x):
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x, op="tensor op"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"{op} produced non-finite values")
    return x


def matmul(a, b):
    """Matrix product of a [m x k] and b [k x n]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def im2col(x, kh, kw, stride, padding):
    """Unfold sliding windows of a batched image into a column matrix.

    x: (B, C, H, W). Returns (cols, h_out, w_out) where cols has shape
    (B, h_out*w_out, C*kh*kw). Window extraction is a strided view, so the
    element order inside each column is (channel, kernel row, kernel col).
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    b, c, h_out, w_out = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h_out * w_out, c * kh * kw)
    return np.ascontiguousarray(cols), h_out, w_out


def col2im(cols, x_shape, kh, kw, stride, padding):
    """Scatter-add column gradients back onto the (padded) input grid.

    Inverse of the gather in `im2col` for gradient purposes: overlapping
    windows accumulate. Loop order over kernel offsets is fixed.
    """
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    xp = np.zeros((b, c, hp, wp), dtype=np.float64)
    cols6 = cols.reshape(b, h_out, w_out, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                cols6[:, :, :, :, i, j]
    if padding:
        return xp[:, :, padding:hp - padding, padding:wp - padding]
    return xp


def conv2d(x, kernels, stride=1, padding=0):
    """Zero-padded cross-correlation.

    x: (C_in, H, W) or (B, C_in, H, W); kernels: (C_out, C_in, kh, kw).
    Output spatial size is floor((H + 2*padding - kh) / stride) + 1.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeMismatch(f"conv2d expects image {x.shape} and kernels {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[1] != c_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernels expect {c_in}")
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeMismatch("kernel larger than padded input")
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    cols, h_out, w_out = im2col(x, kh, kw, stride, padding)
    out = cols @ kernels.reshape(c_out, -1).T
    out = out.transpose(0, 2, 1).reshape(x.shape[0], c_out, h_out, w_out)
    check_finite(out, "conv2d")
    return out[0] if squeeze else out


def softmax(v):
    """Stable softmax over the last axis; each slice sums to 1."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v):
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeMismatch(f"expected logits of shape (B, c), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    lsm = log_softmax(logits)
    return float(-lsm[np.arange(n), labels].mean())


def cross_entropy_grad(logits, labels):
    """Gradient of cross_entropy w.r.t. the logits: (softmax - onehot) / B."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    return g / n


def grad_check(fn, x, eps=1e-5, max_coords=None, rng=None):
    """Compare an analytic gradient against central finite differences.

    `fn(x)` must return `(value, grad)` with `grad` shaped like `x` and must
    be deterministic. Returns the max over checked coordinates of
    |analytic - numeric| / max(1, |numeric|). When `max_coords` is given and
    the tensor is larger, a seeded random subset of coordinates is checked.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x = as_tensor(x)
    _, grad = fn(x)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ShapeMismatch(f"grad shape {grad.shape} != input shape {x.shape}")
    n = x.size
    if max_coords is not None and n > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = range(n)
    flat_grad = grad.reshape(-1)
    worst = 0.0
    for i in coords:
        xp = x.copy()
        xm = x.copy()
        xp.reshape(-1)[i] += eps
        xm.reshape(-1)[i] -= eps
        numeric = (fn(xp)[0] - fn(xm)[0]) / (2.0 * eps)
        err = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
