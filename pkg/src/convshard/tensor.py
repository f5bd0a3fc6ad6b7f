"""Float64 CNN layer math: convolution, max pooling, LRN, fully connected, softmax loss.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout; kernel banks are
``(out_maps, in_channels, kh, kw)`` arrays.  All routines are pure: they never
modify their arguments and always return freshly allocated arrays.

Convolutions are evaluated as im2col GEMMs in fixed-width blocks, zero-padding
the last block.  Every BLAS call therefore has the same shape no matter how
many kernels (or input channels) the caller hands in, which is what makes an
output map bit-identical whether it is computed alone, inside the full bank, or
on another device that only owns a slice of the bank.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ConsistencyError, DataError, DimensionError

# kernels per GEMM call in forward / kernel-gradient passes
KERNEL_BLOCK = 32
# input channels per GEMM call in the input-gradient pass
CHANNEL_BLOCK = 8
# float64 elements per im2col buffer; larger batches are processed in slices
IM2COL_BUDGET = 1 << 24

DTYPE = np.float64


def as_tensor4(a, name="tensor"):
    """Validate ``a`` as a 4-D float64 array with every dimension >= 1."""
    a = np.asarray(a)
    if a.ndim != 4:
        raise DimensionError(f"{name} must be 4-D, got shape {a.shape}")
    if min(a.shape) < 1:
        raise DimensionError(f"{name} has an empty dimension: {a.shape}")
    if a.dtype != DTYPE:
        a = a.astype(DTYPE)
    return a


def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, oh, ow, kh, kw
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _nhwc_rows(t):
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _blocked_matmul(a, b, block, unit=1):
    """``a @ b`` computed in column blocks of ``block * unit`` columns.

    Each block of ``b`` is copied into a zeroed buffer of fixed width so the
    GEMM shape never depends on ``b.shape[1]``.
    """
    k, ncols = b.shape
    width = block * unit
    out = np.empty((a.shape[0], ncols), dtype=DTYPE)
    buf = np.empty((k, width), dtype=DTYPE)
    for j0 in range(0, ncols, width):
        j1 = min(j0 + width, ncols)
        buf[:] = 0.0
        buf[:, : j1 - j0] = b[:, j0:j1]
        out[:, j0:j1] = (a @ buf)[:, : j1 - j0]
    return out


def _batch_chunks(n, per_sample):
    # chunking may only depend on shapes every device shares, never on how
    # many kernels or channels this call owns
    step = max(1, IM2COL_BUDGET // max(1, per_sample))
    return [(s, min(s + step, n)) for s in range(0, n, step)]


def conv2d_forward(x, kernels):
    """Valid (unpadded, stride 1) cross-correlation.

    ``x`` is ``(n, c, h, w)``, ``kernels`` is ``(m, c, kh, kw)``; the result is
    ``(n, m, h - kh + 1, w - kw + 1)``.  Output map ``j`` depends only on
    ``kernels[j]``.
    """
    x = as_tensor4(x, "input")
    kernels = as_tensor4(kernels, "kernels")
    n, c, h, w = x.shape
    m, kc, kh, kw = kernels.shape
    if kc != c or h < kh or w < kw:
        raise DimensionError(f"input shape {x.shape} incompatible with kernel shape {kernels.shape}")
    oh, ow = h - kh + 1, w - kw + 1
    wmat = np.ascontiguousarray(kernels.reshape(m, kc * kh * kw).T)
    out = np.empty((n, m, oh, ow), dtype=DTYPE)
    for s0, s1 in _batch_chunks(n, oh * ow * c * kh * kw):
        res = _blocked_matmul(_im2col(x[s0:s1], kh, kw), wmat, KERNEL_BLOCK)
        out[s0:s1] = res.reshape(s1 - s0, oh, ow, m).transpose(0, 3, 1, 2)
    return out


def conv2d_backward_kernels(x, grad_out, kernel_shape):
    """Gradient of the loss w.r.t. the kernels producing ``grad_out``'s maps.

    Only the kernel *shape* is needed.  Kernel ``j``'s gradient depends only
    on map ``j`` of ``grad_out``, so the bank can be sliced freely.
    """
    x = as_tensor4(x, "input")
    grad_out = as_tensor4(grad_out, "grad_out")
    m, kc, kh, kw = (int(d) for d in kernel_shape)
    n, c, h, w = x.shape
    expected = (n, m, h - kh + 1, w - kw + 1)
    if kc != c or grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected} "
            f"for input {x.shape} and kernels {(m, kc, kh, kw)}"
        )
    oh, ow = expected[2:]
    gw = np.zeros((c * kh * kw, m), dtype=DTYPE)
    for s0, s1 in _batch_chunks(n, oh * ow * c * kh * kw):
        cols = _im2col(x[s0:s1], kh, kw)
        gw += _blocked_matmul(cols.T, _nhwc_rows(grad_out[s0:s1]), KERNEL_BLOCK)
    return np.ascontiguousarray(gw.T).reshape(m, kc, kh, kw)


def conv2d_backward_input(grad_out, kernels):
    """Gradient w.r.t. the input channels covered by ``kernels``.

    ``kernels`` may be a slice over the *input channel* axis,
    ``(m, c_sub, kh, kw)``; the result is then the gradient for those
    ``c_sub`` channels only, and is independent of the other channels.
    """
    grad_out = as_tensor4(grad_out, "grad_out")
    kernels = as_tensor4(kernels, "kernels")
    n, m, oh, ow = grad_out.shape
    km, csub, kh, kw = kernels.shape
    if km != m:
        raise DimensionError(f"grad_out shape {grad_out.shape} incompatible with kernel shape {kernels.shape}")
    kk = kh * kw
    wmat = np.ascontiguousarray(kernels.reshape(m, csub * kk))
    gin = np.zeros((n, csub, oh + kh - 1, ow + kw - 1), dtype=DTYPE)
    for s0, s1 in _batch_chunks(n, oh * ow * m * kk):
        g = _nhwc_rows(grad_out[s0:s1])
        gcols = _blocked_matmul(g, wmat, CHANNEL_BLOCK, unit=kk).reshape(s1 - s0, oh, ow, csub, kh, kw)
        part = gin[s0:s1]
        for di in range(kh):
            for dj in range(kw):
                part[:, :, di : di + oh, dj : dj + ow] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return gin


def conv2d_backward(x, kernels, grad_out):
    """Return ``(grad_input, grad_kernels)`` for :func:`conv2d_forward`."""
    x = as_tensor4(x, "input")
    kernels = as_tensor4(kernels, "kernels")
    grad_out = as_tensor4(grad_out, "grad_out")
    n, c, h, w = x.shape
    m, kc, kh, kw = kernels.shape
    expected = (n, m, h - kh + 1, w - kw + 1)
    if kc != c or grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    return conv2d_backward_input(grad_out, kernels), conv2d_backward_kernels(x, grad_out, kernels.shape)


@dataclass(frozen=True)
class PoolIndices:
    """Argmax bookkeeping produced by :func:`maxpool_forward`."""

    argmax: np.ndarray  # (n, c, oh, ow) flat offset inside each window
    input_shape: tuple
    window: int


def maxpool_forward(x, window=2, stride=2):
    """Non-overlapping max pooling.  Ties go to the first element of the block in row-major order."""
    x = as_tensor4(x, "input")
    if window != stride:
        raise ConfigurationError("only non-overlapping pooling (window == stride) is supported")
    if window < 1:
        raise ConfigurationError(f"pooling window must be >= 1, got {window}")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by stride {stride}")
    oh, ow = h // stride, w // stride
    blocks = x.reshape(n, c, oh, stride, ow, stride).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, stride * stride)
    arg = np.argmax(blocks, axis=-1).astype(np.uint8 if stride * stride <= 256 else np.intp)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolIndices(arg, x.shape, stride)


def maxpool_backward(grad_out, indices):
    grad_out = as_tensor4(grad_out, "grad_out")
    if grad_out.shape != indices.argmax.shape:
        raise ConsistencyError(f"grad_out shape {grad_out.shape} does not match pooling indices {indices.argmax.shape}")
    s = indices.window
    n, c, oh, ow = grad_out.shape
    blocks = np.zeros((n, c, oh, ow, s * s), dtype=DTYPE)
    np.put_along_axis(blocks, indices.argmax[..., None], grad_out[..., None], axis=-1)
    gin = blocks.reshape(n, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(indices.input_shape)
    return np.ascontiguousarray(gin)


def _lrn_check(depth, alpha, beta, bias):
    if depth < 1 or depth % 2 == 0:
        raise ConfigurationError(f"LRN depth must be odd and >= 1, got {depth}")
    if bias <= 0:
        raise ConfigurationError(f"LRN bias must be > 0, got {bias}")
    if alpha < 0 or beta < 0:
        raise ConfigurationError("LRN alpha and beta must be non-negative")


def _channel_window_sum(a, depth):
    r = depth // 2
    c = a.shape[1]
    padded = np.zeros((a.shape[0], c + 2 * r) + a.shape[2:], dtype=DTYPE)
    padded[:, r : r + c] = a
    acc = np.zeros_like(a)
    for off in range(depth):
        acc += padded[:, off : off + c]
    return acc


def _lrn_scale(x, depth, alpha, bias):
    return bias + alpha * _channel_window_sum(x * x, depth)


def lrn_forward(x, depth=5, alpha=1e-4, beta=0.75, bias=2.0, out=None):
    """Cross-channel local response normalization.

    ``out[c] = x[c] / (bias + alpha * sum(x[c']**2 for c' within depth//2 of c)) ** beta``;
    the window is clipped at the first and last channel.  ``out`` may be ``x``
    itself (in-place, used when the input is not needed for a backward pass).
    """
    _lrn_check(depth, alpha, beta, bias)
    x = as_tensor4(x, "input")
    if out is None:
        out = np.empty_like(x)
    elif out.shape != x.shape:
        raise DimensionError(f"out shape {out.shape} != input shape {x.shape}")
    for s0, s1 in _batch_chunks(x.shape[0], x[0].size):
        xs = x[s0:s1]
        out[s0:s1] = xs * _lrn_scale(xs, depth, alpha, bias) ** -beta
    return out


def lrn_backward(x, grad_out, depth=5, alpha=1e-4, beta=0.75, bias=2.0):
    _lrn_check(depth, alpha, beta, bias)
    x = as_tensor4(x, "input")
    grad_out = as_tensor4(grad_out, "grad_out")
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    gin = np.empty_like(x)
    for s0, s1 in _batch_chunks(x.shape[0], x[0].size):
        xs, gs = x[s0:s1], grad_out[s0:s1]
        scale = _lrn_scale(xs, depth, alpha, bias)
        inv = scale**-beta
        # the window is symmetric, so channel k is in c's window iff c is in k's
        cross = _channel_window_sum(gs * xs * inv / scale, depth)
        gin[s0:s1] = gs * inv - 2.0 * alpha * beta * xs * cross
    return gin


def fc_forward(x, weights, biases):
    """Affine map of the flattened input: ``(n, ...) -> (n, out_units)``."""
    x = np.asarray(x, dtype=DTYPE)
    flat = x.reshape(x.shape[0], -1)
    weights = np.asarray(weights, dtype=DTYPE)
    biases = np.asarray(biases, dtype=DTYPE)
    if weights.ndim != 2 or weights.shape[1] != flat.shape[1] or biases.shape != (weights.shape[0],):
        raise DimensionError(
            f"weights {weights.shape} / biases {biases.shape} incompatible with flattened input {flat.shape}"
        )
    return flat @ weights.T + biases


def fc_backward(x, weights, grad_out):
    """Return ``(grad_input, grad_weights, grad_biases)``; ``grad_input`` has ``x``'s shape."""
    x = np.asarray(x, dtype=DTYPE)
    flat = x.reshape(x.shape[0], -1)
    weights = np.asarray(weights, dtype=DTYPE)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if grad_out.shape != (flat.shape[0], weights.shape[0]) or weights.shape[1] != flat.shape[1]:
        raise DimensionError(f"grad_out {grad_out.shape} incompatible with weights {weights.shape}")
    gin = (grad_out @ weights).reshape(x.shape)
    return gin, grad_out.T @ flat, grad_out.sum(axis=0)


def softmax_loss(logits, labels):
    """Mean cross-entropy of a softmax over ``logits`` (n, classes).

    Returns ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / n``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - shifted[rows, labels]))
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def sgd_step(params, grads, lr):
    """Plain SGD on a mapping of named arrays; returns a new mapping."""
    if set(params) != set(grads):
        raise DimensionError(f"parameter names {sorted(params)} != gradient names {sorted(grads)}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"{name}: parameter shape {np.shape(p)} != gradient shape {np.shape(g)}")
        out[name] = p - lr * g
    return out
