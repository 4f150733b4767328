"""Forward and backward kernels for the fixed layer set.

All kernels work on channels-last arrays: sequences are ``[batch, length,
channels]`` and dense activations are ``[batch, features]``. Backward
functions return gradients in the same dtype as their inputs.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import DegenerateBatch, ShapeError

L2_NORM_EPS = 1e-12


# -- convolution -------------------------------------------------------------

def _check_conv(x, w, b):
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,L,C] and w [K,C,O], got {x.shape}, {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d input has {x.shape[2]} channels, kernel expects {c_in}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({c_out},)")


def im2col(x, kernel):
    """Zero-pad for 'same' output and unfold into rows of ``K*C`` values.

    Row ``b*L + i`` is ``x_padded[b, i:i+K, :]`` flattened k-major, which is
    one contiguous run of the padded buffer.
    """
    pad = (kernel - 1) // 2
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (pad, pad), (0, 0))))
    b, length, c = x.shape
    view = as_strided(xp, shape=(b, length, kernel * c),
                      strides=(xp.strides[0], xp.strides[1], xp.strides[2]),
                      writeable=False)
    return view.reshape(b * length, kernel * c)


def _kernel_matrix(w):
    k, c_in, c_out = w.shape
    return w.reshape(k * c_in, c_out)


def conv1d_forward(x, w, b, cols=None):
    """Stride-1 'same' cross-correlation.

    ``y[b, i, o] = bias[o] + sum_{k,c} w[k, c, o] * x_pad[b, i + k, c]``
    with ``(K - 1) / 2`` zeros on each side.
    """
    _check_conv(x, w, b)
    if cols is None:
        cols = im2col(x, w.shape[0])
    y = cols @ _kernel_matrix(w)
    if b is not None:
        y += b
    return y.reshape(x.shape[0], x.shape[1], w.shape[2])


def conv1d_backward(grad_out, x, w, l2=0.0, cols=None):
    """Return ``(grad_input, grad_weights, grad_bias)``.

    ``l2`` adds the derivative of ``l2 * sum(w**2)`` to ``grad_weights``.
    """
    _check_conv(x, w, None)
    bsz, length, _ = x.shape
    k, c_in, c_out = w.shape
    if grad_out.shape != (bsz, length, c_out):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(bsz, length, c_out)}")
    if cols is None:
        cols = im2col(x, k)
    g2 = grad_out.reshape(bsz * length, c_out)
    gw = (cols.T @ g2).reshape(k, c_in, c_out)
    if l2:
        gw = gw + 2.0 * l2 * w
    gb = g2.sum(axis=0)
    gcols = (g2 @ _kernel_matrix(w).T).reshape(bsz, length, k, c_in)
    pad = (k - 1) // 2
    gxp = np.zeros((bsz, length + 2 * pad, c_in), dtype=grad_out.dtype)
    for j in range(k):
        gxp[:, j:j + length, :] += gcols[:, :, j, :]
    return gxp[:, pad:pad + length, :], np.ascontiguousarray(gw), gb


# -- batch normalization -----------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      epsilon=1e-3, momentum=0.99, train=True):
    """Normalize per feature (last axis) over all leading axes.

    In training mode the running statistics are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    Returns ``(y, cache)``.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm features {x.shape[-1]} != {gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    if train:
        n = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] < 2 or n < 2:
            raise DegenerateBatch("batch normalization needs batch size >= 2 in training mode")
        mean = x.mean(axis=axes)
        xc = x - mean
        xc2 = xc.reshape(-1, x.shape[-1])
        var = np.einsum("ij,ij->j", xc2, xc2) / n
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    xhat = (xc if train else x - mean) * inv_std
    y = xhat * gamma
    y += beta
    return y, (xhat, inv_std, gamma, train)


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, train = cache
    axes = tuple(range(grad_out.ndim - 1))
    g_gamma = (grad_out * xhat).sum(axis=axes)
    g_beta = grad_out.sum(axis=axes)
    if not train:
        return grad_out * (gamma * inv_std), g_gamma, g_beta
    n = grad_out.size // grad_out.shape[-1]
    gx = (gamma * inv_std / n) * (n * grad_out - g_beta - xhat * g_gamma)
    return gx, g_gamma, g_beta


# -- pooling -----------------------------------------------------------------

def maxpool1d_forward(x, pool):
    """Non-overlapping max pooling with stride ``pool``.

    A trailing remainder shorter than ``pool`` is dropped. Returns
    ``(y, argmax)`` where ``argmax`` is the winning offset inside each
    window (first one on ties).
    """
    if pool < 1 or pool > x.shape[1]:
        raise ShapeError(f"pool size {pool} invalid for length {x.shape[1]}")
    bsz, length, c = x.shape
    lo = length // pool
    xr = x[:, :lo * pool, :].reshape(bsz, lo, pool, c)
    y = xr.max(axis=2)
    idx = np.zeros(y.shape, dtype=np.int8)
    found = np.zeros(y.shape, dtype=bool)
    for j in range(pool):
        hit = xr[:, :, j, :] == y
        hit &= ~found
        idx += hit.view(np.int8) * np.int8(j)
        found |= hit
    return y, idx


def maxpool1d_backward(grad_out, argmax, input_shape, pool):
    bsz, length, c = input_shape
    lo = grad_out.shape[1]
    gx = np.zeros(input_shape, dtype=grad_out.dtype)
    gr = gx[:, :lo * pool, :].reshape(bsz, lo, pool, c)
    for j in range(pool):
        gr[:, :, j, :] = grad_out * (argmax == j)
    return gx


# -- dense and activations ---------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(z, activation):
    if activation in (None, "none", "linear"):
        return z
    if activation == "relu":
        return relu(z)
    if activation == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(grad_out, z, y, activation):
    if activation in (None, "none", "linear"):
        return grad_out
    if activation == "relu":
        return grad_out * (z > 0)
    if activation == "sigmoid":
        return grad_out * y * (1.0 - y)
    raise ValueError(f"unknown activation {activation!r}")


def dense_forward(x, w, b, activation="none"):
    """``y = g(b + x @ w)`` with ``w`` stored as ``[in, out]``. Returns ``(y, z)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    z = x @ w + b
    return activate(z, activation), z


def dense_backward(grad_out, x, w, z, y, activation="none", l2=0.0):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} incompatible with dense output")
    gz = activation_backward(grad_out, z, y, activation)
    gw = x.T @ gz
    if l2:
        gw = gw + 2.0 * l2 * w
    return gz @ w.T, gw, gz.sum(axis=0)


# -- normalization, dropout --------------------------------------------------

def l2_normalize_forward(x):
    """Row-wise ``x / ||x||``; the squared norm is floored at 1e-12."""
    sq = (x * x).sum(axis=-1, keepdims=True)
    norm = np.sqrt(np.maximum(sq, L2_NORM_EPS))
    return x / norm, norm


def l2_normalize_backward(grad_out, y, norm):
    proj = (grad_out * y).sum(axis=-1, keepdims=True)
    return (grad_out - y * proj) / norm


def dropout_forward(x, rate, train, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout(x, rate, train, seed=0):
    return dropout_forward(x, rate, train, np.random.default_rng(seed))[0]
