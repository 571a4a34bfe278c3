"""Forward/backward pairs for every layer the segmentation networks use.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``. Arrays are NCHW; the dtype of the input is the
dtype of the computation, so the same code runs in float32 for training and
float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lunet.errors import IndexOutOfRange, NumericalFault, OddSpatialDim, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _check_4d(x, name="x"):
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be 4D (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, pad):
    n, c, h, w = x.shape
    if pad:
        # cheaper than np.pad, which dominates the cost on small maps
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:-pad, pad:-pad] = x
        x = xp
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    # column order (c, ky, kx) matches w.reshape(cout, -1)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x, w, b, pad=1):
    """Stride-1 cross-correlation with zero padding.

    Inputs:
    - x: (N, Cin, H, W)
    - w: (Cout, Cin, kh, kw)
    - b: (Cout,)
    - pad: zero padding on each spatial border; 1 keeps a 3x3 conv same-size

    Returns ``(out, cache)`` with out of shape (N, Cout, H', W').
    """
    _check_4d(x)
    if w.ndim != 4 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
    n = x.shape[0]
    cout, _, kh, kw = w.shape
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input")
    cols, ho, wo = _im2col(x, kh, kw, pad)
    wmat = w.reshape(cout, -1)
    out = cols @ wmat.T
    out += b
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, w, pad)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)`` for :func:`conv2d_forward`."""
    x_shape, cols, w, pad = cache
    n, c, h, wd = x_shape
    cout, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    if dout.shape != (n, cout, ho, wo) or cols.shape[0] != n * ho * wo:
        raise ShapeMismatch(f"conv2d_backward: dout {dout.shape} does not match cache")
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(dout.dtype)
    dcols = (dmat @ w.reshape(cout, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + ho, kx:kx + wo] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d_forward_loops(x, w, b, pad=1):
    """Reference convolution by explicit loops over output channel and taps.

    Accumulates in the same (cin, ky, kx) order as the patch-matrix path in
    float64. Slow; used as a test oracle only.
    """
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for o in range(cout):
        acc = np.zeros((n, ho, wo))
        for c in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    acc += float(w[o, c, ky, kx]) * xp[:, c, ky:ky + ho, kx:kx + wo]
        out[:, o] = acc + float(b[o])
    return out.astype(x.dtype)


def tconv2x2_forward(x, w, b):
    """Transposed convolution, kernel 2x2, stride 2: (N,Cin,H,W) -> (N,Cout,2H,2W).

    ``w`` has shape (Cin, Cout, 2, 2); each input pixel scatters a 2x2 patch
    and the patches never overlap.
    """
    _check_4d(x)
    if w.shape[0] != x.shape[1] or w.shape[2:] != (2, 2) or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"tconv2x2: x {x.shape}, w {w.shape}, b {b.shape}")
    n, cin, h, wd = x.shape
    cout = w.shape[1]
    xm = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    y = (xm @ w.reshape(cin, cout * 4)).reshape(n, h, wd, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * wd)
    out += b[None, :, None, None]
    return out, (x.shape, xm, w)


def tconv2x2_backward(dout, cache):
    x_shape, xm, w = cache
    n, cin, h, wd = x_shape
    cout = w.shape[1]
    if dout.shape != (n, cout, 2 * h, 2 * wd):
        raise ShapeMismatch(f"tconv2x2_backward: dout {dout.shape} does not match cache")
    dy = dout.reshape(n, cout, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
    dx = (dy @ w.reshape(cin, cout * 4).T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
    dw = (xm.T @ dy).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3), dtype=np.float64).astype(dout.dtype)
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, eps=BN_EPS):
    """Spatial batch normalization over (N, H, W) per channel.

    In train mode the batch statistics are used and returned in the cache
    (``cache["mean"]``, ``cache["var"]``) so the caller can update its running
    buffers; in eval mode the running buffers are used. Statistics are
    accumulated in float64.
    """
    _check_4d(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    shape = (1, c, 1, 1)
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 1:
            raise NumericalFault("batch norm variance undefined for a single element per channel")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        xc = x64 - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std.reshape(shape)
        out = (xhat * gamma.reshape(shape) + beta.reshape(shape)).astype(x.dtype)
        cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mean": mean, "var": var, "train": True}
    else:
        inv_std = 1.0 / np.sqrt(running_var.astype(np.float64) + eps)
        scale = gamma * inv_std
        shift = beta - running_mean * scale
        out = (x * scale.reshape(shape).astype(x.dtype) + shift.reshape(shape).astype(x.dtype))
        cache = {"inv_std": inv_std, "gamma": gamma, "x": x, "mean": running_mean, "train": False}
    return out, cache


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    gamma = cache["gamma"]
    shape = (1, -1, 1, 1)
    d64 = dout.astype(np.float64)
    dbeta = d64.sum(axis=(0, 2, 3))
    if cache["train"]:
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dgamma = (d64 * xhat).sum(axis=(0, 2, 3))
        dxhat = d64 * gamma.reshape(shape)
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        )
    else:
        # eval mode is an affine map of x with the running stats held constant
        inv_std = cache["inv_std"]
        xhat = (cache["x"].astype(np.float64) - cache["mean"].reshape(shape)) * inv_std.reshape(shape)
        dgamma = (d64 * xhat).sum(axis=(0, 2, 3))
        dx = d64 * (gamma * inv_std).reshape(shape)
    dt = dout.dtype
    return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    # subgradient at exactly 0 is 0
    return dout * (cache > 0)


def sigmoid_forward(x):
    """Logistic function, evaluated so that large |x| never overflows.

    The result saturates at the smallest positive / largest sub-1 value of the
    dtype, so it stays strictly inside (0, 1).
    """
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    tiny = np.finfo(out.dtype).smallest_subnormal
    np.clip(out, tiny, np.nextafter(out.dtype.type(1), out.dtype.type(0)), out=out)
    return out, out


def sigmoid_backward(dout, cache):
    s = cache
    return dout * s * (1 - s)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling that remembers where each max came from.

    Returns ``(out, indices)``; ``indices`` holds, for every output element,
    the flat offset of its argmax into ``x`` (row-major over the whole
    tensor). Ties go to the smallest flat offset.
    """
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"max pooling needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    a = win.argmax(axis=-1)
    out = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]
    plane = (np.arange(n * c).reshape(n, c, 1, 1) * h) * w
    rows = 2 * np.arange(h2).reshape(1, 1, h2, 1) + a // 2
    cols = 2 * np.arange(w2).reshape(1, 1, 1, w2) + a % 2
    indices = plane + rows * w + cols
    return out, indices


def maxpool2x2_backward(dout, indices, x_shape):
    dx = np.zeros(int(np.prod(x_shape)), dtype=dout.dtype)
    dx[indices.ravel()] = dout.ravel()
    return dx.reshape(x_shape)


def maxunpool2x2(x, indices, out_shape):
    """Scatter ``x`` back to the positions recorded by a max pool; zeros elsewhere."""
    if x.shape != indices.shape:
        raise ShapeMismatch(f"maxunpool: values {x.shape} vs indices {indices.shape}")
    size = int(np.prod(out_shape))
    flat = indices.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= size):
        raise IndexOutOfRange(f"pooling index outside a tensor of {size} elements")
    out = np.zeros(size, dtype=x.dtype)
    out[flat] = x.ravel()
    return out.reshape(out_shape)


def maxunpool2x2_backward(dout, indices):
    return dout.ravel()[indices.ravel()].reshape(indices.shape)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat: {a.shape} and {b.shape} differ outside the channel axis")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(dout, split):
    return dout[:, :split], dout[:, split:]


def check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericalFault(f"non-finite values in {where}")
    return x
