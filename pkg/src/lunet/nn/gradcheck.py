"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def default_step(dtype) -> float:
    return 1e-7 if np.dtype(dtype) == np.float64 else 1e-2


def numeric_gradient(f, x, h=None, indices=None):
    """Gradient of the scalar ``f()`` w.r.t. the array ``x`` (perturbed in place).

    ``indices`` restricts the check to a subset of coordinates; the returned
    array is zero elsewhere. The step actually representable in ``x.dtype``
    is used as the denominator, which matters in float32.
    """
    h = default_step(x.dtype) if h is None else h
    grad = np.zeros(x.shape, dtype=np.float64)
    coords = np.ndindex(x.shape) if indices is None else indices
    for ix in coords:
        ix = tuple(ix)
        old = x[ix].copy()
        x[ix] = old + h
        hi = x[ix].astype(np.float64)
        fp = float(f())
        x[ix] = old - h
        lo = x[ix].astype(np.float64)
        fm = float(f())
        x[ix] = old
        grad[ix] = (fp - fm) / (hi - lo)
    return grad


def sample_indices(shape, k, rng):
    """Up to ``k`` distinct coordinates of an array of ``shape``."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in np.sort(flat)]


def weighted_sum(out, weights) -> float:
    return float(np.sum(out.astype(np.float64) * weights))


def check_network(net, x, rng, per_tensor=3, h=None):
    """Finite-difference check of a whole network under loss ``sum(out * G)``.

    ``G`` is a random weighting drawn from ``rng``. Up to ``per_tensor``
    coordinates of every parameter tensor and of the input are perturbed.
    Returns the norm-wise relative error over all sampled coordinates.
    """
    x = np.array(x, dtype=net.dtype)
    out = net.forward(x, train=True)
    weights = rng.standard_normal(out.shape)
    dx = net.backward(weights.astype(net.dtype))
    grads = dict(net.named_grads())

    def loss():
        return weighted_sum(net.forward(x, train=True), weights)

    analytic, numeric = [], []
    targets = [(name, p, grads[name]) for name, p in net.named_parameters()] + [("input", x, dx)]
    for _, arr, g in targets:
        idx = sample_indices(arr.shape, per_tensor, rng)
        num = numeric_gradient(loss, arr, h=h, indices=idx)
        for ix in idx:
            analytic.append(float(g[ix]))
            numeric.append(num[ix])
    net.reset_cache()
    return rel_error(analytic, numeric)
