"""Stateful layer wrappers around :mod:`lunet.nn.functional`.

A layer owns its parameters, the gradient slot for each parameter, any
running buffers, and the cache of its last train-mode forward. Networks are
fixed DAGs whose ``backward`` is written out by hand, so the tape only has to
check that layers are unwound in exact reverse forward order.
"""
from __future__ import annotations

import numpy as np

from lunet.errors import StaleCache
from lunet.nn import functional as F


class GradTape:
    """Forward-order record of layers that hold a live cache."""

    def __init__(self):
        self.entries: list[str] = []

    def record(self, name: str) -> None:
        self.entries.append(name)

    def pop(self, name: str) -> None:
        if not self.entries:
            raise StaleCache(f"backward through {name!r} with an empty tape")
        if self.entries[-1] != name:
            raise StaleCache(f"backward through {name!r} but last forward was {self.entries[-1]!r}")
        self.entries.pop()

    def clear(self) -> None:
        self.entries.clear()


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.tape: GradTape | None = None
        self._cache = None

    def forward(self, x, train=False):
        out, cache = self._forward(x, train)
        if train:
            self._cache = cache
            if self.tape is not None:
                self.tape.record(self.name)
        return out

    def backward(self, dout):
        if self._cache is None:
            raise StaleCache(f"{self.name}: backward without a retained train-mode forward")
        if self.tape is not None:
            self.tape.pop(self.name)
        cache, self._cache = self._cache, None
        return self._backward(dout, cache)

    def _forward(self, x, train):
        raise NotImplementedError

    def _backward(self, dout, cache):
        raise NotImplementedError

    def _set_grads(self, **grads):
        for k, g in grads.items():
            self.grads[k] = g


class Conv2d(Layer):
    def __init__(self, name, cin, cout, kernel, rng, dtype=np.float32):
        super().__init__(name)
        self.pad = kernel // 2
        shape = (cout, cin, kernel, kernel)
        self.params["weight"] = he_uniform(rng, shape, cin * kernel * kernel, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)

    def _forward(self, x, train):
        return F.conv2d_forward(x, self.params["weight"], self.params["bias"], self.pad)

    def _backward(self, dout, cache):
        dx, dw, db = F.conv2d_backward(dout, cache)
        self._set_grads(weight=dw, bias=db)
        return dx


class ConvTranspose2x2(Layer):
    def __init__(self, name, cin, cout, rng, dtype=np.float32):
        super().__init__(name)
        # every output pixel receives exactly one tap from each input channel
        self.params["weight"] = he_uniform(rng, (cin, cout, 2, 2), cin, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)

    def _forward(self, x, train):
        return F.tconv2x2_forward(x, self.params["weight"], self.params["bias"])

    def _backward(self, dout, cache):
        dx, dw, db = F.tconv2x2_backward(dout, cache)
        self._set_grads(weight=dw, bias=db)
        return dx


class BatchNorm2d(Layer):
    def __init__(self, name, channels, dtype=np.float32, momentum=F.BN_MOMENTUM):
        super().__init__(name)
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def _forward(self, x, train):
        out, cache = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train,
        )
        if train:
            m = self.momentum
            dt = self.buffers["running_mean"].dtype
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * cache["mean"]).astype(dt)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * cache["var"]).astype(dt)
        return out, cache

    def _backward(self, dout, cache):
        dx, dgamma, dbeta = F.batchnorm_backward(dout, cache)
        self._set_grads(gamma=dgamma, beta=dbeta)
        return dx


class ReLU(Layer):
    def _forward(self, x, train):
        return F.relu_forward(x)

    def _backward(self, dout, cache):
        return F.relu_backward(dout, cache)


class Sigmoid(Layer):
    def _forward(self, x, train):
        return F.sigmoid_forward(x)

    def _backward(self, dout, cache):
        return F.sigmoid_backward(dout, cache)


class MaxPool2x2(Layer):
    """Max pooling; ``indices`` of the most recent forward stay readable for an unpool."""

    def __init__(self, name):
        super().__init__(name)
        self.indices = None
        self.in_shape = None

    def _forward(self, x, train):
        out, idx = F.maxpool2x2_forward(x)
        self.indices, self.in_shape = idx, x.shape
        return out, (idx, x.shape)

    def _backward(self, dout, cache):
        idx, shape = cache
        return F.maxpool2x2_backward(dout, idx, shape)


class MaxUnpool2x2(Layer):
    def __init__(self, name, pool: MaxPool2x2):
        super().__init__(name)
        self.pool = pool

    def _forward(self, x, train):
        idx = self.pool.indices
        if idx is None:
            raise StaleCache(f"{self.name}: paired pool {self.pool.name!r} has not run")
        return F.maxunpool2x2(x, idx, self.pool.in_shape), idx

    def _backward(self, dout, cache):
        return F.maxunpool2x2_backward(dout, cache)


class Sequential(Layer):
    """Chain of layers; parameters are exposed under ``<child>.<param>`` names."""

    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def children(self):
        return self.layers


def conv_bn_relu(name, cin, cout, rng, dtype):
    return [
        Conv2d(f"{name}.conv", cin, cout, 3, rng, dtype),
        BatchNorm2d(f"{name}.bn", cout, dtype),
        ReLU(f"{name}.relu"),
    ]


def conv_block(name, cin, cout, rng, dtype=np.float32):
    """Two rounds of conv3x3 -> batch norm -> ReLU."""
    return Sequential(name, conv_bn_relu(f"{name}.0", cin, cout, rng, dtype) + conv_bn_relu(f"{name}.1", cout, cout, rng, dtype))


def iter_leaves(layer):
    if hasattr(layer, "children"):
        for child in layer.children():
            yield from iter_leaves(child)
    else:
        yield layer


class Network:
    """Shared plumbing for hand-scheduled networks.

    Subclasses register their top-level layers in build order via
    :meth:`_add`; parameter and buffer order (and thus checkpoint and Adam
    order) is that build order.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tape = GradTape()
        self._top: list[Layer] = []

    def _add(self, layer):
        for leaf in iter_leaves(layer):
            leaf.tape = self.tape
        self._top.append(layer)
        return layer

    def leaves(self):
        for layer in self._top:
            yield from iter_leaves(layer)

    def named_parameters(self):
        return [(f"{leaf.name}.{k}", v) for leaf in self.leaves() for k, v in leaf.params.items()]

    def named_buffers(self):
        return [(f"{leaf.name}.{k}", v) for leaf in self.leaves() for k, v in leaf.buffers.items()]

    def named_grads(self):
        out = []
        for leaf in self.leaves():
            for k, v in leaf.params.items():
                g = leaf.grads.get(k)
                out.append((f"{leaf.name}.{k}", np.zeros_like(v) if g is None else g))
        return out

    @property
    def param_count(self) -> int:
        return int(sum(v.size for _, v in self.named_parameters()))

    def state_tensors(self):
        """Parameters then buffers, in build order."""
        return self.named_parameters() + self.named_buffers()

    def load_state_tensors(self, tensors):
        index = {}
        for leaf in self.leaves():
            for k in leaf.params:
                index[f"{leaf.name}.{k}"] = (leaf.params, k)
            for k in leaf.buffers:
                index[f"{leaf.name}.{k}"] = (leaf.buffers, k)
        for name, arr in tensors:
            slot, key = index[name]
            if slot[key].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {slot[key].shape}")
            slot[key] = np.array(arr, dtype=self.dtype)

    def set_parameters(self, named):
        """Write back parameter arrays, e.g. after an optimizer step."""
        self.load_state_tensors(named)

    def zero_grads(self):
        for leaf in self.leaves():
            leaf.grads.clear()

    def reset_cache(self):
        for leaf in self.leaves():
            leaf._cache = None
        self.tape.clear()
