"""LinkNet-lite: a small residual encoder-decoder whose skip links add
encoder features to decoder outputs instead of concatenating them."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from lunet.errors import InvalidConfig, ShapeMismatch, StaleCache
from lunet.nn import functional as F
from lunet.nn.layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2x2,
    Layer,
    MaxPool2x2,
    Network,
    ReLU,
    Sequential,
    Sigmoid,
    conv_bn_relu,
)


@dataclass(frozen=True)
class LinkNetConfig:
    base_filters: int = 8
    depth: int = 4
    in_channels: int = 1
    out_channels: int = 1
    input_hw: tuple[int, int] = (128, 128)

    def validate(self):
        if self.base_filters < 1 or self.depth < 1:
            raise InvalidConfig(f"bad filter settings: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidConfig("channel counts must be positive")
        h, w = self.input_hw
        f = 2 ** self.depth
        if h < f or w < f or h % f or w % f:
            raise InvalidConfig(f"input {h}x{w} must be a positive multiple of {f}")

    def filters(self) -> list[int]:
        # channels double per encoder stage, as in the ResNet encoder it shrinks
        return [self.base_filters * 2**c for c in range(self.depth)]

    def to_dict(self):
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        return cls(**d)


class ResidualBlock(Layer):
    """relu(bn(conv(relu(bn(conv(x))))) + shortcut(x)).

    The shortcut is the identity when channel counts match and a 1x1 conv
    with batch norm otherwise.
    """

    def __init__(self, name, cin, cout, rng, dtype=np.float32):
        super().__init__(name)
        self.main = Sequential(
            f"{name}.main",
            conv_bn_relu(f"{name}.0", cin, cout, rng, dtype)
            + [Conv2d(f"{name}.1.conv", cout, cout, 3, rng, dtype), BatchNorm2d(f"{name}.1.bn", cout, dtype)],
        )
        self.proj = None
        if cin != cout:
            self.proj = Sequential(f"{name}.proj", [Conv2d(f"{name}.proj.conv", cin, cout, 1, rng, dtype),
                                                    BatchNorm2d(f"{name}.proj.bn", cout, dtype)])
        self.relu = ReLU(f"{name}.relu")

    def children(self):
        return [self.main] + ([self.proj] if self.proj is not None else []) + [self.relu]

    def forward(self, x, train=False):
        h = self.main.forward(x, train)
        s = self.proj.forward(x, train) if self.proj is not None else x
        return self.relu.forward(h + s, train)

    def backward(self, dout):
        d = self.relu.backward(dout)
        ds = self.proj.backward(d) if self.proj is not None else d
        return self.main.backward(d) + ds


class LinkNetLite(Network):
    """Residual encoder stages each followed by 2x2 max pooling; every decoder
    stage upsamples with a transposed conv, refines with a 3x3 conv and adds
    the encoder activation of the same resolution. A conv-BN-ReLU stage, a
    1x1 conv and a sigmoid form the head."""

    def __init__(self, config: LinkNetConfig, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        f = config.filters()
        dt = self.dtype
        self.encoders, self.pools = [], []
        cin = config.in_channels
        for c in range(config.depth):
            self.encoders.append(self._add(ResidualBlock(f"enc{c}", cin, f[c], rng, dt)))
            self.pools.append(self._add(MaxPool2x2(f"pool{c}")))
            cin = f[c]
        self.decoders = []
        for c in reversed(range(config.depth)):
            src = f[c] if c == config.depth - 1 else f[c + 1]
            self.decoders.append(self._add(Sequential(f"dec{c}", [
                ConvTranspose2x2(f"dec{c}.up", src, f[c], rng, dt),
                BatchNorm2d(f"dec{c}.up.bn", f[c], dt),
                ReLU(f"dec{c}.up.relu"),
            ] + conv_bn_relu(f"dec{c}.refine", f[c], f[c], rng, dt))))
        # normalizes the summed link features before the classifier
        self.final = self._add(Sequential("final", conv_bn_relu("final", f[0], f[0], rng, dt)))
        self.head = self._add(Conv2d("head", f[0], config.out_channels, 1, rng, dt))
        self.sigmoid = self._add(Sigmoid("sigmoid"))
        self._live = False

    def forward(self, x, train=False):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeMismatch(f"expected (N, {cfg.in_channels}, H, W), got {x.shape}")
        f = 2 ** cfg.depth
        if x.shape[2] % f or x.shape[3] % f or x.shape[2] == 0 or x.shape[3] == 0:
            raise ShapeMismatch(f"spatial dims {x.shape[2:]} must be multiples of {f}")
        if train:
            self.reset_cache()
        x = np.asarray(x, dtype=self.dtype)
        skips = []
        for enc, pool in zip(self.encoders, self.pools):
            x = enc.forward(x, train)
            skips.append(x)
            x = pool.forward(x, train)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec.forward(x, train) + skip
        x = self.final.forward(x, train)
        x = self.head.forward(x, train)
        out = self.sigmoid.forward(x, train)
        self._live = train
        return F.check_finite(out, "LinkNet output")

    def backward(self, dout):
        if not self._live:
            raise StaleCache("backward requires a preceding train-mode forward")
        dout = self.sigmoid.backward(np.asarray(dout, dtype=self.dtype))
        dout = self.head.backward(dout)
        dout = self.final.backward(dout)
        dskips = []
        for dec in reversed(self.decoders):
            # the addition sends the same gradient to the link and the decoder
            dskips.append(dout)
            dout = dec.backward(dout)
        for enc, pool, dskip in zip(reversed(self.encoders), reversed(self.pools), reversed(dskips)):
            dout = pool.backward(dout) + dskip
            dout = enc.backward(dout)
        self._live = False
        return dout


def build_linknet_lite(config: LinkNetConfig, seed: int = 0, dtype=np.float32) -> LinkNetLite:
    return LinkNetLite(config, seed=seed, dtype=dtype)
