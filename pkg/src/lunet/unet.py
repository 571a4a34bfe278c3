"""Lightweight U-Net built from the hand-written layers in :mod:`lunet.nn`."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from lunet.errors import InvalidConfig, ShapeMismatch, StaleCache
from lunet.nn import functional as F
from lunet.nn.layers import (
    Conv2d,
    ConvTranspose2x2,
    MaxPool2x2,
    MaxUnpool2x2,
    Network,
    Sigmoid,
    conv_block,
)

TRANSPOSED_CONV = "tconv"
MAX_UNPOOL = "unpool"


@dataclass(frozen=True)
class UNetConfig:
    base_filters: int = 16
    filter_step: int = 16
    depth: int = 4
    in_channels: int = 1
    out_channels: int = 1
    upsample_mode: str = TRANSPOSED_CONV
    input_hw: tuple[int, int] = (128, 128)

    def validate(self):
        if self.base_filters < 1 or self.filter_step < 0 or self.depth < 1:
            raise InvalidConfig(f"bad filter settings: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidConfig("channel counts must be positive")
        if self.upsample_mode not in (TRANSPOSED_CONV, MAX_UNPOOL):
            raise InvalidConfig(f"unknown upsample mode {self.upsample_mode!r}")
        h, w = self.input_hw
        f = 2 ** self.depth
        if h < f or w < f or h % f or w % f:
            raise InvalidConfig(f"input {h}x{w} must be a positive multiple of {f}")

    def filters(self) -> list[int]:
        """Filter count per encoder block; the last entry is the bottleneck."""
        return [self.base_filters + self.filter_step * c for c in range(self.depth + 1)]

    def to_dict(self):
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_hw"] = tuple(d["input_hw"])
        return cls(**d)


def unet_param_count(cfg: UNetConfig) -> int:
    """Closed-form number of learnable scalars in :func:`build`."""
    f = cfg.filters()

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def block(cin, cout):
        # two convs, each followed by a BN with gamma and beta
        return conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout

    total = 0
    cin = cfg.in_channels
    for c in range(cfg.depth + 1):
        total += block(cin, f[c])
        cin = f[c]
    for c in reversed(range(cfg.depth)):
        if cfg.upsample_mode == TRANSPOSED_CONV:
            total += f[c + 1] * f[c] * 4 + f[c]
        else:
            total += conv(f[c + 1], f[c], 1)
        total += block(2 * f[c], f[c])
    total += conv(f[0], cfg.out_channels, 1)
    return total


class UNet(Network):
    """Encoder of ``depth`` conv blocks with 2x2 max pooling, a bottleneck
    block, and a mirrored decoder that upsamples, concatenates the matching
    encoder activation and applies another conv block. A 1x1 conv and a
    sigmoid produce the per-pixel foreground probability.

    In ``unpool`` mode each up-step first projects channels with a 1x1 conv
    so the values can be scattered back through the paired encoder pool's
    recorded argmax positions.
    """

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
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
            self.encoders.append(self._add(conv_block(f"enc{c}", cin, f[c], rng, dt)))
            self.pools.append(self._add(MaxPool2x2(f"pool{c}")))
            cin = f[c]
        self.bottleneck = self._add(conv_block("bottleneck", cin, f[config.depth], rng, dt))
        self.ups, self.unpools, self.decoders = [], [], []
        for c in reversed(range(config.depth)):
            if config.upsample_mode == TRANSPOSED_CONV:
                self.ups.append(self._add(ConvTranspose2x2(f"up{c}", f[c + 1], f[c], rng, dt)))
                self.unpools.append(None)
            else:
                self.ups.append(self._add(Conv2d(f"up{c}.proj", f[c + 1], f[c], 1, rng, dt)))
                self.unpools.append(self._add(MaxUnpool2x2(f"up{c}.unpool", self.pools[c])))
            self.decoders.append(self._add(conv_block(f"dec{c}", 2 * f[c], f[c], rng, dt)))
        self.head = self._add(Conv2d("head", f[0], config.out_channels, 1, rng, dt))
        self.sigmoid = self._add(Sigmoid("sigmoid"))
        self._skip_splits = None

    def forward(self, x, train=False):
        """Map (N, in_channels, H, W) to probabilities of shape (N, out_channels, H, W)."""
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
        x = self.bottleneck.forward(x, train)
        splits = []
        for up, unpool, dec, skip in zip(self.ups, self.unpools, self.decoders, reversed(skips)):
            x = up.forward(x, train)
            if unpool is not None:
                x = unpool.forward(x, train)
            x, split = F.concat_channels(x, skip)
            splits.append(split)
            x = dec.forward(x, train)
        x = self.head.forward(x, train)
        out = self.sigmoid.forward(x, train)
        self._skip_splits = splits if train else None
        return F.check_finite(out, "U-Net output")

    def backward(self, dout):
        """Backpropagate dLoss/dOutput; returns dLoss/dInput. Parameter
        gradients land in each layer's ``grads``."""
        if self._skip_splits is None:
            raise StaleCache("backward requires a preceding train-mode forward")
        dout = self.sigmoid.backward(np.asarray(dout, dtype=self.dtype))
        dout = self.head.backward(dout)
        dskips = []
        for up, unpool, dec, split in zip(
            reversed(self.ups), reversed(self.unpools), reversed(self.decoders), reversed(self._skip_splits)
        ):
            dout = dec.backward(dout)
            dout, dskip = F.concat_channels_backward(dout, split)
            dskips.append(dskip)
            if unpool is not None:
                dout = unpool.backward(dout)
            dout = up.backward(dout)
        dout = self.bottleneck.backward(dout)
        # dskips is ordered shallowest-first after the reversed walk
        for enc, pool, dskip in zip(reversed(self.encoders), reversed(self.pools), reversed(dskips)):
            dout = pool.backward(dout) + dskip
            dout = enc.backward(dout)
        self._skip_splits = None
        return dout


def build(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(config, seed=seed, dtype=dtype)
