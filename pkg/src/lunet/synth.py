"""Synthetic head volumes with ellipsoidal bright lesions and exact masks."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from lunet.errors import InvalidSpec
from lunet.volume_io import Volume, write_volume


@dataclass(frozen=True)
class SyntheticSpec:
    n_volumes: int = 3
    dims: tuple[int, int, int] = (32, 32, 32)
    tumors: tuple[int, int] = (1, 2)
    axes: tuple[int, int] = (3, 6)
    contrast: float = 0.3
    noise_sigma: float = 0.04
    seed: int = 0
    brain_intensity: float = 0.35
    skull_intensity: float = 0.9
    skull_thickness: float = 2.0

    def validate(self):
        if self.n_volumes < 1:
            raise InvalidSpec("n_volumes must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidSpec(f"bad dims {self.dims}")
        lo, hi = self.tumors
        if lo < 0 or hi < lo:
            raise InvalidSpec(f"bad tumor count range {self.tumors}")
        amin, amax = self.axes
        if amin < 1 or amax < amin:
            raise InvalidSpec(f"bad ellipsoid axis range {self.axes}")
        if 2 * amax + 1 > min(self.dims):
            raise InvalidSpec("largest ellipsoid does not fit inside the volume")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if not self.contrast > self.noise_sigma or self.contrast <= 0:
            raise InvalidSpec("contrast must be positive and exceed the noise sigma")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[int, int, int]
    axes: tuple[int, int, int]

    def mask(self, dims):
        i, j, k = np.ogrid[: dims[0], : dims[1], : dims[2]]
        (ci, cj, ck), (ai, aj, ak) = self.center, self.axes
        return ((i - ci) / ai) ** 2 + ((j - cj) / aj) ** 2 + ((k - ck) / ak) ** 2 <= 1.0


def _head(dims, thickness):
    """Boolean head and brain regions: nested axis-aligned ellipsoids."""
    c = [(d - 1) / 2 for d in dims]
    outer = [0.47 * d for d in dims]
    inner = [max(r - thickness, 1.0) for r in outer]
    i, j, k = np.ogrid[: dims[0], : dims[1], : dims[2]]
    r_out = ((i - c[0]) / outer[0]) ** 2 + ((j - c[1]) / outer[1]) ** 2 + ((k - c[2]) / outer[2]) ** 2
    r_in = ((i - c[0]) / inner[0]) ** 2 + ((j - c[1]) / inner[1]) ** 2 + ((k - c[2]) / inner[2]) ** 2
    return r_out <= 1.0, r_in <= 1.0, r_in


def _place(rng, spec, r_in):
    dims = spec.dims
    amin, amax = spec.axes
    for _ in range(1000):
        axes = tuple(int(a) for a in rng.integers(amin, amax + 1, size=3))
        center = tuple(int(rng.integers(a, d - a)) for a, d in zip(axes, dims))
        # keep the lesion centre well inside the brain
        if r_in[center] <= 0.45:
            return Ellipsoid(center, axes)
    raise InvalidSpec("could not place a lesion inside the brain region")


def generate_volume(spec: SyntheticSpec, index: int, noise=True):
    """Return ``(image Volume, mask Volume, [Ellipsoid, ...])`` for one subject."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    dims = tuple(spec.dims)
    head, brain, r_in = _head(dims, spec.skull_thickness)
    img = np.zeros(dims)
    img[head] = spec.skull_intensity
    # smooth low-frequency bias field across the brain
    i, j, k = np.meshgrid(*(np.linspace(0, np.pi, d) for d in dims), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=3)
    field = 0.05 * (np.sin(i + phase[0]) * np.cos(j + phase[1]) + np.sin(k + phase[2]))
    img[brain] = spec.brain_intensity + field[brain]
    mask = np.zeros(dims, dtype=bool)
    lesions = []
    n = int(rng.integers(spec.tumors[0], spec.tumors[1] + 1))
    for _ in range(n):
        e = _place(rng, spec, r_in)
        m = e.mask(dims)
        mask |= m
        lesions.append(e)
    img[mask] = spec.brain_intensity + spec.contrast + field[mask]
    if noise and spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=dims)
    return Volume(img.astype(np.float32)), Volume(mask.astype(np.float32)), lesions


def generate(spec: SyntheticSpec, noise=True):
    return [generate_volume(spec, v, noise) for v in range(spec.n_volumes)]


def write_synthetic(spec: SyntheticSpec, out_dir):
    """Write ``subjNN.luv`` images and ``subjNN_mask.luv`` masks; returns the path pairs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for v, (img, mask, _) in enumerate(generate(spec)):
        ip, mp = out / f"subj{v:02d}.luv", out / f"subj{v:02d}_mask.luv"
        write_volume(img, ip)
        write_volume(mask, mp)
        paths.append((ip, mp))
    return paths
