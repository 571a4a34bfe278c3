"""Volumes, plane slices, rasters and dataset manifests.

Axis convention for slicing a volume indexed ``(i, j, k)``: transversal
slices fix ``i``, coronal slices fix ``j``, sagittal slices fix ``k``.
"""
from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lunet.errors import (
    DimMismatch,
    EmptyDataset,
    IoFailure,
    MalformedHeader,
    MalformedRaster,
    NonBinaryMask,
    TruncatedData,
    UnsupportedDtype,
)

NATIVE_MAGIC = b"LUV1"
_NATIVE_HEADER = struct.Struct("<4s3I3f2f")
BINARY_TOL = 1e-6


class PlaneLabel(str, enum.Enum):
    CORONAL = "coronal"
    SAGITTAL = "sagittal"
    TRANSVERSAL = "transversal"

    @property
    def axis(self) -> int:
        return PLANE_AXIS[self]


PLANE_AXIS = {PlaneLabel.TRANSVERSAL: 0, PlaneLabel.CORONAL: 1, PlaneLabel.SAGITTAL: 2}
PLANES = (PlaneLabel.CORONAL, PlaneLabel.SAGITTAL, PlaneLabel.TRANSVERSAL)

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise DimMismatch(f"volume must be 3D with positive dims, got {v.shape}")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "voxel_size_mm", tuple(float(s) for s in self.voxel_size_mm))
        if self.intensity_range is None:
            rng = (float(v.min()), float(v.max()))
        else:
            rng = (float(np.float32(self.intensity_range[0])), float(np.float32(self.intensity_range[1])))
            if v.min() < rng[0] or v.max() > rng[1]:
                raise MalformedHeader(f"voxels fall outside the declared range {rng}")
        object.__setattr__(self, "intensity_range", rng)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class SliceImage:
    pixels: np.ndarray
    plane: PlaneLabel | None = None
    source_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        p = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if p.ndim != 2 or min(p.shape) < 1:
            raise DimMismatch(f"slice must be a non-empty 2D array, got {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.all(np.isfinite(p))):
            raise ValueError("slice pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)
        if self.plane is not None:
            object.__setattr__(self, "plane", PlaneLabel(self.plane))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels) -> "SliceImage":
        return SliceImage(pixels, self.plane, self.source_id, self.slice_index)


@dataclass
class SliceDataset:
    items: list[tuple[SliceImage, SliceImage]]
    split: list[str]
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if len(self.items) != len(self.split):
            raise DimMismatch("one split tag per item required")

    def __len__(self):
        return len(self.items)

    def subset(self, tag):
        return [item for item, s in zip(self.items, self.split) if s == tag]

    @property
    def train(self):
        return self.subset(TRAIN)

    @property
    def test(self):
        return self.subset(TEST)


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------

def write_volume(vol: Volume, path) -> None:
    """Write the native little-endian ``LUV1`` format."""
    di, dj, dk = vol.dims
    header = _NATIVE_HEADER.pack(NATIVE_MAGIC, di, dj, dk, *vol.voxel_size_mm, *vol.intensity_range)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(vol.voxels.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _read_native(raw: bytes) -> Volume:
    if len(raw) < _NATIVE_HEADER.size:
        raise MalformedHeader("file shorter than the native header")
    magic, di, dj, dk, si, sj, sk, lo, hi = _NATIVE_HEADER.unpack_from(raw)
    if magic != NATIVE_MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    if min(di, dj, dk) < 1:
        raise MalformedHeader(f"non-positive dims {(di, dj, dk)}")
    if not (lo <= hi) or min(si, sj, sk) <= 0:
        raise MalformedHeader("inconsistent voxel size or intensity range")
    count = di * dj * dk
    payload = raw[_NATIVE_HEADER.size:]
    if len(payload) < 4 * count:
        raise TruncatedData(f"expected {4 * count} payload bytes, found {len(payload)}")
    if len(payload) > 4 * count:
        raise MalformedHeader("payload longer than the header dims allow")
    vox = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(di, dj, dk)
    return Volume(vox, (si, sj, sk), (lo, hi))


NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
_NIFTI_CODES = {v: k for k, v in NIFTI_DTYPES.items()}


def _read_nifti1(raw: bytes) -> Volume:
    if len(raw) < 348:
        raise MalformedHeader("file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == 348:
            break
    else:
        raise MalformedHeader("sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise MalformedHeader(f"unsupported NIfTI magic {raw[344:348]!r} (single-file n+1 only)")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, 108)
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d < 1 for d in dim[1:4]) or any(d != 1 for d in dim[4:ndim + 1]):
        raise MalformedHeader(f"only 3D volumes are supported, dim={dim}")
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype code {datatype}")
    dt = NIFTI_DTYPES[datatype].newbyteorder(endian)
    if bitpix != dt.itemsize * 8:
        raise MalformedHeader(f"bitpix {bitpix} does not match datatype {datatype}")
    offset = int(vox_offset)
    if offset < 348 or offset != vox_offset:
        raise MalformedHeader(f"bad vox_offset {vox_offset}")
    shape = tuple(int(d) for d in dim[1:4])
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedData(f"expected {nbytes} payload bytes after offset {offset}")
    data = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset)
    vox = data.reshape(shape, order="F").astype(np.float64)
    if slope != 0 and math.isfinite(slope):
        vox = vox * slope + inter
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return Volume(vox.astype(np.float32), spacing)


def read_volume(path, format: str = "native") -> Volume:
    """Read a volume in the native format or an uncompressed NIfTI-1 file.

    NIfTI intensities are mapped through ``scl_slope``/``scl_inter`` when a
    slope is set; voxel (i, j, k) is the file's (x, y, z).
    """
    raw = _read_bytes(path)
    fmt = format.lower()
    if fmt == "native":
        return _read_native(raw)
    if fmt in ("nifti1", "nifti", "nii"):
        return _read_nifti1(raw)
    raise ValueError(f"unknown volume format {format!r}")


def write_nifti1(vol: Volume, path, dtype="f4", slope: float = 0.0, inter: float = 0.0) -> None:
    """Minimal single-file NIfTI-1 writer (no extensions, identity orientation)."""
    dt = np.dtype(dtype)
    if dt not in _NIFTI_CODES:
        raise UnsupportedDtype(f"cannot write dtype {dt}")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODES[dt], dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.voxel_size_mm, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = b"n+1\x00"
    data = vol.voxels
    if slope:
        data = (data - inter) / slope
    if dt.kind in "iu":
        data = np.rint(data)
    payload = data.astype(dt.newbyteorder("<")).tobytes(order="F")
    try:
        Path(path).write_bytes(bytes(hdr) + payload)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# ---------------------------------------------------------------------------
# resampling and slicing
# ---------------------------------------------------------------------------

def _check_binary(a, what="mask"):
    if not np.all((np.abs(a) <= BINARY_TOL) | (np.abs(a - 1) <= BINARY_TOL)):
        raise NonBinaryMask(f"{what} has values outside {{0, 1}}")
    return (a > 0.5).astype(np.float32)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index for each destination index: ``floor(d * src / dst)``."""
    return (np.arange(dst, dtype=np.int64) * src) // dst


def resample_mask(mask: Volume, target: Volume) -> Volume:
    """Nearest-neighbour resample of a binary mask onto ``target``'s grid."""
    m = _check_binary(mask.voxels)
    idx = [nearest_indices(s, d) for s, d in zip(mask.dims, target.dims)]
    out = m[np.ix_(*idx)]
    return Volume(out, target.voxel_size_mm)


def normalize_slice(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.float32)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def extract_slices(vol: Volume, mask: Volume, plane, source_id: str = ""):
    """All (image, mask) slice pairs of one plane, images min-max normalized."""
    if vol.dims != mask.dims:
        raise DimMismatch(f"volume {vol.dims} vs mask {mask.dims}")
    plane = PlaneLabel(plane)
    m = _check_binary(mask.voxels)
    axis = plane.axis
    pairs = []
    for s in range(vol.dims[axis]):
        img = normalize_slice(np.take(vol.voxels, s, axis=axis))
        msk = np.take(m, s, axis=axis)
        pairs.append((SliceImage(img, plane, source_id, s), SliceImage(msk, plane, source_id, s)))
    return pairs


def resize_bilinear(img: SliceImage, out_h: int, out_w: int) -> SliceImage:
    """Corner-aligned bilinear resize (first and last samples hit the corners)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    a = img.pixels.astype(np.float64)
    h, w = a.shape

    def grid(n_in, n_out):
        pos = np.zeros(1) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, wy = grid(h, out_h)
    x0, x1, wx = grid(w, out_w)
    wy, wx = wy[:, None], wx[None, :]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    out = np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0)
    return img.with_pixels(out.astype(np.float32))


def resize_mask(mask: SliceImage, out_h: int, out_w: int) -> SliceImage:
    """Nearest-neighbour resize; a binary mask stays binary."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    ys = nearest_indices(mask.height, out_h)
    xs = nearest_indices(mask.width, out_w)
    return mask.with_pixels(mask.pixels[np.ix_(ys, xs)])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(items, fraction_test: float, seed: int, name: str = "") -> SliceDataset:
    """Tag ``round(fraction_test * N)`` items as test via a seeded shuffle."""
    if not 0.0 < fraction_test < 1.0:
        raise ValueError("fraction_test must be in (0, 1)")
    items = list(items)
    if not items:
        raise EmptyDataset("cannot split an empty dataset")
    n_test = round_half_up(fraction_test * len(items))
    perm = np.random.default_rng(seed).permutation(len(items))
    split = [TRAIN] * len(items)
    for i in perm[:n_test]:
        split[int(i)] = TEST
    return SliceDataset(items, split, seed, name)


# ---------------------------------------------------------------------------
# rasters (binary PGM) and manifests
# ---------------------------------------------------------------------------

def quantize(pixels) -> np.ndarray:
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_raster(img, path) -> None:
    """8-bit binary PGM (P5, maxval 255); pixel p is stored as round(p * 255)."""
    pixels = img.pixels if isinstance(img, SliceImage) else np.asarray(img)
    if pixels.ndim != 2:
        raise MalformedRaster("raster must be 2D")
    if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
        raise ValueError("raster pixels must lie in [0, 1]")
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(quantize(pixels).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _pgm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedRaster("unexpected end of PGM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the payload
    return tokens, pos + 1


def read_raster(path, plane=None, source_id: str = "", slice_index: int = 0) -> SliceImage:
    raw = _read_bytes(path)
    tokens, offset = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise MalformedRaster(f"not a binary PGM: {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedRaster("non-numeric PGM header field") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise MalformedRaster(f"unsupported PGM geometry {w}x{h} maxval {maxval}")
    payload = raw[offset:offset + w * h]
    if len(payload) != w * h:
        raise MalformedRaster("PGM payload shorter than width * height")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float32) / np.float32(255.0)
    return SliceImage(pixels, plane, source_id, slice_index)


MANIFEST_COMMENT = "# axes: transversal=i coronal=j sagittal=k; columns: source_id plane slice_index image_path mask_path split"


@dataclass(frozen=True)
class ManifestRow:
    source_id: str
    plane: PlaneLabel
    slice_index: int
    image_path: str
    mask_path: str
    split: str = TRAIN


def write_manifest(rows, path) -> None:
    """Tab-separated, one row per item; paths are stored relative to the manifest."""
    base = Path(path).resolve().parent
    lines = [MANIFEST_COMMENT]
    for r in rows:
        img = os.path.relpath(Path(r.image_path).resolve(), base)
        msk = os.path.relpath(Path(r.mask_path).resolve(), base)
        lines.append("\t".join([r.source_id, PlaneLabel(r.plane).value, str(r.slice_index), img, msk, r.split]))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_manifest(path) -> list[ManifestRow]:
    base = Path(path).resolve().parent
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6 or parts[5] not in (TRAIN, TEST):
            raise MalformedHeader(f"{path}:{n}: expected 6 tab-separated fields")
        sid, plane, idx, img, msk, split = parts
        try:
            rows.append(ManifestRow(sid, PlaneLabel(plane), int(idx), str(base / img), str(base / msk), split))
        except ValueError as exc:
            raise MalformedHeader(f"{path}:{n}: {exc}") from exc
    return rows


def load_dataset(path, name: str = "") -> SliceDataset:
    """Read every raster a manifest points at; split tags come from the manifest."""
    rows = read_manifest(path)
    items, split = [], []
    for r in rows:
        img = read_raster(r.image_path, r.plane, r.source_id, r.slice_index)
        msk = read_raster(r.mask_path, r.plane, r.source_id, r.slice_index)
        if img.pixels.shape != msk.pixels.shape:
            raise DimMismatch(f"{r.image_path}: image and mask sizes differ")
        _check_binary(msk.pixels)
        items.append((img, msk))
        split.append(r.split)
    return SliceDataset(items, split, name=name or Path(path).stem)
