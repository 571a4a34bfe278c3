import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lunet.errors import (
    DimMismatch,
    EmptyDataset,
    MalformedHeader,
    MalformedRaster,
    NonBinaryMask,
    TruncatedData,
    UnsupportedDtype,
)
from lunet.volume_io import (
    PLANES,
    TEST,
    TRAIN,
    ManifestRow,
    PlaneLabel,
    SliceImage,
    Volume,
    extract_slices,
    load_dataset,
    read_manifest,
    read_raster,
    read_volume,
    resample_mask,
    resize_bilinear,
    resize_mask,
    split_dataset,
    write_manifest,
    write_nifti1,
    write_raster,
    write_volume,
)


def ellipsoid(n=64, axes=(20, 14, 10)):
    i, j, k = np.meshgrid(*(np.arange(n) - n / 2 + 0.5 for _ in range(3)), indexing="ij")
    inside = (i / axes[0]) ** 2 + (j / axes[1]) ** 2 + (k / axes[2]) ** 2 <= 1
    return inside.astype(np.float32)


# ---------------------------------------------------------------- volume files

def test_native_file_order(tmp_path):
    p = tmp_path / "v.luv"
    header = struct.pack("<4s3I3f2f", b"LUV1", 2, 2, 2, 1, 1, 1, 0, 7)
    p.write_bytes(header + np.arange(8, dtype="<f4").tobytes())
    vol = read_volume(p, "native")
    assert vol.dims == (2, 2, 2)
    assert vol.voxels[1, 1, 1] == 7
    assert vol.voxels[0, 0, 1] == 1 and vol.voxels[1, 0, 0] == 4


def test_native_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    vox = ellipsoid() * 0.8 + rng.normal(0, 0.05, (64, 64, 64)).astype(np.float32)
    vol = Volume(vox, (1.0, 0.5, 2.0))
    write_volume(vol, tmp_path / "e.luv")
    back = read_volume(tmp_path / "e.luv")
    assert back.voxels.tobytes() == vol.voxels.tobytes()
    assert back.voxel_size_mm == (1.0, 0.5, 2.0)
    assert back.intensity_range == vol.intensity_range


def test_native_errors(tmp_path):
    p = tmp_path / "bad.luv"
    p.write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(MalformedHeader):
        read_volume(p)
    good = tmp_path / "good.luv"
    write_volume(Volume(np.zeros((3, 3, 3))), good)
    p.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(TruncatedData):
        read_volume(p)


@pytest.mark.parametrize("dtype", ["u1", "i2", "f4"])
def test_nifti_round_trip(tmp_path, dtype):
    vox = np.rint(ellipsoid(16, (6, 5, 4)) * 100).astype(np.float32)
    vox[0, 1, 2] = 3  # breaks axis symmetry
    write_nifti1(Volume(vox, (0.9, 0.9, 1.2)), tmp_path / "v.nii", dtype=dtype)
    back = read_volume(tmp_path / "v.nii", "nifti1")
    assert back.voxels.tobytes() == vox.tobytes()
    np.testing.assert_allclose(back.voxel_size_mm, (0.9, 0.9, 1.2), rtol=1e-6)


def test_nifti_scaling_applied(tmp_path):
    vox = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_nifti1(Volume(vox * 0.5 + 10), tmp_path / "s.nii", dtype="i2", slope=0.5, inter=10)
    back = read_volume(tmp_path / "s.nii", "nifti1")
    np.testing.assert_allclose(back.voxels, vox * 0.5 + 10)


def test_nifti_complex_rejected(tmp_path):
    p = tmp_path / "c.nii"
    write_nifti1(Volume(np.zeros((2, 2, 2))), p)
    raw = bytearray(p.read_bytes())
    struct.pack_into("<2h", raw, 70, 32, 64)  # complex64
    p.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDtype):
        read_volume(p, "nifti1")


def test_nifti_header_errors(tmp_path):
    p = tmp_path / "h.nii"
    write_nifti1(Volume(np.zeros((2, 2, 2))), p)
    raw = bytearray(p.read_bytes())
    bad_magic = bytearray(raw)
    bad_magic[344:348] = b"ni1\x00"
    p.write_bytes(bytes(bad_magic))
    with pytest.raises(MalformedHeader):
        read_volume(p, "nifti1")
    p.write_bytes(bytes(raw[:-3]))
    with pytest.raises(TruncatedData):
        read_volume(p, "nifti1")
    bad_dims = bytearray(raw)
    struct.pack_into("<h", bad_dims, 42, 0)
    p.write_bytes(bytes(bad_dims))
    with pytest.raises(MalformedHeader):
        read_volume(p, "nifti1")


# ---------------------------------------------------------------- resampling

def test_resample_29_to_180_slices():
    rng = np.random.default_rng(1)
    src = Volume((rng.random((29, 6, 5)) > 0.7).astype(np.float32))
    target = Volume(np.zeros((180, 6, 5)))
    out = resample_mask(src, target)
    assert out.dims == (180, 6, 5)
    for d in range(180):
        np.testing.assert_array_equal(out.voxels[d], src.voxels[(d * 29) // 180])


def test_resample_identity_and_idempotent():
    rng = np.random.default_rng(2)
    m = Volume((rng.random((5, 4, 3)) > 0.5).astype(np.float32))
    out = resample_mask(m, m)
    np.testing.assert_array_equal(out.voxels, m.voxels)
    np.testing.assert_array_equal(resample_mask(out, out).voxels, out.voxels)


def test_resample_single_voxel_upsample():
    m = np.zeros((2, 2, 2), np.float32)
    m[1, 0, 1] = 1
    out = resample_mask(Volume(m), Volume(np.zeros((4, 4, 4))))
    assert out.voxels.sum() == 8
    assert set(np.unique(out.voxels)) <= {0.0, 1.0}


def test_resample_rejects_non_binary():
    with pytest.raises(NonBinaryMask):
        resample_mask(Volume(np.full((2, 2, 2), 0.5)), Volume(np.zeros((2, 2, 2))))


# ---------------------------------------------------------------- slicing

def test_extract_counts_per_plane():
    vol = Volume(ellipsoid() + 0.1)
    mask = Volume(ellipsoid())
    total = 0
    for plane in PLANES:
        pairs = extract_slices(vol, mask, plane, "p1")
        assert len(pairs) == 64
        total += len(pairs)
    assert total == 192


def test_extract_axis_convention_and_metadata():
    vox = np.zeros((3, 4, 5), np.float32)
    vol, mask = Volume(vox), Volume(vox)
    assert len(extract_slices(vol, mask, PlaneLabel.TRANSVERSAL)) == 3
    assert len(extract_slices(vol, mask, PlaneLabel.CORONAL)) == 4
    sag = extract_slices(vol, mask, "sagittal", "abc")
    assert len(sag) == 5 and sag[0][0].pixels.shape == (3, 4)
    img, msk = sag[2]
    assert (img.plane, img.source_id, img.slice_index) == (msk.plane, msk.source_id, msk.slice_index) == (PlaneLabel.SAGITTAL, "abc", 2)


def test_extract_many_volumes_total():
    # dataset cardinality is the sum of axis lengths over volumes and planes
    dims = [(18, 12, 12)] * 13
    total = 0
    for d in dims:
        v = Volume(np.zeros(d))
        for plane in PLANES:
            total += len(extract_slices(v, v, plane))
    assert total == 13 * (18 + 12 + 12)


def test_extract_normalizes_each_slice():
    rng = np.random.default_rng(3)
    vox = rng.random((4, 6, 6)).astype(np.float32) * 50 - 10
    vox[2] = 7.0  # constant transversal slice
    pairs = extract_slices(Volume(vox), Volume(np.zeros_like(vox)), PlaneLabel.TRANSVERSAL)
    for s, (img, msk) in enumerate(pairs):
        if s == 2:
            assert not img.pixels.any()
        else:
            assert img.pixels.min() == 0.0 and img.pixels.max() == 1.0
        assert not msk.pixels.any()


def test_extract_dim_mismatch():
    with pytest.raises(DimMismatch):
        extract_slices(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3))), PlaneLabel.CORONAL)


# ---------------------------------------------------------------- resize

def test_resize_range_and_constant():
    rng = np.random.default_rng(4)
    img = SliceImage(rng.random((256, 256)))
    small = resize_bilinear(img, 128, 128)
    assert small.pixels.shape == (128, 128)
    assert 0.0 <= small.pixels.min() and small.pixels.max() <= 1.0
    const = resize_bilinear(SliceImage(np.full((7, 9), 0.3)), 16, 5)
    np.testing.assert_allclose(const.pixels, 0.3, atol=1e-7)


def test_resize_corner_aligned_weights():
    out = resize_bilinear(SliceImage(np.array([[0.0, 1.0], [0.0, 1.0]])), 4, 4)
    for row in out.pixels:
        np.testing.assert_allclose(row, [0.0, 1 / 3, 2 / 3, 1.0], atol=1e-7)


def test_resize_mask_stays_binary():
    rng = np.random.default_rng(5)
    m = SliceImage((rng.random((30, 20)) > 0.5).astype(np.float32))
    for shape in ((128, 128), (7, 3)):
        out = resize_mask(m, *shape)
        assert out.pixels.shape == shape
        assert set(np.unique(out.pixels)) <= {0.0, 1.0}


# ---------------------------------------------------------------- split

def test_split_sizes():
    assert len(split_dataset(range(846), 0.10, 0).test) == 85
    assert len(split_dataset(range(10), 0.10, 0).test) == 1
    assert len(split_dataset(range(5), 0.10, 0).test) == 1  # 0.5 rounds up


def test_split_deterministic():
    a = split_dataset(range(50), 0.1, 42)
    b = split_dataset(range(50), 0.1, 42)
    assert a.split == b.split
    assert a.split != split_dataset(range(50), 0.1, 43).split


def test_split_errors():
    with pytest.raises(EmptyDataset):
        split_dataset([], 0.1, 0)
    with pytest.raises(ValueError):
        split_dataset(range(3), 1.0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.floats(0.01, 0.99), st.integers(0, 2**64 - 1))
def test_split_is_a_partition(n, frac, seed):
    ds = split_dataset(range(n), frac, seed)
    train, test = ds.train, ds.test
    assert sorted(train + test) == list(range(n))
    assert not set(train) & set(test)
    assert len(test) == int(np.floor(frac * n + 0.5))


# ---------------------------------------------------------------- rasters

def test_raster_zero_payload(tmp_path):
    p = tmp_path / "z.pgm"
    write_raster(SliceImage(np.zeros((3, 5))), p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n5 3\n255\n")
    assert raw[len(b"P5\n5 3\n255\n"):] == bytes(15)


def test_raster_one_is_255(tmp_path):
    p = tmp_path / "o.pgm"
    write_raster(SliceImage(np.ones((1, 1))), p)
    assert p.read_bytes()[-1] == 255


def test_raster_round_trip_error(tmp_path):
    rng = np.random.default_rng(6)
    img = SliceImage(rng.random((33, 17)))
    write_raster(img, tmp_path / "r.pgm")
    back = read_raster(tmp_path / "r.pgm")
    assert np.abs(back.pixels - img.pixels).max() <= 1 / 510 + 1e-7


def test_raster_reads_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_raster(p).pixels, [[0.0, 1.0]])


def test_raster_malformed(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(MalformedRaster):
        read_raster(p)
    p.write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(MalformedRaster):
        read_raster(p)


# ---------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path):
    rows = []
    for s in range(3):
        img, msk = tmp_path / f"i{s}.pgm", tmp_path / f"m{s}.pgm"
        write_raster(SliceImage(np.full((4, 4), s / 3)), img)
        write_raster(SliceImage(np.eye(4)), msk)
        rows.append(ManifestRow("p7", PlaneLabel.CORONAL, s, str(img), str(msk), TEST if s == 1 else TRAIN))
    write_manifest(rows, tmp_path / "coronal.tsv")
    text = (tmp_path / "coronal.tsv").read_text().splitlines()
    assert text[1].split("\t") == ["p7", "coronal", "0", "i0.pgm", "m0.pgm", "train"]
    back = read_manifest(tmp_path / "coronal.tsv")
    assert [(r.source_id, r.plane, r.slice_index, r.split) for r in back] == [
        (r.source_id, r.plane, r.slice_index, r.split) for r in rows
    ]
    ds = load_dataset(tmp_path / "coronal.tsv")
    assert len(ds) == 3 and len(ds.test) == 1
    assert ds.items[2][0].slice_index == 2
