"""Volume pairs -> per-plane and full slice datasets."""
from __future__ import annotations

from lunet.volume_io import (
    PLANES,
    PlaneLabel,
    SliceDataset,
    extract_slices,
    resample_mask,
    resize_bilinear,
    resize_mask,
    split_dataset,
)

FULL = "full"
DATASET_NAMES = ("coronal", "sagittal", "transversal", FULL)


def slice_subjects(subjects, planes=PLANES, exclude_ids=()):
    """Slice every ``(source_id, volume, mask)`` subject along each plane.

    Masks whose grid differs from the scan are resampled onto it first.
    Returns ``{plane_name: [(image, mask), ...]}`` in subject order.
    """
    excluded = {str(e) for e in exclude_ids}
    out = {PlaneLabel(p).value: [] for p in planes}
    for sid, vol, mask in subjects:
        if str(sid) in excluded:
            continue
        if mask.dims != vol.dims:
            mask = resample_mask(mask, vol)
        for p in planes:
            out[PlaneLabel(p).value].extend(extract_slices(vol, mask, p, str(sid)))
    return out


def build_datasets(per_plane, seed, fraction_test=0.10):
    """One independently split dataset per plane plus the union of all planes."""
    datasets = {}
    full = []
    for name, pairs in per_plane.items():
        full.extend(pairs)
        if pairs:
            datasets[name] = split_dataset(pairs, fraction_test, seed, name)
    if full:
        datasets[FULL] = split_dataset(full, fraction_test, seed, FULL)
    return datasets


def resize_pair(img, mask, hw):
    h, w = hw
    if img.pixels.shape == (h, w):
        return img, mask
    return resize_bilinear(img, h, w), resize_mask(mask, h, w)


def resize_dataset(ds: SliceDataset, hw) -> SliceDataset:
    """Copy of ``ds`` with every pair resized to ``hw`` (bilinear image, nearest mask)."""
    return SliceDataset([resize_pair(i, m, hw) for i, m in ds.items], list(ds.split), ds.seed, ds.name)
