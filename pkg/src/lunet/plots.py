"""Training curves as CSV data and small PGM line plots."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from lunet.errors import IoFailure, MalformedLog
from lunet.trainer import STEP_HEADER
from lunet.volume_io import write_raster

CURVE_HEADER = ["step", "loss", "iou"]


def read_step_log(path):
    """Parse a per-step training log into ``{column: float64 array}``."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if not rows or rows[0] != STEP_HEADER:
        raise MalformedLog(f"{path}: expected header {','.join(STEP_HEADER)}")
    body = rows[1:]
    if not body:
        raise MalformedLog(f"{path}: no steps logged")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise MalformedLog(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(STEP_HEADER):
        raise MalformedLog(f"{path}: ragged rows")
    return {name: data[:, i] for i, name in enumerate(STEP_HEADER)}


def line_plot(y, width=320, height=160, margin=8):
    """Render ``y`` against its index as a white polyline on black, with a
    grey frame. Returns float pixels in [0, 1]."""
    y = np.asarray(y, dtype=np.float64)
    img = np.zeros((height, width))
    img[margin - 1, margin - 1:width - margin + 1] = 0.5
    img[height - margin, margin - 1:width - margin + 1] = 0.5
    img[margin - 1:height - margin + 1, margin - 1] = 0.5
    img[margin - 1:height - margin + 1, width - margin] = 0.5
    if y.size == 0:
        return img
    lo, hi = float(y.min()), float(y.max())
    span = hi - lo if hi > lo else 1.0
    pw, ph = width - 2 * margin, height - 2 * margin
    xs = np.linspace(0, pw - 1, y.size) if y.size > 1 else np.array([0.0])
    ys = (ph - 1) * (1.0 - (y - lo) / span)
    # dense resampling along each segment draws a connected line
    n = max(2 * pw, 2 * y.size)
    t = np.linspace(0, y.size - 1, n)
    px = np.interp(t, np.arange(y.size), xs)
    py = np.interp(t, np.arange(y.size), ys)
    img[margin + np.rint(py).astype(int), margin + np.rint(px).astype(int)] = 1.0
    return img


def write_curves(log_path, out_dir):
    """Write ``curves.csv``, ``loss.pgm`` and ``iou.pgm``; returns their paths."""
    log = read_step_log(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "curves.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for s, l, i in zip(log["step"], log["loss"], log["iou"]):
            w.writerow([int(s), f"{l:.6f}", f"{i:.6f}"])
    paths = [csv_path]
    for name in ("loss", "iou"):
        p = out / f"{name}.pgm"
        write_raster(line_plot(log[name]), p)
        paths.append(p)
    return paths
