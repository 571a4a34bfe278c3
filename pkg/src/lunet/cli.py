"""Command-line entry point: ``lunet <command> [options]``.

Every command resolves its full configuration, writes ``run.json`` into its
output directory before doing any work, and rewrites it with the artifact
list when done. ``lunet replay --run out/run.json --out other`` re-executes a
recorded run.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from lunet import __version__
from lunet.baselines.classical import (
    FIXED,
    OTSU,
    ClusterConfig,
    ThresholdConfig,
    fuzzy_cmeans_segment,
    kmeans_segment,
    threshold_segment,
)
from lunet.baselines.linknet import LinkNetConfig, LinkNetLite
from lunet.errors import DataError, InvalidConfig, IoFailure, NumericalFault
from lunet.metrics import FOREGROUND_ONLY, REPORT_HEADER, TWO_CLASS, evaluate_masks, report_row
from lunet.pipeline import FULL, build_datasets, resize_dataset, slice_subjects
from lunet.plots import write_curves
from lunet.synth import SyntheticSpec, write_synthetic
from lunet.trainer import EPOCH_PRESETS, CsvLogger, TrainConfig, load_checkpoint, predict, save_checkpoint, train
from lunet.unet import MAX_UNPOOL, TRANSPOSED_CONV, UNet, UNetConfig
from lunet.volume_io import (
    PLANES,
    TEST,
    TRAIN,
    ManifestRow,
    PlaneLabel,
    SliceImage,
    load_dataset,
    read_manifest,
    read_raster,
    read_volume,
    resize_bilinear,
    resize_mask,
    write_manifest,
    write_raster,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATASET_TITLES = {"coronal": "Coronal", "sagittal": "Sagittal", "transversal": "Transversal", FULL: "Full"}
METHODS = ("thresholding", "kmeans", "fcm", "linknet", "unet")
METHOD_TITLES = {
    "thresholding": "Thresholding",
    "kmeans": "K-Means",
    "fcm": "Fuzzy C",
    "linknet": "LinkNet",
    "unet": "U-Net",
}
# argument names holding filesystem paths; stored absolute in run manifests
PATH_ARGS = {"out", "data_dir", "volumes", "masks", "manifest", "checkpoint", "model_config", "image",
             "pred_dir", "log", "run", "config"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _epochs(s):
    if str(s) in EPOCH_PRESETS:
        return EPOCH_PRESETS[str(s)]
    n = int(s)
    if n < 1:
        raise argparse.ArgumentTypeError("epochs must be >= 1")
    return n


def _int_tuple(s):
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).replace(",", " ").split())


def _name_list(s):
    if isinstance(s, (list, tuple)):
        return [str(v) for v in s]
    return [v for v in str(s).replace(",", " ").split() if v]


def _add_train_options(p, model_choice=True):
    if model_choice:
        p.add_argument("--model", choices=("unet", "linknet"), default="unet")
    p.add_argument("--epochs", type=_epochs, default=TrainConfig.epochs, help="count, or 'short'/'long'")
    p.add_argument("--base-filters", type=int, default=None, help="default 16 (U-Net) or 8 (LinkNet)")
    p.add_argument("--filter-step", type=int, default=UNetConfig.filter_step)
    p.add_argument("--upsample", choices=(TRANSPOSED_CONV, MAX_UNPOOL), default=TRANSPOSED_CONV)
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--patience", type=int, default=TrainConfig.early_stop_patience)
    p.add_argument("--min-delta", type=float, default=TrainConfig.early_stop_min_delta)


def build_parser():
    parser = argparse.ArgumentParser(prog="lunet", description="Brain-lesion slice segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"lunet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat 'key = value' file; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory")
        subs[name] = p
        return p

    p = add("synth", "generate synthetic head volumes with lesion masks")
    d = SyntheticSpec()
    p.add_argument("--n-volumes", type=int, default=d.n_volumes)
    p.add_argument("--dims", type=_int_tuple, default=d.dims, help="e.g. 32,32,32")
    p.add_argument("--tumors", type=_int_tuple, default=d.tumors, help="min,max lesions per volume")
    p.add_argument("--axes", type=_int_tuple, default=d.axes, help="min,max ellipsoid semi-axis (voxels)")
    p.add_argument("--contrast", type=float, default=d.contrast)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)

    p = add("extract", "slice volume/mask pairs into per-plane datasets")
    p.add_argument("--data-dir", help="directory of NAME.luv / NAME_mask.luv pairs")
    p.add_argument("--volumes", nargs="+", default=None)
    p.add_argument("--masks", nargs="+", default=None)
    p.add_argument("--ids", nargs="+", default=None, help="source ids (default: volume file stems)")
    p.add_argument("--format", choices=("native", "nifti1"), default="native")
    p.add_argument("--plane", choices=[*(pl.value for pl in PLANES), FULL], default=FULL)
    p.add_argument("--exclude-ids", type=_name_list, default=[])
    p.add_argument("--test-fraction", type=float, default=0.10)

    p = add("train", "train a U-Net or LinkNet-lite on a dataset manifest")
    p.add_argument("--manifest")
    _add_train_options(p)

    p = add("predict", "write binary masks (and overlays) for a manifest or one image")
    p.add_argument("--checkpoint")
    p.add_argument("--model-config", help="default: model.json beside the checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--image")
    p.add_argument("--split", choices=(TEST, TRAIN, "all"), default=TEST)
    p.add_argument("--overlay", action="store_true")

    p = add("evaluate", "score predicted masks against manifests")
    p.add_argument("--pred-dir")
    p.add_argument("--manifest", nargs="+", default=None)
    p.add_argument("--split", choices=(TEST, TRAIN, "all"), default=TEST)
    p.add_argument("--class-mode", choices=(TWO_CLASS, FOREGROUND_ONLY), default=TWO_CLASS)
    p.add_argument("--method-name", default="U-Net")

    p = add("benchmark", "score every method on every dataset of an extract directory")
    p.add_argument("--data-dir")
    p.add_argument("--datasets", type=_name_list, default=list(DATASET_TITLES))
    p.add_argument("--methods", type=_name_list, default=list(METHODS))
    p.add_argument("--class-mode", choices=(TWO_CLASS, FOREGROUND_ONLY), default=TWO_CLASS)
    p.add_argument("--threshold-mode", choices=(OTSU, FIXED), default=OTSU)
    p.add_argument("--threshold-level", type=float, default=0.5)
    _add_train_options(p, model_choice=False)

    p = add("curves", "loss/IoU-per-step data and PGM plots from a training log")
    p.add_argument("--log")

    p = sub.add_parser("replay", help="re-run a recorded run.json")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="output directory (default: the recorded one)")
    subs["replay"] = p
    return parser, subs


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(sp, values):
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in values.items():
        a = actions.get(key)
        if a is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        try:
            if a.nargs in ("+", "*"):
                val = [a.type(v) if a.type else v for v in _name_list(raw)]
            elif a.const is True:
                val = raw.lower() in ("1", "true", "yes", "on")
            else:
                val = a.type(raw) if a.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if a.choices is not None and val not in a.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {list(a.choices)}")
        defaults[key] = val
    sp.set_defaults(**defaults)


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a command is required")
    if getattr(args, "config", None):
        _apply_config(subs[args.command], read_config_file(args.config))
        args = parser.parse_args(argv)
    for k, v in vars(args).items():
        if k in PATH_ARGS and v is not None:
            setattr(args, k, [str(Path(p).resolve()) for p in v] if isinstance(v, list) else str(Path(v).resolve()))
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError(f"{args.command}: missing " + ", ".join("--" + n.replace("_", "-") for n in missing))


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

class RunManifest:
    def __init__(self, command, args, config):
        self.data = {
            "command": command,
            "version": __version__,
            "seed": getattr(args, "seed", None),
            "args": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()},
            "config": config,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished_at": None,
            "artifacts": [],
        }

    def write(self, out_dir):
        path = Path(out_dir) / "run.json"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        return path

    def finish(self, out_dir, artifacts):
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["artifacts"] = [str(a) for a in artifacts]
        return self.write(out_dir)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        early_stop_patience=args.patience,
        early_stop_min_delta=args.min_delta,
        seed=args.seed,
    )


def model_config(kind, args):
    hw = (args.input_size, args.input_size)
    if kind == "unet":
        base = args.base_filters if args.base_filters is not None else UNetConfig.base_filters
        cfg = UNetConfig(base_filters=base, filter_step=args.filter_step, upsample_mode=args.upsample, input_hw=hw)
    else:
        base = args.base_filters if args.base_filters is not None else LinkNetConfig.base_filters
        cfg = LinkNetConfig(base_filters=base, input_hw=hw)
    cfg.validate()
    return cfg


def build_model(kind, cfg, seed):
    return UNet(cfg, seed=seed) if kind == "unet" else LinkNetLite(cfg, seed=seed)


def load_model(checkpoint, config_path=None):
    config_path = Path(config_path) if config_path else Path(checkpoint).with_name("model.json")
    try:
        meta = json.loads(config_path.read_text())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"{config_path}: {exc}") from exc
    kind = meta["model"]
    cfg = (UNetConfig if kind == "unet" else LinkNetConfig).from_dict(meta["config"])
    return load_checkpoint(build_model(kind, cfg, 0), checkpoint)


def predict_masks(model, images, threshold=0.5):
    """Binary masks at each image's own resolution (nearest-neighbour resize back)."""
    h, w = model.config.input_hw
    out = []
    for img in images:
        x = resize_bilinear(img, h, w).pixels if img.pixels.shape != (h, w) else img.pixels
        prob = predict(model, x[None, None].astype(np.float32))[0, 0]
        mask = SliceImage((prob > threshold).astype(np.float32), img.plane, img.source_id, img.slice_index)
        if img.pixels.shape != (h, w):
            mask = resize_mask(mask, *img.pixels.shape)
        out.append(mask)
    return out


def overlay(img: SliceImage, mask: SliceImage) -> np.ndarray:
    """Image with the mask's inner boundary burned in at 1.0."""
    m = mask.pixels > 0.5
    inner = m.copy()
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    out = img.pixels.astype(np.float32).copy()
    out[m & ~inner] = 1.0
    return out


def _selected(ds, split):
    if split == "all":
        return ds.items
    return ds.train if split == TRAIN else ds.test


def _slice_name(img: SliceImage):
    return f"{img.source_id}_{PlaneLabel(img.plane).value}_{img.slice_index:03d}"


def _write_rows(path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands: each has a config resolver and a runner returning artifact paths
# ---------------------------------------------------------------------------

def synth_spec(args):
    return SyntheticSpec(
        n_volumes=args.n_volumes, dims=tuple(args.dims), tumors=tuple(args.tumors), axes=tuple(args.axes),
        contrast=args.contrast, noise_sigma=args.noise_sigma, seed=args.seed,
    )


def cfg_synth(args):
    _require(args, "out")
    spec = synth_spec(args)
    spec.validate()
    return {"synthetic": spec.to_dict()}


def run_synth(args):
    paths = write_synthetic(synth_spec(args), args.out)
    for ip, mp in paths:
        print(f"{ip.name}\t{mp.name}")
    return [p for pair in paths for p in pair]


def _extract_inputs(args):
    if args.data_dir:
        vols = sorted(p for p in Path(args.data_dir).glob("*.luv") if not p.stem.endswith("_mask"))
        masks = [p.with_name(p.stem + "_mask.luv") for p in vols]
    else:
        _require(args, "volumes", "masks")
        vols, masks = [Path(v) for v in args.volumes], [Path(m) for m in args.masks]
    if len(vols) != len(masks):
        raise UsageError("--volumes and --masks must have the same length")
    ids = args.ids or [v.stem for v in vols]
    if len(ids) != len(vols):
        raise UsageError("--ids must match the number of volumes")
    return vols, masks, ids


def cfg_extract(args):
    _require(args, "out")
    vols, masks, ids = _extract_inputs(args)
    if not 0 <= args.test_fraction < 1:
        raise UsageError("--test-fraction must lie in [0, 1)")
    return {"volumes": [str(v) for v in vols], "masks": [str(m) for m in masks], "ids": ids,
            "planes": _planes(args.plane), "exclude_ids": list(args.exclude_ids),
            "test_fraction": args.test_fraction, "format": args.format}


def _planes(plane):
    return [p.value for p in PLANES] if plane == FULL else [plane]


def run_extract(args):
    vols, masks, ids = _extract_inputs(args)
    excluded = set(args.exclude_ids)
    subjects = []
    for sid, vp, mp in zip(ids, vols, masks):
        if sid in excluded:
            continue
        subjects.append((sid, read_volume(vp, args.format), read_volume(mp, args.format)))
    per_plane = slice_subjects(subjects, [PlaneLabel(p) for p in _planes(args.plane)])
    datasets = build_datasets(per_plane, args.seed, args.test_fraction)
    out = Path(args.out)
    artifacts = []
    for plane, pairs in per_plane.items():
        d = out / plane
        d.mkdir(parents=True, exist_ok=True)
        for img, msk in pairs:
            name = _slice_name(img)
            write_raster(img, d / f"{name}.pgm")
            write_raster(msk, d / f"{name}_mask.pgm")
    for name, ds in datasets.items():
        rows = [
            ManifestRow(img.source_id, img.plane, img.slice_index,
                        str(out / PlaneLabel(img.plane).value / f"{_slice_name(img)}.pgm"),
                        str(out / PlaneLabel(img.plane).value / f"{_slice_name(img)}_mask.pgm"), split)
            for (img, _), split in zip(ds.items, ds.split)
        ]
        path = out / f"{name}.tsv"
        write_manifest(rows, path)
        artifacts.append(path)
        print(f"{name}\t{len(ds.items)} slices\t{len(ds.train)} train\t{len(ds.test)} test")
    return artifacts


def cfg_train(args):
    _require(args, "manifest", "out")
    return {"model": args.model, "model_config": model_config(args.model, args).to_dict(),
            "train": train_config(args).__dict__}


def run_train(args):
    cfg = model_config(args.model, args)
    tcfg = train_config(args)
    ds = resize_dataset(load_dataset(args.manifest), cfg.input_hw)
    model = build_model(args.model, cfg, args.seed)
    out = Path(args.out)
    meta = out / "model.json"
    meta.write_text(json.dumps({"model": args.model, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    log = CsvLogger(out / "steps.csv", out / "epochs.csv")
    try:
        res = train(model, ds, tcfg, sinks=[log], checkpoint_path=out / "best.ckpt")
    finally:
        log.close()
    if not (out / "best.ckpt").exists():
        save_checkpoint(res.model, out / "best.ckpt")
    print(f"best epoch {res.best_epoch}\tval mean IoU {100 * res.best_val_iou:.1f}\tepochs run {res.epochs_run}")
    return [meta, out / "best.ckpt", out / "steps.csv", out / "epochs.csv"]


def cfg_predict(args):
    _require(args, "checkpoint", "out")
    if bool(args.manifest) == bool(args.image):
        raise UsageError("predict needs exactly one of --manifest or --image")
    return {"checkpoint": args.checkpoint, "split": args.split, "overlay": args.overlay, "threshold": 0.5}


def run_predict(args):
    model = load_model(args.checkpoint, args.model_config)
    if args.image:
        images = [read_raster(args.image, source_id=Path(args.image).stem)]
        names = [Path(args.image).stem]
    else:
        images = [img for img, _ in _selected(load_dataset(args.manifest), args.split)]
        names = [_slice_name(img) for img in images]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for img, name, mask in zip(images, names, predict_masks(model, images)):
        write_raster(mask, out / f"{name}.pgm")
        artifacts.append(out / f"{name}.pgm")
        if args.overlay:
            write_raster(overlay(img, mask), out / f"{name}_overlay.pgm")
            artifacts.append(out / f"{name}_overlay.pgm")
    print(f"{len(images)} masks written to {out}")
    return artifacts


def cfg_evaluate(args):
    _require(args, "pred_dir", "manifest", "out")
    return {"split": args.split, "class_mode": args.class_mode, "method_name": args.method_name}


def _dataset_title(path):
    stem = Path(path).stem
    return DATASET_TITLES.get(stem, stem)


def run_evaluate(args):
    rows = []
    for mpath in args.manifest:
        ds = load_dataset(mpath)
        pairs = _selected(ds, args.split)
        preds = [read_raster(Path(args.pred_dir) / f"{_slice_name(img)}.pgm") for img, _ in pairs]
        report = evaluate_masks(preds, [m for _, m in pairs], args.class_mode)
        rows.append(report_row(_dataset_title(mpath), args.method_name, report))
    path = Path(args.out) / "metrics.csv"
    _write_rows(path, REPORT_HEADER, rows)
    for r in rows:
        print("\t".join(map(str, r)))
    return [path]


def _benchmark_datasets(args):
    unknown = [d for d in args.datasets if d not in DATASET_TITLES]
    if unknown:
        raise UsageError(f"unknown datasets {unknown}")
    names = [d for d in DATASET_TITLES if d in args.datasets]
    present = [d for d in names if (Path(args.data_dir) / f"{d}.tsv").exists()]
    if not present:
        raise UsageError(f"no dataset manifests found in {args.data_dir}")
    return present


def cfg_benchmark(args):
    _require(args, "data_dir", "out")
    bad = [m for m in args.methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}")
    cfg = {"datasets": _benchmark_datasets(args), "methods": [m for m in METHODS if m in args.methods],
           "class_mode": args.class_mode, "threshold": _threshold_cfg(args).__dict__,
           "cluster": ClusterConfig(seed=args.seed).__dict__}
    if {"unet", "linknet"} & set(args.methods):
        cfg["train"] = train_config(args).__dict__
        for kind in ("unet", "linknet"):
            if kind in args.methods:
                cfg[kind] = model_config(kind, args).to_dict()
    return cfg


def _threshold_cfg(args):
    return ThresholdConfig(mode=args.threshold_mode, level=args.threshold_level)


def benchmark_rows(datasets, methods, args, log=print):
    """``[(dataset title, method title, MetricsReport)]`` in table order."""
    tcfg = _threshold_cfg(args)
    ccfg = ClusterConfig(seed=args.seed)
    classical = {
        "thresholding": lambda img: threshold_segment(img, tcfg).mask,
        "kmeans": lambda img: kmeans_segment(img, ccfg).mask,
        "fcm": lambda img: fuzzy_cmeans_segment(img, ccfg).mask,
    }
    out = []
    for name, ds in datasets:
        test = ds.test if ds.test else ds.train
        images, truths = [i for i, _ in test], [m for _, m in test]
        for method in METHODS:
            if method not in methods:
                continue
            if method in classical:
                preds = [classical[method](img) for img in images]
            else:
                cfg = model_config(method, args)
                model = build_model(method, cfg, args.seed)
                t0 = time.perf_counter()
                train(model, resize_dataset(ds, cfg.input_hw), train_config(args))
                log(f"  trained {METHOD_TITLES[method]} on {DATASET_TITLES[name]} in {time.perf_counter() - t0:.0f}s")
                preds = predict_masks(model, images)
            report = evaluate_masks(preds, truths, args.class_mode)
            out.append((DATASET_TITLES[name], METHOD_TITLES[method], report))
            log("\t".join(map(str, report_row(DATASET_TITLES[name], METHOD_TITLES[method], report))))
    return out


def run_benchmark(args):
    cfg = cfg_benchmark(args)
    datasets = [(d, load_dataset(Path(args.data_dir) / f"{d}.tsv", d)) for d in cfg["datasets"]]
    rows = benchmark_rows(datasets, cfg["methods"], args)
    path = Path(args.out) / "benchmark.csv"
    _write_rows(path, REPORT_HEADER, [report_row(d, m, r) for d, m, r in rows])
    return [path]


def cfg_curves(args):
    _require(args, "log", "out")
    return {"log": args.log}


def run_curves(args):
    return write_curves(args.log, args.out)


COMMANDS = {
    "synth": (cfg_synth, run_synth),
    "extract": (cfg_extract, run_extract),
    "train": (cfg_train, run_train),
    "predict": (cfg_predict, run_predict),
    "evaluate": (cfg_evaluate, run_evaluate),
    "benchmark": (cfg_benchmark, run_benchmark),
    "curves": (cfg_curves, run_curves),
}


def dispatch(args, replayed_from=None):
    resolve, run = COMMANDS[args.command]
    try:
        config = resolve(args)
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from exc
    manifest = RunManifest(args.command, args, config)
    if replayed_from:
        manifest.data["replayed_from"] = str(replayed_from)
    manifest.write(args.out)
    artifacts = run(args)
    manifest.finish(args.out, artifacts)
    return EXIT_OK


def replay(args):
    try:
        recorded = json.loads(Path(args.run).read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"{args.run}: not a run manifest ({exc})") from exc
    if recorded.get("command") not in COMMANDS:
        raise UsageError(f"{args.run}: unknown command {recorded.get('command')!r}")
    ns = argparse.Namespace(**recorded["args"])
    if args.out:
        ns.out = str(Path(args.out).resolve())
    return dispatch(ns, replayed_from=args.run)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        if args.command == "replay":
            return replay(args)
        return dispatch(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"lunet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"lunet: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFault as exc:
        print(f"lunet: numerical fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
