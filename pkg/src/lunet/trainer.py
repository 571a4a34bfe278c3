"""Loss, optimizer, training loop, logging and checkpoints."""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lunet.errors import (
    DimMismatch,
    DivergedLoss,
    EmptyTrainSplit,
    InvalidConfig,
    IoFailure,
    MalformedCheckpoint,
    ShapeMismatch,
    VersionMismatch,
)
from lunet.metrics import ConfusionAccumulator, compute, precision_recall

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    seed: int = 0
    threshold: float = 0.5

    def validate(self):
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidConfig("Adam betas must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs, batch_size and patience must be >= 1")


EPOCH_PRESETS = {"short": 10, "long": 50}


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def bce_loss(pred, target):
    """Mean binary cross-entropy over every element and its gradient w.r.t. ``pred``.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs. The gradient
    is evaluated at the clamped value but not zeroed outside the clamp, so a
    saturated wrong prediction still gets pushed back.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    p = np.clip(pred.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = target.astype(np.float64)
    n = p.size
    loss = -float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p))) / n
    grad = (p - y) / (p * (1.0 - p)) / n
    return loss, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place in ``params`` order.

    ``params`` and ``grads`` are matching sequences of ``(name, array)``.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for (name, p), (gname, g) in zip(params, grads, strict=True):
        if name != gname or p.shape != g.shape:
            raise ShapeMismatch(f"parameter {name} {p.shape} vs gradient {gname} {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        p -= update
    return params


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

STEP_HEADER = ["epoch", "step", "loss", "precision", "recall", "iou"]
EPOCH_HEADER = ["epoch", "train_loss", "val_loss", "val_mean_iou", "best"]


@dataclass(frozen=True)
class StepLog:
    epoch: int
    step: int
    loss: float
    precision: float
    recall: float
    iou: float


@dataclass(frozen=True)
class EpochSummary:
    epoch: int
    train_loss: float
    val_loss: float
    val_mean_iou: float
    best: bool


class CsvLogger:
    """Writes one row per optimizer step, and optionally one per epoch."""

    def __init__(self, step_path, epoch_path=None):
        self.step_path = Path(step_path)
        self.epoch_path = Path(epoch_path) if epoch_path else None
        self._open()

    def _open(self):
        try:
            self._step_fh = open(self.step_path, "w", newline="")
            self._epoch_fh = open(self.epoch_path, "w", newline="") if self.epoch_path else None
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self._step = csv.writer(self._step_fh, lineterminator="\n")
        self._step.writerow(STEP_HEADER)
        if self._epoch_fh:
            self._epoch = csv.writer(self._epoch_fh, lineterminator="\n")
            self._epoch.writerow(EPOCH_HEADER)

    def on_step(self, log: StepLog):
        self._step.writerow([log.epoch, log.step] + [f"{v:.6f}" for v in (log.loss, log.precision, log.recall, log.iou)])

    def on_epoch(self, s: EpochSummary):
        if self._epoch_fh:
            self._epoch.writerow([s.epoch] + [f"{v:.6f}" for v in (s.train_loss, s.val_loss, s.val_mean_iou)] + [int(s.best)])

    def close(self):
        self._step_fh.close()
        if self._epoch_fh:
            self._epoch_fh.close()


class HistorySink:
    """Keeps every log in memory."""

    def __init__(self):
        self.steps: list[StepLog] = []
        self.epochs: list[EpochSummary] = []

    def on_step(self, log):
        self.steps.append(log)

    def on_epoch(self, s):
        self.epochs.append(s)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LUNT"
CKPT_VERSION = 1


def save_checkpoint(model, path) -> None:
    """Parameters then buffers, in build order, as little-endian float32 records."""
    tensors = model.state_tensors()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_checkpoint(path):
    """Parse a checkpoint into ``[(name, float32 array), ...]``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise MalformedCheckpoint("bad magic or short header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    pos, out = 12, []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise MalformedCheckpoint("truncated record name")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(raw):
                raise MalformedCheckpoint(f"record {name!r} runs past end of file")
            out.append((name, np.frombuffer(raw, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(shape)))
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise MalformedCheckpoint(f"truncated checkpoint: {exc}") from exc
    if pos != len(raw):
        raise MalformedCheckpoint("trailing bytes after the last record")
    return out


def load_checkpoint(model, path):
    """Load a checkpoint into ``model`` (which must have the same architecture)."""
    records = read_checkpoint(path)
    expected = [(n, a.shape) for n, a in model.state_tensors()]
    got = [(n, a.shape) for n, a in records]
    if expected != got:
        raise MalformedCheckpoint("checkpoint tensors do not match the model architecture")
    model.load_state_tensors(records)
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def stack_pairs(pairs, hw=None):
    """(image, mask) SliceImage pairs -> float32 arrays of shape (N, 1, H, W)."""
    if not pairs:
        return np.zeros((0, 1) + tuple(hw or (0, 0)), np.float32), np.zeros((0, 1) + tuple(hw or (0, 0)), np.float32)
    x = np.stack([img.pixels for img, _ in pairs])[:, None]
    y = np.stack([msk.pixels for _, msk in pairs])[:, None]
    if hw is not None and tuple(x.shape[2:]) != tuple(hw):
        raise DimMismatch(f"images are {x.shape[2:]}, model expects {tuple(hw)}")
    return x.astype(np.float32), y.astype(np.float32)


def predict(model, x, batch_size=16):
    """Eval-mode probabilities for a stack of images."""
    outs = [model.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros_like(x)


def batch_metrics(prob, target, threshold):
    acc = ConfusionAccumulator().accumulate(prob > threshold, target > 0.5)
    p, r = precision_recall(acc)
    return p, r, compute(acc).mean_iou


def _snapshot(model):
    return [(n, a.copy()) for n, a in model.state_tensors()]


@dataclass
class TrainResult:
    model: object
    best_epoch: int
    best_val_iou: float
    epochs_run: int
    stopped_early: bool
    history: HistorySink


def train(model, dataset, cfg: TrainConfig, sinks=(), checkpoint_path=None) -> TrainResult:
    """Fit ``model`` on the dataset's train split with BCE and Adam.

    After every epoch the test split (or the train split if the dataset has
    no test items) is scored in eval mode. Training stops once validation
    loss has failed to improve by ``early_stop_min_delta`` for
    ``early_stop_patience`` epochs; the weights with the best validation mean
    IoU are restored before returning and, if ``checkpoint_path`` is given,
    written there whenever a new best is reached.
    """
    cfg.validate()
    hw = model.config.input_hw
    x, y = stack_pairs(dataset.train, hw)
    if len(x) == 0:
        raise EmptyTrainSplit("dataset has no training items")
    xv, yv = stack_pairs(dataset.test, hw)
    if len(xv) == 0:
        xv, yv = x, y
    history = HistorySink()
    sinks = list(sinks) + [history]
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    best_iou, best_state, best_epoch = -np.inf, None, 0
    best_val_loss, wait = np.inf, 0
    step = 0
    epoch = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            out = model.forward(xb, train=True)
            loss, grad = bce_loss(out, yb)
            if not np.isfinite(loss):
                raise DivergedLoss(f"loss became {loss} at step {step + 1}")
            model.backward(grad)
            adam_step(model.named_parameters(), model.named_grads(), adam, cfg.learning_rate,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            step += 1
            losses.append(loss)
            p, r, iou = batch_metrics(out, yb, cfg.threshold)
            log = StepLog(epoch, step, loss, p, r, iou)
            for s in sinks:
                s.on_step(log)
        val_prob = predict(model, xv)
        val_loss, _ = bce_loss(val_prob, yv)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"validation loss became {val_loss} in epoch {epoch}")
        val_iou = compute(ConfusionAccumulator().accumulate(val_prob > cfg.threshold, yv > 0.5)).mean_iou
        improved = val_iou > best_iou
        if improved:
            best_iou, best_state, best_epoch = val_iou, _snapshot(model), epoch
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        summary = EpochSummary(epoch, float(np.mean(losses)), val_loss, val_iou, improved)
        for s in sinks:
            if hasattr(s, "on_epoch"):
                s.on_epoch(summary)
        if val_loss < best_val_loss - cfg.early_stop_min_delta:
            best_val_loss, wait = val_loss, 0
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                stopped = True
                break
    if best_state is not None:
        model.load_state_tensors(best_state)
    model.reset_cache()
    return TrainResult(model, best_epoch, float(best_iou), epoch, stopped, history)


def config_dict(cfg: TrainConfig):
    return asdict(cfg)
