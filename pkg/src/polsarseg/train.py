"""Training loop, SGD, gradient verification, and map prediction.

The loop is deterministic given the config seed in single-threaded use: batch
order is derived from (seed, epoch), parameter init from the model seed, and
no other randomness exists.  The per-epoch log record is machine readable;
wall_seconds is the only field expected to vary between identical runs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .data import IGNORE_INDEX, LabelMap, PolSarTile, preprocess
from .engine import Tensor, backward, cross_entropy_loss, no_grad
from .errors import ConfigError, TrainingDivergedError
from .metrics import accumulate_confusion, evaluate_confusion
from .models import Model, forward_segment, save_checkpoint

PRECISIONS = ("float32", "float64")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    ignore_index: int = IGNORE_INDEX

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


class SGD:
    """Momentum SGD with coupled weight decay: v <- mu v + g + wd w; w -= lr v."""

    def __init__(self, named_params, learning_rate, momentum=0.9, weight_decay=0.0):
        self.named_params = list(named_params)
        self.lr = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.named_params}

    def zero_grad(self) -> None:
        for _, t in self.named_params:
            t.grad = None

    def step(self) -> None:
        for name, t in self.named_params:
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data = t.data - self.lr * v


@dataclass
class TrainResult:
    records: list
    best_epoch: int
    best_fwiou: float
    best_checkpoint: str = None
    final_checkpoint: str = None


def _as_batch(samples, indices, dtype):
    xs = np.stack([samples[i][0] for i in indices]).astype(dtype, copy=False)
    ys = np.stack([samples[i][1] for i in indices]).astype(np.int64, copy=False)
    return Tensor(xs), ys


def evaluate_samples(model: Model, samples, ignore_index: int = IGNORE_INDEX):
    """Pooled confusion metrics over (input, label) pairs in eval mode."""
    was = model.mode
    model.eval()
    cm = None
    try:
        for x, y in samples:
            with no_grad():
                logits = forward_segment(model, Tensor(x[None]))
            pred = np.argmax(logits.data[0], axis=0)
            part = accumulate_confusion(pred, y, model.config.num_classes, ignore_index)
            cm = part if cm is None else cm.merge(part)
    finally:
        model.mode = was
    return evaluate_confusion(cm)


def fit(model: Model, train_samples, val_samples, config: TrainConfig,
        checkpoint_dir: str = None, log_path: str = None) -> TrainResult:
    """Optimize the model, logging one record per epoch.

    ``train_samples`` / ``val_samples`` are sequences of (input, label) pairs
    with preprocessed float inputs of shape (4, H, W).  Returns the log plus
    best-by-validation-fwIoU bookkeeping; when ``checkpoint_dir`` is given the
    best and final checkpoints are written there.
    """
    config.validate()
    if not train_samples:
        raise ConfigError("fit: no training samples")
    if not val_samples:
        raise ConfigError("fit: no validation samples")
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    dtype = model.params[model.params.names()[0]].dtype
    opt = SGD(model.params.trainable(), config.learning_rate, config.momentum,
              config.weight_decay)
    records = []
    best_epoch, best_fwiou = 0, -1.0
    best_path = os.path.join(checkpoint_dir, "best.ckpt") if checkpoint_dir else None
    final_path = os.path.join(checkpoint_dir, "final.ckpt") if checkpoint_dir else None
    log_file = open(log_path, "w") if log_path else None

    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            order = np.random.default_rng(
                np.random.SeedSequence((config.seed, epoch))).permutation(len(train_samples))
            model.train()
            loss_sum, seen = 0.0, 0
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo:lo + config.batch_size]
                x, y = _as_batch(train_samples, batch, dtype)
                opt.zero_grad()
                logits = forward_segment(model, x)
                loss = cross_entropy_loss(logits, y, ignore_index=config.ignore_index)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"training diverged: loss {value} at epoch {epoch}, "
                        f"batch starting at sample {lo}")
                backward(loss)
                opt.step()
                loss_sum += value * len(batch)
                seen += len(batch)

            report = evaluate_samples(model, val_samples, config.ignore_index)
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / seen,
                "val_oa": report.oa,
                "val_mean_f1": report.mean_f1,
                "val_fwiou": report.fwiou,
                "wall_seconds": time.perf_counter() - started,
            }
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()

            if report.fwiou > best_fwiou:
                best_epoch, best_fwiou = epoch, report.fwiou
                if best_path:
                    save_checkpoint(model, best_path)
            if checkpoint_dir and config.checkpoint_every and \
                    epoch % config.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(checkpoint_dir, f"epoch_{epoch}.ckpt"))

        if final_path:
            save_checkpoint(model, final_path)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return TrainResult(records, best_epoch, best_fwiou, best_path, final_path)


# -- gradient verification --------------------------------------------------

def grad_check(loss_fn, named_params, num_probes: int = 200, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss Tensor from current parameter values;
    parameters must be float64.  Probes a random subset of entries (all of
    them when the model is smaller than ``num_probes``).
    """
    named_params = list(named_params)
    for name, t in named_params:
        if t.data.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters; {name!r} is "
                              f"{t.data.dtype}")
    for _, t in named_params:
        t.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise TrainingDivergedError(f"grad_check: non-finite loss {loss.item()}")
    backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in named_params}

    sizes = [t.size for _, t in named_params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    if total <= num_probes:
        flat_indices = np.arange(total)
    else:
        flat_indices = rng.choice(total, size=num_probes, replace=False)

    worst = 0.0
    for flat in sorted(int(i) for i in flat_indices):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, t = named_params[slot]
        i = flat - int(offsets[slot])
        orig = float(t.data.flat[i])
        eps = 1e-6 * max(1.0, abs(orig))
        with no_grad():
            t.data.flat[i] = orig + eps
            f_plus = loss_fn().item()
            t.data.flat[i] = orig - eps
            f_minus = loss_fn().item()
            t.data.flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst


def model_grad_check(model: Model, x: np.ndarray, y: np.ndarray,
                     num_probes: int = 200, seed: int = 0,
                     ignore_index: int = IGNORE_INDEX) -> float:
    """grad_check over a model's cross-entropy loss on one fixed batch.

    Runs in train mode so batch statistics are part of the differentiated
    function; running stats are restored afterwards.
    """
    total = model.params.trainable_size()
    if total > 50_000:
        raise ConfigError(f"grad_check model too large: {total} parameters (limit 50000)")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    saved_stats = {name: t.data.copy() for name, t in model.params.items()
                   if not t.requires_grad}
    was = model.mode
    model.train()

    def loss_fn():
        logits = forward_segment(model, Tensor(x))
        return cross_entropy_loss(logits, y, ignore_index=ignore_index)

    try:
        return grad_check(loss_fn, model.params.trainable(), num_probes, seed)
    finally:
        model.mode = was
        for name, data in saved_stats.items():
            model.params[name].data = data


# -- map prediction ---------------------------------------------------------

def _pad_to_multiple(x: np.ndarray, multiple: int = 32) -> np.ndarray:
    _, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    out = x
    while ph or pw:
        # reflect padding cannot exceed the current extent per step
        step_h = min(ph, out.shape[1] - 1)
        step_w = min(pw, out.shape[2] - 1)
        out = np.pad(out, ((0, 0), (0, step_h), (0, step_w)), mode="reflect")
        ph -= step_h
        pw -= step_w
    return out


def predict_map(model: Model, tile) -> LabelMap:
    """Per-pixel argmax class map; ties go to the lower class id.

    Accepts a PolSarTile (preprocessed internally) or an already preprocessed
    (4, H, W) array.  Extents that are not multiples of 32 are reflection
    padded for the forward pass and the prediction is cropped back.
    """
    if isinstance(tile, PolSarTile):
        x = preprocess(tile).data
    else:
        x = np.asarray(tile)
        if x.ndim != 3:
            raise ConfigError(f"predict_map expects a (C, H, W) array, got shape {x.shape}")
    h, w = x.shape[1], x.shape[2]
    padded = _pad_to_multiple(x)
    was = model.mode
    model.eval()
    try:
        with no_grad():
            logits = forward_segment(model, Tensor(padded[None]))
    finally:
        model.mode = was
    pred = np.argmax(logits.data[0, :, :h, :w], axis=0)
    return LabelMap(pred.astype(np.uint8))
