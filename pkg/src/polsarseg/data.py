"""Tile I/O, preprocessing, synthetic speckled scenes, and fold protocol.

Binary formats (little endian throughout):

* tile: magic ``PSARTIL1`` | u16 channels | u32 height | u32 width |
  float32 planar data (channel-major, row-major per plane).
* label: magic ``PSARLBL1`` | u32 height | u32 width | u8 class ids
  (255 reserved for ignore).

A dataset directory holds ``<id>.psar`` / ``<id>.lbl`` pairs plus an optional
fold manifest: one text line per fold with the fold index, the fold's derived
seed, and the comma-separated validation ids.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .engine import Tensor
from .errors import (BadMagicError, ConfigError, DataError, ExtentOverflowError,
                     FileFormatError, ShapeError, TruncatedPayloadError)

TILE_MAGIC = b"PSARTIL1"
LABEL_MAGIC = b"PSARLBL1"
IGNORE_INDEX = 255
MAX_EXTENT = 1 << 20
MAX_PAYLOAD_BYTES = 1 << 31


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W) uint8, 255 = ignore

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise DataError(f"label map must be 2-d, got shape {self.labels.shape}")

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class PolSarTile:
    channels: np.ndarray  # (C, H, W) float32 intensities
    label: LabelMap = None
    tile_id: str = ""
    gsd_meters: float = 1.0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3:
            raise DataError(f"tile data must be (C, H, W), got shape {self.channels.shape}")
        if np.any(self.channels < 0):
            raise DataError("tile intensities must be non-negative")
        if self.label is not None and self.label.shape != self.channels.shape[1:]:
            raise DataError(
                f"label extents {self.label.shape} do not match tile {self.channels.shape[1:]}")

    @property
    def shape(self):
        return self.channels.shape


def _read_exact(f, n: int, what: str) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise TruncatedPayloadError(f"truncated {what}: expected {n} bytes, got {len(chunk)}")
    return chunk


def _check_extents(counts: tuple, item_bytes: int, what: str) -> None:
    if any(e <= 0 or e > MAX_EXTENT for e in counts):
        raise ExtentOverflowError(f"{what} extents {counts} outside (0, {MAX_EXTENT}]")
    if int(np.prod(counts, dtype=np.int64)) * item_bytes > MAX_PAYLOAD_BYTES:
        raise ExtentOverflowError(f"{what} extents {counts} imply an implausible payload size")


def save_tile(tile: PolSarTile, path: str) -> None:
    c, h, w = tile.channels.shape
    with open(path, "wb") as f:
        f.write(TILE_MAGIC)
        f.write(struct.pack("<HII", c, h, w))
        f.write(np.ascontiguousarray(tile.channels, dtype="<f4").tobytes())


def load_tile(path: str) -> PolSarTile:
    with open(path, "rb") as f:
        magic = f.read(len(TILE_MAGIC))
        if magic != TILE_MAGIC:
            raise BadMagicError(
                f"bad magic at offset 0: expected {TILE_MAGIC!r}, found {magic!r}")
        c, h, w = struct.unpack("<HII", _read_exact(f, 10, "tile header"))
        _check_extents((c, h, w), 4, "tile")
        raw = _read_exact(f, 4 * c * h * w, "tile data section")
        extra = f.read(1)
    if extra:
        raise FileFormatError("tile file has trailing bytes after the data section")
    data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).copy()
    return PolSarTile(data, tile_id=os.path.splitext(os.path.basename(path))[0])


def save_label(label: LabelMap, path: str) -> None:
    h, w = label.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(label.labels, dtype=np.uint8).tobytes())


def load_label(path: str) -> LabelMap:
    with open(path, "rb") as f:
        magic = f.read(len(LABEL_MAGIC))
        if magic != LABEL_MAGIC:
            raise BadMagicError(
                f"bad magic at offset 0: expected {LABEL_MAGIC!r}, found {magic!r}")
        h, w = struct.unpack("<II", _read_exact(f, 8, "label header"))
        _check_extents((h, w), 1, "label")
        raw = _read_exact(f, h * w, "label data section")
        extra = f.read(1)
    if extra:
        raise FileFormatError("label file has trailing bytes after the data section")
    return LabelMap(np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy())


# -- dataset directory layout ----------------------------------------------

def tile_path(directory: str, tile_id: str) -> str:
    return os.path.join(directory, f"{tile_id}.psar")


def label_path(directory: str, tile_id: str) -> str:
    return os.path.join(directory, f"{tile_id}.lbl")


def save_pair(tile: PolSarTile, directory: str) -> None:
    if not tile.tile_id:
        raise DataError("tile has no id; cannot place it in a dataset directory")
    save_tile(tile, tile_path(directory, tile.tile_id))
    if tile.label is not None:
        save_label(tile.label, label_path(directory, tile.tile_id))


def load_pair(directory: str, tile_id: str) -> PolSarTile:
    tile = load_tile(tile_path(directory, tile_id))
    lbl = label_path(directory, tile_id)
    if os.path.exists(lbl):
        tile.label = load_label(lbl)
        if tile.label.shape != tile.channels.shape[1:]:
            raise DataError(
                f"label extents {tile.label.shape} do not match tile "
                f"{tile.channels.shape[1:]} for id {tile_id!r}")
    return tile


def dataset_ids(directory: str) -> list:
    ids = [os.path.splitext(name)[0] for name in os.listdir(directory)
           if name.endswith(".psar")]
    return sorted(ids)


# -- preprocessing ----------------------------------------------------------

def preprocess(tile: PolSarTile, clip_quantile: float = 0.99) -> Tensor:
    """Per-channel high-quantile clip then min-max scale into [0, 1].

    Constant channels (zero range after clipping) map to all zeros.
    """
    if not (0.0 < clip_quantile <= 1.0):
        raise ConfigError(f"clip_quantile must be in (0, 1], got {clip_quantile}")
    x = tile.channels.astype(np.float64)
    out = np.zeros_like(x)
    for c in range(x.shape[0]):
        clip_val = np.quantile(x[c], clip_quantile)
        clipped = np.minimum(x[c], clip_val)
        lo = clipped.min()
        span = clip_val - lo
        if span > 0:
            out[c] = (clipped - lo) / span
    return Tensor(out.astype(np.float32))


# -- synthetic scenes -------------------------------------------------------

def synth_class_means(seed: int, num_classes: int, num_channels: int = 4) -> np.ndarray:
    """Per-class, per-channel mean backscatter in [0.1, 1.0)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[1])
    return rng.uniform(0.1, 1.0, size=(num_classes, num_channels))


def synth_scene(seed: int, height: int, width: int, num_classes: int = 6,
                looks: int = 1, num_channels: int = 4,
                class_means: np.ndarray = None) -> PolSarTile:
    """Piecewise-constant class regions under multiplicative gamma speckle.

    The class map is the argmax of per-class smoothed noise fields; any class
    the argmax misses is stamped in as a small rectangle so every class
    appears at usable extents.  Intensity = class mean x gamma(L, 1/L) noise,
    independently per pixel and channel.

    By default each scene draws its own per-class channel means.  Pass
    `class_means` (shape (num_classes, num_channels), positive) to give many
    scenes a shared radiometry, which is what makes a held-out tile
    classifiable from tiles seen in training.  Labels and speckle depend only
    on `seed` either way.
    """
    if looks < 1:
        raise ConfigError(f"looks must be >= 1, got {looks}")
    if height % 32 or width % 32:
        raise ConfigError(f"scene extents {height}x{width} must be divisible by 32")
    if num_classes < 2 or num_classes > 254:
        raise ConfigError(f"num_classes must be in [2, 254], got {num_classes}")

    label_seq, means_seq, speckle_seq = np.random.SeedSequence(seed).spawn(3)
    label_rng = np.random.default_rng(label_seq)
    sigma = min(height, width) / 8.0
    fields = np.stack([gaussian_filter(label_rng.normal(size=(height, width)), sigma)
                       for _ in range(num_classes)])
    labels = np.argmax(fields, axis=0).astype(np.uint8)

    ph, pw = max(2, height // 16), max(2, width // 16)
    for c in range(num_classes):
        if not np.any(labels == c):
            y = int(label_rng.integers(0, height - ph + 1))
            x = int(label_rng.integers(0, width - pw + 1))
            labels[y:y + ph, x:x + pw] = c

    if class_means is None:
        means = np.random.default_rng(means_seq).uniform(0.1, 1.0,
                                                         size=(num_classes, num_channels))
    else:
        means = np.asarray(class_means, dtype=np.float64)
        if means.shape != (num_classes, num_channels):
            raise ShapeError(f"class_means shape {means.shape} does not match "
                             f"({num_classes}, {num_channels})")
        if not np.all(means > 0):
            raise DataError("class_means must be positive")
    speckle_rng = np.random.default_rng(speckle_seq)
    speckle = speckle_rng.gamma(shape=float(looks), scale=1.0 / looks,
                                size=(num_channels, height, width))
    channels = means[labels].transpose(2, 0, 1) * speckle
    return PolSarTile(channels.astype(np.float32), LabelMap(labels),
                      tile_id=f"synth_{seed:05d}")


# -- fold protocol ----------------------------------------------------------

@dataclass(frozen=True)
class FoldSpec:
    index: int
    seed: int
    train_ids: tuple
    val_ids: tuple

    def __post_init__(self):
        if set(self.train_ids) & set(self.val_ids):
            raise ConfigError(f"fold {self.index}: train and validation ids overlap")


def _fold_seed(base_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence((base_seed, fold)).generate_state(1)[0])


def kfold_split(num_items: int, num_folds: int = 10, ratio: tuple = (9, 1),
                seed: int = 0) -> list:
    """Independent ratio-preserving resamples, one per fold (not a partition)."""
    a, b = ratio
    if a <= 0 or b <= 0:
        raise ConfigError(f"ratio parts must be positive, got {ratio}")
    if num_folds < 1:
        raise ConfigError(f"num_folds must be >= 1, got {num_folds}")
    if num_items < num_folds:
        raise ConfigError(f"need at least num_folds={num_folds} items, got {num_items}")
    n_val = math.ceil(num_items * b / (a + b))
    if n_val == 0 or n_val == num_items:
        raise ConfigError(f"ratio {a}:{b} leaves an empty side for {num_items} items")
    folds = []
    for k in range(num_folds):
        fs = _fold_seed(seed, k)
        perm = np.random.default_rng(fs).permutation(num_items)
        val = tuple(sorted(int(i) for i in perm[:n_val]))
        train = tuple(sorted(int(i) for i in perm[n_val:]))
        folds.append(FoldSpec(k, fs, train, val))
    return folds


def write_fold_manifest(folds: list, path: str) -> None:
    with open(path, "w") as f:
        for spec in folds:
            ids = ",".join(str(i) for i in spec.val_ids)
            f.write(f"{spec.index} {spec.seed} {ids}\n")


def read_fold_manifest(path: str, num_items: int) -> list:
    folds = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FileFormatError(
                    f"fold manifest line {lineno}: expected 'index seed ids', got {raw!r}")
            try:
                index, fs = int(parts[0]), int(parts[1])
                val = tuple(int(p) for p in parts[2].split(","))
            except ValueError:
                raise FileFormatError(
                    f"fold manifest line {lineno}: non-numeric field in {raw!r}") from None
            if any(i < 0 or i >= num_items for i in val):
                raise DataError(
                    f"fold manifest line {lineno}: validation id outside [0, {num_items})")
            train = tuple(i for i in range(num_items) if i not in set(val))
            folds.append(FoldSpec(index, fs, train, val))
    return folds
