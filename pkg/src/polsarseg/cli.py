"""Command line interface.

Subcommands: synth, split, train, eval, predict, analyze, ablate.  Every
command is reproducible from its flags plus explicit seeds.  Failures exit
non-zero with a single-line error on stderr and remove partial outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from . import models
from .analysis import (Conventions, calibrate_mac_factor, count_flops, receptive_field,
                       render_cost_text)
from .data import (dataset_ids, kfold_split, load_pair, load_tile, preprocess,
                   read_fold_manifest, synth_class_means, synth_scene, save_pair,
                   write_fold_manifest)
from .errors import DataError, UsageError
from .figures import (ablation_figure, confusion_figure, cost_breakdown_figure,
                      training_curves_figure)
from .models import ModelConfig, build_model, load_checkpoint
from .train import TrainConfig, evaluate_samples, fit, predict_map

CLASS_NAMES = ["water", "built_up", "industrial", "grassland", "barren", "others"]
BASE_PALETTE = [(0, 0, 255), (255, 0, 0), (255, 0, 255),
                (0, 255, 0), (255, 255, 0), (255, 255, 255)]
IGNORE_COLOR = (128, 128, 128)

TRAIN_FIELDS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "momentum": float,
    "weight_decay": float,
    "seed": int,
    "precision": str,
    "checkpoint_every": int,
    "ignore_index": int,
}

# Desk-scale defaults for `ablate` when no config file is given.
ABLATION_MODEL_DEFAULTS = dict(stem_width=16, stage_blocks=(1, 1, 1, 1),
                               branch_widths=(32, 64, 128), branch_width_multiplier=1.0,
                               decoder_width=32)
ABLATION_TRAIN_DEFAULTS = dict(epochs=60, batch_size=2, learning_rate=0.05)


def palette_for(num_classes: int) -> list:
    if num_classes <= len(BASE_PALETTE):
        return BASE_PALETTE[:num_classes]
    extra = []
    levels = (0, 64, 128, 192, 255)
    used = set(BASE_PALETTE) | {IGNORE_COLOR}
    for r in levels:
        for g in levels:
            for b in levels:
                color = (r, g, b)
                if color not in used:
                    extra.append(color)
                    used.add(color)
    pal = BASE_PALETTE + extra[: num_classes - len(BASE_PALETTE)]
    if len(pal) < num_classes:
        raise UsageError(f"cannot build a distinct palette for {num_classes} classes")
    return pal


def write_class_map_ppm(labels: np.ndarray, path: str, num_classes: int) -> None:
    """Colorized class map as a binary P6 portable pixel map."""
    pal = palette_for(num_classes)
    lut = np.zeros((256, 3), dtype=np.uint8)
    for cid, color in enumerate(pal):
        lut[cid] = color
    lut[255] = IGNORE_COLOR
    h, w = labels.shape
    rgb = lut[labels]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_experiment_config(path: str):
    """Flat key-value file holding both model and training keys."""
    model_lines, train_values = [], {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"config line {lineno} is not 'key = value': {raw.strip()!r}")
            key = line.partition("=")[0].strip()
            if key in models._CONFIG_FIELDS:
                model_lines.append(line)
            elif key in TRAIN_FIELDS:
                value = line.partition("=")[2].strip()
                try:
                    train_values[key] = TRAIN_FIELDS[key](value)
                except ValueError:
                    raise UsageError(
                        f"config line {lineno}: bad value {value!r} for {key}") from None
            else:
                raise UsageError(f"config line {lineno}: unknown key {key!r}")
    model_cfg = ModelConfig.from_kv("\n".join(model_lines))
    train_cfg = TrainConfig(**train_values)
    train_cfg.validate()
    return model_cfg, train_cfg


class _Outputs:
    """Paths created by the running command, removed again on failure."""

    def __init__(self):
        self.paths = []

    def add(self, path: str) -> str:
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for path in self.paths:
            if os.path.isfile(path):
                try:
                    os.remove(path)
                except OSError:
                    pass


def _dtype_for(precision: str):
    return np.float64 if precision == "float64" else np.float32


def _load_samples(directory: str, indices, id_names):
    samples = []
    for i in indices:
        if i < 0 or i >= len(id_names):
            raise UsageError(f"tile index {i} outside dataset of {len(id_names)} tiles")
        tile = load_pair(directory, id_names[i])
        if tile.label is None:
            raise DataError(f"tile {id_names[i]!r} has no label file")
        samples.append((preprocess(tile).data, tile.label.labels.astype(np.int64)))
    return samples


def _report_stem(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem or path


# -- subcommands ------------------------------------------------------------

def cmd_synth(args, outputs: _Outputs) -> None:
    os.makedirs(args.out, exist_ok=True)
    # one radiometry for the whole dataset: held-out tiles stay classifiable
    means = synth_class_means(args.seed, args.classes)
    for k in range(args.count):
        tile = synth_scene(args.seed + k, args.size, args.size,
                           num_classes=args.classes, looks=args.looks,
                           class_means=means)
        tile.tile_id = f"tile_{k:04d}"
        outputs.add(os.path.join(args.out, f"{tile.tile_id}.psar"))
        outputs.add(os.path.join(args.out, f"{tile.tile_id}.lbl"))
        save_pair(tile, args.out)
    print(f"synth: wrote {args.count} tile/label pairs ({args.size}x{args.size}, "
          f"L={args.looks}) to {args.out}")


def _parse_ratio(text: str) -> tuple:
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"ratio must look like 9:1, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise UsageError(f"ratio must be two integers, got {text!r}") from None


def cmd_split(args, outputs: _Outputs) -> None:
    folds = kfold_split(args.items, args.folds, _parse_ratio(args.ratio), args.seed)
    write_fold_manifest(folds, outputs.add(args.out))
    n_val = len(folds[0].val_ids)
    print(f"split: {args.folds} folds of {args.items} items "
          f"({args.items - n_val} train / {n_val} val) -> {args.out}")


def cmd_train(args, outputs: _Outputs) -> None:
    model_cfg, train_cfg = read_experiment_config(args.config)
    ids = dataset_ids(args.data)
    if not ids:
        raise UsageError(f"no .psar tiles found in {args.data}")
    manifest = args.folds or os.path.join(args.data, "folds.txt")
    folds = {spec.index: spec for spec in read_fold_manifest(manifest, len(ids))}
    if args.fold not in folds:
        raise UsageError(f"fold {args.fold} not present in manifest {manifest}")
    spec = folds[args.fold]
    train_samples = _load_samples(args.data, spec.train_ids, ids)
    val_samples = _load_samples(args.data, spec.val_ids, ids)

    os.makedirs(args.out, exist_ok=True)
    log_path = outputs.add(os.path.join(args.out, "train_log.jsonl"))
    outputs.add(os.path.join(args.out, "best.ckpt"))
    outputs.add(os.path.join(args.out, "final.ckpt"))
    model = build_model(model_cfg, seed=train_cfg.seed, dtype=_dtype_for(train_cfg.precision))
    result = fit(model, train_samples, val_samples, train_cfg,
                 checkpoint_dir=args.out, log_path=log_path)
    training_curves_figure(result.records,
                           outputs.add(os.path.join(args.out, "training_curves.png")))
    last = result.records[-1]
    print(f"train: fold {args.fold}, {len(result.records)} epochs, "
          f"final loss {last['train_loss']:.4f}, val fwIoU {last['val_fwiou']:.4f} "
          f"(best {result.best_fwiou:.4f} at epoch {result.best_epoch}) -> {args.out}")


def _parse_id_list(text: str, count: int):
    if text.strip().lower() == "all":
        return list(range(count))
    try:
        return [int(p) for p in text.split(",") if p.strip() != ""]
    except ValueError:
        raise UsageError(f"--ids must be 'all' or comma-separated integers, got {text!r}") \
            from None


def cmd_eval(args, outputs: _Outputs) -> None:
    model = load_checkpoint(args.checkpoint)
    ids = dataset_ids(args.data)
    if not ids:
        raise UsageError(f"no .psar tiles found in {args.data}")
    indices = _parse_id_list(args.ids, len(ids))
    samples = _load_samples(args.data, indices, ids)
    report = evaluate_samples(model, samples)

    stem = _report_stem(args.report)
    with open(outputs.add(args.report), "w") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")
    names = CLASS_NAMES if model.config.num_classes == len(CLASS_NAMES) else None
    with open(outputs.add(stem + "_per_class.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id", "name", "precision", "recall", "f1"])
        for s in report.class_scores:
            label = names[s.class_id] if names else f"class{s.class_id}"
            writer.writerow([s.class_id, label, f"{s.precision:.6f}", f"{s.recall:.6f}",
                             "" if s.f1 is None else f"{s.f1:.6f}"])
    confusion_figure(report, outputs.add(stem + "_confusion.png"), names)
    print(f"eval: {len(samples)} tiles, oa={report.oa:.6f} "
          f"mean_f1={report.mean_f1:.6f} fwiou={report.fwiou:.6f} -> {args.report}")


def cmd_predict(args, outputs: _Outputs) -> None:
    model = load_checkpoint(args.checkpoint)
    tile = load_tile(args.tile)
    label_map = predict_map(model, tile)
    write_class_map_ppm(label_map.labels, outputs.add(args.out), model.config.num_classes)
    values, counts = np.unique(label_map.labels, return_counts=True)
    top = int(values[np.argmax(counts)])
    print(f"predict: {label_map.shape[1]}x{label_map.shape[0]} map, "
          f"dominant class {top} -> {args.out}")


def _parse_input_shape(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"--input must look like 4x512x512, got {text!r}")
    try:
        c, h, w = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--input must be three integers, got {text!r}") from None
    return c, h, w


def cmd_analyze(args, outputs: _Outputs) -> None:
    config = ModelConfig(variant=args.arch)
    shape = _parse_input_shape(args.input)
    if args.mac_factor == "calibrate":
        mac_factor = calibrate_mac_factor(config)
    else:
        mac_factor = int(args.mac_factor)
    conventions = Conventions(mac_factor=mac_factor)
    report = count_flops(config, shape, conventions)
    fields = receptive_field(config)

    stem = _report_stem(args.report)
    with open(outputs.add(args.report), "w") as f:
        f.write(render_cost_text(report, fields))
    with open(outputs.add(stem + ".json"), "w") as f:
        payload = report.to_dict()
        payload["receptive_field"] = [
            {"name": e.name, "rf": e.rf, "stride": e.stride} for e in fields]
        json.dump(payload, f, indent=2)
        f.write("\n")
    with open(outputs.add(stem + ".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "kind", "params", "flops", "output_shape"])
        for row in report.rows:
            writer.writerow([row.name, row.kind, row.params, row.flops,
                             "x".join(str(e) for e in row.output_shape)])
    cost_breakdown_figure(report, outputs.add(stem + ".png"))
    print(f"analyze: {args.arch} at {args.input}: params={report.total_params} "
          f"flops={report.total_flops} (mac_factor={mac_factor}) -> {args.report}")


def cmd_ablate(args, outputs: _Outputs) -> None:
    if args.config:
        model_cfg, train_cfg = read_experiment_config(args.config)
    else:
        model_cfg = ModelConfig(**ABLATION_MODEL_DEFAULTS)
        train_cfg = TrainConfig(**ABLATION_TRAIN_DEFAULTS)
    ids = dataset_ids(args.data)
    if not ids:
        raise UsageError(f"no .psar tiles found in {args.data}")
    folds = read_fold_manifest(args.folds, len(ids))
    os.makedirs(args.out, exist_ok=True)

    from dataclasses import replace
    fold_rows = []
    for spec in folds:
        train_samples = _load_samples(args.data, spec.train_ids, ids)
        val_samples = _load_samples(args.data, spec.val_ids, ids)
        row = {"fold": spec.index}
        for variant in ("fcn_baseline", "mp_resnet"):
            cfg = replace(model_cfg, variant=variant)
            run_dir = os.path.join(args.out, f"fold{spec.index}", variant)
            os.makedirs(run_dir, exist_ok=True)
            log_path = outputs.add(os.path.join(run_dir, "train_log.jsonl"))
            outputs.add(os.path.join(run_dir, "best.ckpt"))
            outputs.add(os.path.join(run_dir, "final.ckpt"))
            model = build_model(cfg, seed=train_cfg.seed,
                                dtype=_dtype_for(train_cfg.precision))
            result = fit(model, train_samples, val_samples, train_cfg,
                         checkpoint_dir=run_dir, log_path=log_path)
            best = result.records[result.best_epoch - 1]
            short = "mp" if variant == "mp_resnet" else "fcn"
            row[f"{short}_oa"] = best["val_oa"]
            row[f"{short}_mean_f1"] = best["val_mean_f1"]
            row[f"{short}_fwiou"] = best["val_fwiou"]
        for key in ("oa", "mean_f1", "fwiou"):
            row[f"delta_{key}"] = row[f"mp_{key}"] - row[f"fcn_{key}"]
        fold_rows.append(row)

    metric_keys = ["fcn_oa", "fcn_mean_f1", "fcn_fwiou", "mp_oa", "mp_mean_f1", "mp_fwiou",
                   "delta_oa", "delta_mean_f1", "delta_fwiou"]
    means = {k: float(np.mean([r[k] for r in fold_rows])) for k in metric_keys}

    with open(outputs.add(os.path.join(args.out, "ablation.csv")), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fold"] + metric_keys)
        for row in fold_rows:
            writer.writerow([row["fold"]] + [f"{row[k]:.6f}" for k in metric_keys])
        writer.writerow(["mean"] + [f"{means[k]:.6f}" for k in metric_keys])

    with open(outputs.add(os.path.join(args.out, "ablation.txt")), "w") as f:
        f.write(f"{'fold':<6} {'model':<14} {'OA(%)':>8} {'mF1(%)':>8} {'fwIoU(%)':>9}\n")
        for row in fold_rows:
            for short, label in (("fcn", "fcn_baseline"), ("mp", "mp_resnet")):
                f.write(f"{row['fold']:<6} {label:<14} {100 * row[f'{short}_oa']:>8.2f} "
                        f"{100 * row[f'{short}_mean_f1']:>8.2f} "
                        f"{100 * row[f'{short}_fwiou']:>9.2f}\n")
            f.write(f"{row['fold']:<6} {'improvement':<14} {100 * row['delta_oa']:>+8.2f} "
                    f"{100 * row['delta_mean_f1']:>+8.2f} {100 * row['delta_fwiou']:>+9.2f}\n")
        f.write(f"{'mean':<6} {'improvement':<14} {100 * means['delta_oa']:>+8.2f} "
                f"{100 * means['delta_mean_f1']:>+8.2f} {100 * means['delta_fwiou']:>+9.2f}\n")

    ablation_figure(fold_rows, outputs.add(os.path.join(args.out, "ablation.png")))
    print(f"ablate: {len(fold_rows)} folds, mean fwIoU improvement "
          f"{100 * means['delta_fwiou']:+.2f} pp -> {args.out}")


# -- dispatch ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="polsarseg",
                     description="Multi-path residual segmentation toolkit for "
                                 "4-channel PolSAR imagery.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic speckled dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--looks", type=int, default=2)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a fold manifest of independent 9:1 resamples")
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--ratio", default="9:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold and write log + checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", default=None, help="fold manifest (default <data>/folds.txt)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a checkpoint on dataset tiles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", default="all")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="colorized class map for one tile (binary P6)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze", help="parameter/FLOP/receptive-field report")
    p.add_argument("--arch", choices=("mp_resnet", "fcn_baseline"), required=True)
    p.add_argument("--input", default="4x512x512")
    p.add_argument("--mac-factor", choices=("calibrate", "1", "2"), default="calibrate")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train both architectures on every fold and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    outputs = _Outputs()
    with warnings.catch_warnings():
        # overflow/invalid warnings would break the one-line stderr contract;
        # divergence is reported through TrainingDivergedError instead
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            args = parser.parse_args(argv)
            args.func(args, outputs)
            return 0
        except Exception as exc:  # single-line contract for scripted callers
            outputs.cleanup()
            message = " ".join(str(exc).split()) or exc.__class__.__name__
            print(f"error: {exc.__class__.__name__}: {message}", file=sys.stderr)
            return 1


if __name__ == "__main__":
    sys.exit(main())
