"""End-to-end tests for the command line interface.

Each test drives main() in-process with an argv list; a session-scoped tiny
dataset plus one trained run keep the suite fast.
"""

import json
import os

import numpy as np
import pytest

from polsarseg.cli import BASE_PALETTE, IGNORE_COLOR, main, write_class_map_ppm
from polsarseg.data import read_fold_manifest
from polsarseg.models import ModelConfig, build_model, save_checkpoint

PNG_MAGIC = b"\x89PNG\r\n"

TINY_EXPERIMENT = """
variant = mp_resnet
stem_width = 8
stage_blocks = 1,1,1,1
branch_widths = 16,16,16
branch_width_multiplier = 1.0
decoder_width = 8
epochs = 2
batch_size = 2
learning_rate = 0.05
seed = 0
"""


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Dataset of six 64x64 tiles, a 3-fold manifest, and one trained run."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert main(["synth", "--seed", "7", "--count", "6", "--size", "64",
                 "--looks", "2", "--out", data]) == 0
    manifest = os.path.join(data, "folds.txt")
    assert main(["split", "--items", "6", "--folds", "3", "--ratio", "2:1",
                 "--seed", "1", "--out", manifest]) == 0
    config = str(root / "exp.cfg")
    with open(config, "w") as f:
        f.write(TINY_EXPERIMENT)
    run = str(root / "run0")
    assert main(["train", "--config", config, "--fold", "0",
                 "--data", data, "--out", run]) == 0
    return {"root": root, "data": data, "manifest": manifest,
            "config": config, "run": run}


def test_synth_deterministic(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert main(["synth", "--seed", "3", "--count", "2", "--size", "32",
                     "--out", out]) == 0
    for name in sorted(os.listdir(a)):
        with open(os.path.join(a, name), "rb") as fa, \
                open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read()
    assert sorted(os.listdir(a)) == ["tile_0000.lbl", "tile_0000.psar",
                                     "tile_0001.lbl", "tile_0001.psar"]


def test_split_manifest_round_trip(tmp_path):
    out = str(tmp_path / "folds.txt")
    assert main(["split", "--items", "20", "--folds", "4", "--ratio", "4:1",
                 "--seed", "5", "--out", out]) == 0
    folds = read_fold_manifest(out, 20)
    assert len(folds) == 4
    assert all(len(f.val_ids) == 4 and len(f.train_ids) == 16 for f in folds)


def test_train_artifacts(workspace):
    run = workspace["run"]
    with open(os.path.join(run, "train_log.jsonl")) as f:
        records = [json.loads(line) for line in f]
    assert [r["epoch"] for r in records] == [1, 2]
    for name in ("best.ckpt", "final.ckpt"):
        with open(os.path.join(run, name), "rb") as f:
            assert f.read(8) == b"MPRSNET1"
    with open(os.path.join(run, "training_curves.png"), "rb") as f:
        assert f.read(6) == PNG_MAGIC


def test_train_missing_fold_fails(workspace, capsys):
    assert main(["train", "--config", workspace["config"], "--fold", "9",
                 "--data", workspace["data"],
                 "--out", workspace["data"] + "_nope"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_eval_matches_training_log(workspace, tmp_path, capsys):
    """Evaluating final.ckpt on the fold's val tiles reproduces the last log entry."""
    folds = read_fold_manifest(workspace["manifest"], 6)
    val_ids = ",".join(str(i) for i in folds[0].val_ids)
    report_path = str(tmp_path / "report.json")
    assert main(["eval", "--checkpoint", os.path.join(workspace["run"], "final.ckpt"),
                 "--data", workspace["data"], "--ids", val_ids,
                 "--report", report_path]) == 0
    with open(report_path) as f:
        report = json.load(f)
    with open(os.path.join(workspace["run"], "train_log.jsonl")) as f:
        last = json.loads(f.readlines()[-1])
    assert abs(report["oa"] - last["val_oa"]) < 1e-6
    assert abs(report["mean_f1"] - last["val_mean_f1"]) < 1e-6
    assert abs(report["fwiou"] - last["val_fwiou"]) < 1e-6
    out = capsys.readouterr().out
    assert "oa=" in out and "fwiou=" in out


def test_eval_side_outputs(workspace, tmp_path):
    report_path = str(tmp_path / "r.json")
    assert main(["eval", "--checkpoint", os.path.join(workspace["run"], "best.ckpt"),
                 "--data", workspace["data"], "--ids", "all",
                 "--report", report_path]) == 0
    with open(str(tmp_path / "r_per_class.csv")) as f:
        lines = f.read().strip().splitlines()
    assert lines[0] == "class_id,name,precision,recall,f1"
    assert len(lines) == 1 + 6
    assert lines[1].split(",")[1] == "water"
    with open(str(tmp_path / "r_confusion.png"), "rb") as f:
        assert f.read(6) == PNG_MAGIC
    with open(report_path) as f:
        report = json.load(f)
    assert set(report) >= {"oa", "mean_f1", "fwiou", "per_class", "confusion"}


def test_predict_constant_class_map(workspace, tmp_path):
    """A head rigged to always vote class 0 paints the whole map the first color."""
    config = ModelConfig(stem_width=8, stage_blocks=(1, 1, 1, 1),
                         branch_widths=(16, 16, 16), branch_width_multiplier=1.0,
                         decoder_width=8)
    model = build_model(config, seed=0)
    model.params["head.cls.weight"].data[:] = 0.0
    model.params["head.cls.bias"].data[:] = 0.0
    model.params["head.cls.bias"].data[0] = 5.0
    ckpt = str(tmp_path / "const.ckpt")
    save_checkpoint(model, ckpt)
    out = str(tmp_path / "map.ppm")
    assert main(["predict", "--checkpoint", ckpt,
                 "--tile", os.path.join(workspace["data"], "tile_0000.psar"),
                 "--out", out]) == 0
    with open(out, "rb") as f:
        blob = f.read()
    assert blob.startswith(b"P6\n64 64\n255\n")
    pixels = blob[len(b"P6\n64 64\n255\n"):]
    assert len(pixels) == 3 * 64 * 64
    assert pixels == bytes(BASE_PALETTE[0]) * (64 * 64)


def test_predict_uses_trained_checkpoint(workspace, tmp_path):
    out = str(tmp_path / "map.ppm")
    assert main(["predict", "--checkpoint", os.path.join(workspace["run"], "final.ckpt"),
                 "--tile", os.path.join(workspace["data"], "tile_0001.psar"),
                 "--out", out]) == 0
    with open(out, "rb") as f:
        blob = f.read()
    assert blob.startswith(b"P6\n64 64\n255\n")
    body = blob.split(b"\n", 3)[3]
    allowed = {bytes(c) for c in BASE_PALETTE} | {bytes(IGNORE_COLOR)}
    seen = {body[i:i + 3] for i in range(0, len(body), 3)}
    assert seen <= allowed


def test_ppm_writer_maps_ignore_pixels(tmp_path):
    labels = np.array([[0, 1], [255, 5]], dtype=np.uint8)
    path = str(tmp_path / "x.ppm")
    write_class_map_ppm(labels, path, 6)
    with open(path, "rb") as f:
        blob = f.read()
    assert blob == b"P6\n2 2\n255\n" + bytes(BASE_PALETTE[0]) + bytes(BASE_PALETTE[1]) \
        + bytes(IGNORE_COLOR) + bytes(BASE_PALETTE[5])


def test_analyze_published_windows(tmp_path):
    totals = {}
    for arch in ("fcn_baseline", "mp_resnet"):
        report_path = str(tmp_path / f"{arch}.txt")
        assert main(["analyze", "--arch", arch, "--report", report_path]) == 0
        with open(str(tmp_path / f"{arch}.json")) as f:
            payload = json.load(f)
        totals[arch] = payload
        with open(report_path) as f:
            text = f.read()
        assert "mac_factor" in text and "endpoint" in text and "stride" in text
        with open(str(tmp_path / f"{arch}.png"), "rb") as f:
            assert f.read(6) == PNG_MAGIC
        with open(str(tmp_path / f"{arch}.csv")) as f:
            rows = f.read().strip().splitlines()
        assert rows[0] == "name,kind,params,flops,output_shape"
        assert len(rows) > 10
    fcn, mp = totals["fcn_baseline"], totals["mp_resnet"]
    assert abs(fcn["total_params"] - 21.35e6) <= 0.05 * 21.35e6
    assert abs(fcn["total_flops"] - 90.97e9) <= 0.15 * 90.97e9
    assert abs(mp["total_params"] - 54.97e6) <= 0.20 * 54.97e6
    assert abs(mp["total_flops"] - 115.93e9) <= 0.25 * 115.93e9
    assert {e["name"] for e in mp["receptive_field"]} == {"branch0", "branch1", "branch2"}


def test_analyze_mac_factor_flag(tmp_path):
    flops = {}
    for mf in ("1", "2"):
        report = str(tmp_path / f"m{mf}.txt")
        assert main(["analyze", "--arch", "fcn_baseline", "--mac-factor", mf,
                     "--input", "4x128x128", "--report", report]) == 0
        with open(str(tmp_path / f"m{mf}.json")) as f:
            flops[mf] = json.load(f)["total_flops"]
    assert flops["2"] > 1.8 * flops["1"]


def test_ablate_outputs(workspace, tmp_path):
    out = str(tmp_path / "abl")
    config = str(tmp_path / "abl.cfg")
    with open(config, "w") as f:
        f.write(TINY_EXPERIMENT.replace("epochs = 2", "epochs = 1"))
    assert main(["ablate", "--data", workspace["data"], "--folds", workspace["manifest"],
                 "--config", config, "--out", out]) == 0
    with open(os.path.join(out, "ablation.csv")) as f:
        rows = f.read().strip().splitlines()
    assert rows[0].startswith("fold,fcn_oa")
    assert len(rows) == 1 + 3 + 1  # header, three folds, mean
    assert rows[-1].startswith("mean,")
    with open(os.path.join(out, "ablation.txt")) as f:
        table = f.read()
    assert "improvement" in table and "fwIoU" in table
    assert table.strip().splitlines()[-1].startswith("mean")
    with open(os.path.join(out, "ablation.png"), "rb") as f:
        assert f.read(6) == PNG_MAGIC
    for fold in range(3):
        for variant in ("fcn_baseline", "mp_resnet"):
            run = os.path.join(out, f"fold{fold}", variant)
            assert os.path.isfile(os.path.join(run, "final.ckpt"))
            assert os.path.isfile(os.path.join(run, "train_log.jsonl"))


def test_unknown_command_single_line_error(capsys):
    assert main(["frobnicate"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_bad_flag_value_single_line_error(tmp_path, capsys):
    assert main(["analyze", "--arch", "resnet50",
                 "--report", str(tmp_path / "x.txt")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1
    assert not os.path.exists(str(tmp_path / "x.txt"))


def test_missing_checkpoint_single_line_error(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--data", workspace["data"], "--report", str(tmp_path / "r.json")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1
    assert not os.path.exists(str(tmp_path / "r.json"))


def test_unknown_config_key_rejected(workspace, tmp_path, capsys):
    config = str(tmp_path / "bad.cfg")
    with open(config, "w") as f:
        f.write("variant = mp_resnet\nwibble = 3\n")
    assert main(["train", "--config", config, "--fold", "0",
                 "--data", workspace["data"], "--out", str(tmp_path / "run")]) == 1
    assert "wibble" in capsys.readouterr().err


def test_divergence_cleans_partial_outputs(workspace, tmp_path, capsys):
    """A run that diverges mid-training leaves no partial artifacts behind."""
    config = str(tmp_path / "div.cfg")
    with open(config, "w") as f:
        f.write(TINY_EXPERIMENT.replace("learning_rate = 0.05",
                                        "learning_rate = 1e18"))
    out = str(tmp_path / "divrun")
    assert main(["train", "--config", config, "--fold", "0",
                 "--data", workspace["data"], "--out", out]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: TrainingDivergedError")
    assert err.count("\n") == 1
    assert os.listdir(out) == []


def test_bad_ids_and_ratio_rejected(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", os.path.join(workspace["run"], "final.ckpt"),
                 "--data", workspace["data"], "--ids", "1,two",
                 "--report", str(tmp_path / "r.json")]) == 1
    assert "comma-separated" in capsys.readouterr().err
    assert main(["split", "--items", "10", "--ratio", "banana",
                 "--out", str(tmp_path / "f.txt")]) == 1
    assert "ratio" in capsys.readouterr().err
