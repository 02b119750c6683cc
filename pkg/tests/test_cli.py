import csv
import hashlib
import json

import numpy as np
import pytest

from stereo_spixel.cli import COMMANDS, main, parse_size, UsageError
from stereo_spixel.core import read_feature_dump, read_label


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--n", "6", "--size", "32x32", "--disparity", "4", "--seed", "2",
                 "--centered-object", "--out", str(data)]) == 0
    run = root / "run"
    assert main(["train", "--data", str(data), "--spixels", "16", "--iters", "2",
                 "--batch-size", "2", "--crop", "32x32", "--channels", "4",
                 "--checkpoint-every", "1", "--out", str(run)]) == 0
    return root, data, run / "final.pt"


def _manifest_ok(path):
    manifest = json.loads(path.read_text())
    for rel, digest in manifest["artifacts"].items():
        target = path.parent / rel
        assert hashlib.sha256(target.read_bytes()).hexdigest() == digest
    return manifest


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_on_every_subcommand(command, capsys):
    assert main([command, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_subcommand_and_flag():
    assert main(["nope"]) == 2
    assert main(["eval", "--frobnicate", "1"]) == 2
    assert main([]) == 2


def test_missing_required_option(capsys):
    assert main(["train", "--iters", "3"]) == 2
    assert "--data" in capsys.readouterr().err


def test_parse_size():
    assert parse_size("12x34") == (12, 34)
    assert parse_size(8) == (8, 8)
    assert parse_size([3, 4]) == (3, 4)
    with pytest.raises(UsageError):
        parse_size("axb")


def test_synth_and_train_outputs(workspace):
    root, data, ckpt = workspace
    assert (data / "gt").is_dir() and (data / "train.txt").exists()
    _manifest_ok(data / "manifest.json")
    manifest = _manifest_ok(ckpt.parent / "manifest.json")
    assert manifest["seed"] == 0
    assert manifest["config"]["train_config"]["total_iters"] == 2
    assert {"final.pt", "train_log.csv", "ckpt_000001.pt"} <= set(manifest["artifacts"])


def test_segment_pair_outputs_and_determinism(workspace, tmp_path):
    _, data, ckpt = workspace
    left, right = data / "left" / "000000.png", data / "right" / "000000.png"
    args = ["segment", "--checkpoint", str(ckpt), "--left", str(left), "--right", str(right),
            "--spixels", "16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("left_labels.png", "right_labels.png", "left_overlay.png", "right_overlay.png"):
        assert (tmp_path / "a" / name).exists()
    for name in ("left_labels.png", "right_labels.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    labels = read_label(tmp_path / "a" / "left_labels.png")
    assert labels.shape == (32, 32) and labels.max() < 16
    _manifest_ok(tmp_path / "a" / "manifest.json")


def test_segment_too_many_superpixels(workspace, tmp_path, capsys):
    _, data, ckpt = workspace
    code = main(["segment", "--checkpoint", str(ckpt), "--left", str(data / "left" / "000000.png"),
                 "--right", str(data / "right" / "000000.png"), "--spixels", "5000",
                 "--out", str(tmp_path)])
    assert code != 0
    assert "5000" in capsys.readouterr().err


def test_segment_missing_file_is_runtime_error(workspace, tmp_path):
    _, data, ckpt = workspace
    assert main(["segment", "--checkpoint", str(ckpt), "--left", str(tmp_path / "nope.png"),
                 "--right", str(data / "right" / "000000.png"), "--out", str(tmp_path)]) == 1


def test_segment_batch_then_eval(workspace, tmp_path):
    _, data, ckpt = workspace
    pred = tmp_path / "pred"
    assert main(["segment", "--checkpoint", str(ckpt), "--data", str(data),
                 "--spixels", "4", "16", "--out", str(pred)]) == 0
    assert sorted(p.name for p in pred.iterdir() if p.is_dir()) == ["16", "4"]
    out = tmp_path / "res.csv"
    # predictions cover the val split only; train ids are reported and skipped
    with pytest.warns(UserWarning, match="no prediction"):
        assert main(["eval", "--pred", str(pred), "--gt", str(data / "labels"),
                     "--method", "net", "--out", str(out),
                     "--plot", str(tmp_path / "plots")]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["n_spixels"]) for r in rows] == [4, 16]
    n_val = len((data / "val.txt").read_text().split())
    assert all(int(r["n_images"]) == n_val for r in rows)
    assert all(0 <= float(r["asa"]) <= 1 for r in rows)
    assert (tmp_path / "plots" / "asa.png").exists()
    _manifest_ok(tmp_path / "res.manifest.json")


def test_eval_identity_predictions(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "identity.csv"
    assert main(["eval", "--pred", str(data / "labels"), "--gt", str(data / "labels"),
                 "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert (float(rows[0]["asa"]), float(rows[0]["ue"]), float(rows[0]["br"])) == (1.0, 0.0, 1.0)


def test_plot_from_csv(workspace, tmp_path):
    _, data, _ = workspace
    csv_path = tmp_path / "r.csv"
    main(["eval", "--pred", str(data / "labels"), "--gt", str(data / "labels"), "--spixels", "9",
          "--out", str(csv_path)])
    assert main(["plot", "--in", str(csv_path), "--out", str(tmp_path / "p")]) == 0
    assert {p.name for p in (tmp_path / "p").glob("*.png")} == {"asa.png", "ue.png", "br.png"}


def test_sod_outputs(workspace, tmp_path):
    _, data, ckpt = workspace
    assert main(["sod", "--checkpoint", str(ckpt), "--data", str(data), "--spixels", "16",
                 "--out", str(tmp_path / "s")]) == 0
    with open(tmp_path / "s" / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(0 <= float(r["mae"]) <= 1 for r in rows)
    assert all((tmp_path / "s" / f"{r['id']}.png").exists() for r in rows)
    assert main(["sod", "--baseline", "--data", str(data), "--out", str(tmp_path / "b")]) == 0
    assert main(["sod", "--data", str(data), "--out", str(tmp_path / "c")]) == 2


def test_dump_debug(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "dbg"
    assert main(["dump-debug", "--checkpoint", str(ckpt), "--left", str(data / "left" / "000001.png"),
                 "--right", str(data / "right" / "000001.png"), "--spixels", "16", "--row", "5",
                 "--out", str(out)]) == 0
    for stage in ("extracted", "aligned", "fused", "embedded"):
        feats = read_feature_dump(out / f"{stage}_left.bin")
        assert feats.shape[:2] == (32, 32)
    for name in ("attention_r2l_row5.png", "mask_l2r.png", "embed_x_left.png", "x_hat.png"):
        assert (out / name).exists()
    _manifest_ok(out / "manifest.json")


def test_config_file_precedence(workspace, tmp_path):
    _, data, _ = workspace
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("synth:\n  n: 3\n  size: 24x24\n  disparity: 2\n  seed: 7\n")
    out = tmp_path / "syn"
    assert main(["synth", "--config", str(cfg), "--n", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n"] == 2          # flag beats file
    assert manifest["config"]["seed"] == 7       # file beats default
    assert manifest["config"]["val_fraction"] == 0.25  # default
    assert read_label(out / "labels" / "000000.png").shape == (24, 24)


def test_config_json_and_bad_keys(tmp_path):
    good = tmp_path / "c.json"
    good.write_text(json.dumps({"n": 1, "size": "16x16", "disparity": 1}))
    assert main(["synth", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.yaml"),
                 "--out", str(tmp_path / "o3")]) == 2


def test_inputs_not_mutated(workspace, tmp_path):
    _, data, ckpt = workspace
    before = {p: p.read_bytes() for p in (data / "labels").glob("*.png")}
    main(["eval", "--pred", str(data / "labels"), "--gt", str(data / "labels"),
          "--out", str(tmp_path / "x.csv")])
    assert before == {p: p.read_bytes() for p in (data / "labels").glob("*.png")}
