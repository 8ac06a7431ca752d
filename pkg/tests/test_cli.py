import json
import re
import subprocess
import sys
from dataclasses import fields

import numpy as np
import pytest

from wetseg import cli
from wetseg.pipeline import PreprocessConfig, SplitPolicy
from wetseg.rascore import LabelMask, MultibandRaster, load_manifest, write_mask, write_raster
from wetseg.synthetic import SYNTHETIC_SCHEME, synthetic_mask, synthetic_source
from wetseg.train import TrainConfig

TINY = ["--base-channels", "4", "--depth", "2", "--bridge-channels", "8"]


def _help_text(*cmd) -> str:
    parser = cli.build_parser()
    for name in cmd:
        sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
        parser = sub.choices[name]
    return parser.format_help()


def _flag_default_in_help(text: str, flag: str, default) -> bool:
    # ArgumentDefaultsHelpFormatter appends "(default: X)" after the flag's help
    m = re.search(rf"\n  {re.escape(flag)}[ ,\n](.*?)(?=\n  -|\Z)", text, re.S)
    chunk = m.group(1) if m else ""
    return f"(default: {default})" in " ".join(chunk.split())


@pytest.mark.parametrize("cmd,task", [(("pretrain",), "autoencoder"), (("train",), "unet"),
                                      (("experiment", "pretraining"), "unet"),
                                      (("experiment", "reconstruction"), "autoencoder")])
def test_help_lists_every_train_field_with_default(cmd, task):
    text = _help_text(*cmd)
    defaults = TrainConfig.defaults(task).to_dict()
    for f in fields(TrainConfig):
        if f.name in ("task", "deterministic"):
            continue  # fixed by the subcommand / global flag
        flag = "--" + f.name.replace("_", "-")
        assert flag in text, flag
        assert _flag_default_in_help(text, flag, defaults[f.name]), flag


def test_help_lists_every_preprocess_field_with_default():
    text = _help_text("preprocess")
    d = PreprocessConfig().to_dict()
    for f in fields(PreprocessConfig):
        if f.name == "split_policy":
            continue
        flag = "--" + f.name.replace("_", "-")
        assert flag in text
        assert _flag_default_in_help(text, flag, d[f.name]), flag
    for f in fields(SplitPolicy):
        flag = "--split-" + ("region" if f.name == "regions" else f.name)
        assert flag in text, flag


def test_global_help_mentions_threads_and_deterministic():
    text = cli.build_parser().format_help()
    assert "--threads" in text and "--deterministic" in text
    for cmd in ("preprocess", "pretrain", "train", "eval", "transfer", "experiment"):
        assert cmd in text


def _scene_dir(tmp_path):
    src = tmp_path / "scenes"
    src.mkdir()
    for i in range(2):
        s = synthetic_source(f"scene{i}", seed=i, size=64, region=f"region{i}")
        write_raster(s.image, src / f"scene{i}.ras")
        write_mask(s.label, src / f"scene{i}_label.ras")
    return src


def test_preprocess_twice_identical_manifest(tmp_path):
    src = _scene_dir(tmp_path)
    args = ["preprocess", "--input", str(src), "--patch-size", "16", "--class-scheme", "synthetic-3",
            "--split-kind", "random", "--split-fractions", "0.5", "0.25", "0.25"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    m = load_manifest(tmp_path / "a" / "manifest.json")
    assert sum(m.counts().values()) == 32
    resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    assert resolved["preprocess"]["patch_size"] == 16
    assert resolved["preprocess"]["split_policy"]["fractions"] == [0.5, 0.25, 0.25]


def test_config_file_then_flags_override(tmp_path):
    src = _scene_dir(tmp_path)
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('[preprocess]\npatch_size = 32\nmax_invalid_fraction = 0.2\n'
                   '[preprocess.split_policy]\nkind = "random"\n')
    assert cli.main(["preprocess", "--input", str(src), "--out", str(tmp_path / "o"), "--config", str(cfg),
                     "--class-scheme", "synthetic-3", "--patch-size", "16"]) == 0
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())["preprocess"]
    assert resolved["patch_size"] == 16          # flag wins
    assert resolved["max_invalid_fraction"] == 0.2  # file wins over default
    assert resolved["split_policy"]["kind"] == "random"


def test_config_errors_enumerated_exit_2(tmp_path, capsys):
    src = _scene_dir(tmp_path)
    code = cli.main(["preprocess", "--input", str(src), "--out", str(tmp_path / "o"), "--patch-size", "0",
                     "--max-invalid-fraction", "2", "--split-fractions", "0.5", "0.5", "0.5",
                     "--split-kind", "random"])
    assert code == 2
    err = capsys.readouterr().err
    for field in ("patch_size", "max_invalid_fraction", "fractions"):
        assert field in err


def test_missing_input_exit_3(tmp_path, capsys):
    assert cli.main(["preprocess", "--input", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3
    assert "data error" in capsys.readouterr().err


def _synth(tmp_path, name="fx", **counts):
    c = {"train": 4, "val": 2, "test": 2, **counts}
    assert cli.main(["synth", "--out", str(tmp_path / name), "--size", "16", "--train", str(c["train"]),
                     "--val", str(c["val"]), "--test", str(c["test"])]) == 0
    return tmp_path / name / "manifest.json"


def test_eval_empty_split_exit_3(tmp_path, capsys):
    manifest = _synth(tmp_path, test=0)
    assert cli.main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "run"), "--epochs", "0"]
                    + TINY) == 0
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "model.wsck"), "--manifest", str(manifest),
                     "--out", str(tmp_path / "ev")])
    assert code == 3
    assert "empty split" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_4(tmp_path, capsys):
    manifest = _synth(tmp_path)
    code = cli.main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "run"), "--epochs", "1",
                     "--lr", "1e300", "--lr-schedule", "fixed"] + TINY)
    assert code == 4
    assert "numeric failure" in capsys.readouterr().err


def test_train_eval_deterministic_bytes(tmp_path, capsys):
    manifest = _synth(tmp_path)
    outs = []
    for run in ("a", "b"):
        assert cli.main(["train", "--manifest", str(manifest), "--out", str(tmp_path / run), "--epochs", "2",
                         "--batch-size", "2"] + TINY) == 0
        assert cli.main(["eval", "--checkpoint", str(tmp_path / run / "model.wsck"), "--manifest",
                         str(manifest), "--out", str(tmp_path / run / "ev"), "--renders", "1"]) == 0
        outs.append([(tmp_path / run / p).read_bytes() for p in
                     ("model.wsck", "run.json", "ev/report.json", "ev/renders/test_0000_error.png")])
    assert outs[0] == outs[1]
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch=")]
    assert lines[0].startswith("epoch=0 split=train loss=")


def test_experiment_pretraining_summary_rows(tmp_path, capsys):
    manifest = _synth(tmp_path)
    code = cli.main(["experiment", "pretraining", "--manifest", str(manifest), "--out", str(tmp_path / "exp"),
                     "--pretrain-epochs", "1", "--epochs", "1"] + TINY)
    assert code == 0
    summary = json.loads((tmp_path / "exp" / "summary.json").read_text())
    assert set(summary["rows"]) == {"scratch", "pretrained"}
    for row in summary["rows"].values():
        assert set(row) == set(cli.SEG_COLUMNS)


def test_experiment_reconstruction_summary(tmp_path):
    manifest = _synth(tmp_path)
    assert cli.main(["experiment", "reconstruction", "--manifest", str(manifest), "--out", str(tmp_path / "r"),
                     "--epochs", "1"] + TINY) == 0
    row = json.loads((tmp_path / "r" / "summary.json").read_text())["rows"]["autoencoder"]
    assert set(row) >= {"accuracy", "psnr", "ssim", "huber", "ssim_loss", "edge_loss", "mixed_loss"}


def test_transfer_and_resolution_experiment(tmp_path):
    rng = np.random.default_rng(0)
    hi_dir, lo_dir = tmp_path / "hi", tmp_path / "lo"
    hi_dir.mkdir()
    lo_dir.mkdir()
    for i in range(2):
        fine = rng.integers(100, 4000, (4, 64, 64)).astype(np.uint16)
        write_raster(MultibandRaster(fine, ("R", "G", "B", "NIR"), 0.0, 2.5, "w", f"2023-06-1{i}"),
                     hi_dir / f"scene{i}.ras")
        write_mask(LabelMask(synthetic_mask(rng, 64), SYNTHETIC_SCHEME, 2.5), hi_dir / f"scene{i}_label.ras")
        coarse = rng.integers(100, 4000, (9, 16, 16)).astype(np.uint16)
        bands = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B11", "B12")
        write_raster(MultibandRaster(coarse, bands, 0.0, 10.0, "w", f"2023-06-1{i}"), lo_dir / f"s2_{i}.ras")
    code = cli.main(["transfer", "--hires", str(hi_dir), "--lores", str(lo_dir), "--out", str(tmp_path / "t"),
                     "--hires-patch", "32", "--lores-patch", "8", "--scene-split", "scene0=train",
                     "--scene-split", "scene1=test"])
    assert code == 0
    pairing = json.loads((tmp_path / "t" / "pairing.json").read_text())
    assert [p["lores"] for p in pairing["pairs"]] == ["s2_0", "s2_1"]
    code = cli.main(["experiment", "resolution", "--lores-manifest", str(tmp_path / "t/lores/manifest.json"),
                     "--hires-manifest", str(tmp_path / "t/hires/manifest.json"), "--out", str(tmp_path / "x"),
                     "--epochs", "1", "--depth", "1", "--base-channels", "2", "--bridge-channels", "4"])
    assert code == 0
    rows = json.loads((tmp_path / "x" / "summary.json").read_text())["rows"]
    assert set(rows) == {"medium_resolution", "high_resolution"}


def test_console_script_help_runs():
    out = subprocess.run([sys.executable, "-m", "wetseg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "preprocess" in out.stdout
