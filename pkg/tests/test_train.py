import io
import json
import math

import numpy as np
import pytest

from wetseg import tensorcore as tc
from wetseg.datasets import SplitData, load_split
from wetseg.errors import ConfigError, NumericError, TransferError
from wetseg.evaluation import evaluate
from wetseg.nnmodels import AutoencoderSpec, build_autoencoder, checkpoint_from_model, save_checkpoint
from wetseg.synthetic import write_dataset
from wetseg.train import (
    TrainConfig,
    cosine_lr,
    epoch_order,
    parameter_digests,
    train_autoencoder,
    train_unet,
)

TINY = dict(base_channels=4, depth=2, bridge_channels=8)


@pytest.fixture(scope="module")
def fixture_set(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("synth"), {"train": 6, "val": 4, "test": 4}, size=16, seed=3)


def test_cosine_examples_and_properties():
    assert cosine_lr(0, 10, 1e-3, 1e-4) == 1e-3
    assert cosine_lr(10, 10, 1e-3, 1e-4) == pytest.approx(1e-4)
    assert cosine_lr(5, 10, 1e-3, 1e-4) == pytest.approx(0.00055)
    vals = [cosine_lr(t, 30, 1e-3, 1e-4) for t in range(31)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    for t in range(31):
        assert vals[t] - 1e-4 == pytest.approx(1e-3 - vals[30 - t], abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3, 1e-4)


def test_config_validation_lists_every_problem():
    cfg = TrainConfig(batch_size=0, lr=1e-5, lr_min=1e-4, epochs=-1, init="from_checkpoint")
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    text = " ".join(info.value.problems)
    for field in ("batch_size", "lr_min", "epochs", "init_checkpoint"):
        assert field in text
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})


def test_reference_defaults():
    ae = TrainConfig.defaults("autoencoder")
    assert (ae.epochs, ae.lr_schedule, ae.lr, ae.dropout_p, ae.batch_size) == (200, "fixed", 1e-3, 0.15, 8)
    un = TrainConfig.defaults("unet", high_resolution=True)
    assert (un.epochs, un.lr_schedule, un.lr_min, un.batch_size) == (300, "cosine", 1e-4, 4)


def test_epoch_order_pure_function():
    a = epoch_order(50, 7, 3)
    assert np.array_equal(a, epoch_order(50, 7, 3))
    assert not np.array_equal(a, epoch_order(50, 7, 4))
    assert sorted(a.tolist()) == list(range(50))


def test_zero_epoch_autoencoder_is_initialisation(fixture_set):
    cfg = TrainConfig.defaults("autoencoder", epochs=0, **TINY)
    rec, ckpt = train_autoencoder(fixture_set, cfg)
    assert rec.epochs == []
    init = build_autoencoder(AutoencoderSpec(9, 4, 2, 8), seed=0)
    for name, p in init.params.items():
        assert p.data.tobytes() == ckpt.tensors[name].tobytes()


def test_autoencoder_run_record_and_progress(fixture_set, tmp_path):
    out = io.StringIO()
    cfg = TrainConfig.defaults("autoencoder", epochs=2, batch_size=3, **TINY)
    rec, _ = train_autoencoder(fixture_set, cfg, tmp_path, progress=out)
    assert len(rec.epochs) == 2
    assert all(math.isfinite(r["train_loss"]) and math.isfinite(r["val_loss"]) for r in rec.epochs)
    lines = out.getvalue().splitlines()
    assert lines[0].startswith("epoch=0 split=train loss=") and " acc=" in lines[0]
    assert lines[1].startswith("epoch=0 split=val loss=")
    saved = json.loads((tmp_path / "run.json").read_text())
    assert saved["checkpoint"] == "model.wsck" and "wall_time_s" not in saved
    assert (tmp_path / "model.wsck").exists()


def test_deterministic_runs_are_identical(fixture_set, tmp_path):
    cfg = TrainConfig.defaults("unet", epochs=2, batch_size=4, **TINY)
    train_unet(fixture_set, cfg, tmp_path / "a")
    train_unet(fixture_set, cfg, tmp_path / "b")
    for name in ("model.wsck", "run.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_best_checkpoint_never_worse_than_seen(fixture_set):
    cfg = TrainConfig.defaults("unet", epochs=4, batch_size=2, lr=1e-2, **TINY)
    rec, _ = train_unet(fixture_set, cfg)
    assert rec.best_val_loss == min(r["val_loss"] for r in rec.epochs)
    assert rec.epochs[rec.best_epoch]["val_loss"] == rec.best_val_loss


def test_early_stopping_patience(fixture_set):
    cfg = TrainConfig.defaults("unet", epochs=30, batch_size=6, lr=1e-6, lr_schedule="fixed", patience=2,
                               min_delta=1.0, **TINY)
    rec, _ = train_unet(fixture_set, cfg)
    assert rec.stopped_early and len(rec.epochs) == 3


def test_zero_epoch_unet_matches_eval_module(fixture_set, tmp_path):
    ae = build_autoencoder(AutoencoderSpec(9, **TINY), seed=5)
    cfg = TrainConfig.defaults("unet", epochs=0, **TINY)
    rec, ckpt = train_unet(fixture_set, cfg, pretrained=checkpoint_from_model(ae))
    report = evaluate(ckpt, fixture_set, "val")
    assert rec.final_val_metrics == report.segmentation


def test_from_checkpoint_channel_mismatch_before_any_step(fixture_set, tmp_path):
    ae = build_autoencoder(AutoencoderSpec(4, **TINY))
    save_checkpoint(checkpoint_from_model(ae), tmp_path / "ae.wsck")
    cfg = TrainConfig.defaults("unet", epochs=5, init="from_checkpoint", init_checkpoint=str(tmp_path / "ae.wsck"),
                               **TINY)
    with pytest.raises(TransferError, match="encoder.block0.conv1.weight"):
        train_unet(fixture_set, cfg)


def test_scratch_and_pretrained_differ_only_in_encoder(fixture_set):
    ae = build_autoencoder(AutoencoderSpec(9, **TINY), seed=9)
    cfg = TrainConfig.defaults("unet", epochs=0, **TINY)
    scratch, _ = train_unet(fixture_set, cfg)
    pre, _ = train_unet(fixture_set, cfg, pretrained=checkpoint_from_model(ae))
    assert scratch.initial_digests["decoder"] == pre.initial_digests["decoder"]
    assert scratch.initial_digests["encoder"] != pre.initial_digests["encoder"]


def test_frozen_encoder_step_changes_no_encoder_parameter(fixture_set):
    ae = build_autoencoder(AutoencoderSpec(9, **TINY), seed=2)
    ckpt = checkpoint_from_model(ae)
    cfg = TrainConfig.defaults("unet", epochs=1, batch_size=6, freeze_encoder=True, **TINY)
    _, out = train_unet(fixture_set, cfg, pretrained=ckpt)
    for name, value in out.tensors.items():
        if name.startswith(("encoder.", "bridge.")):
            assert value.tobytes() == ckpt.tensors[name].tobytes()


def test_non_finite_loss_reports_epoch_and_batch(fixture_set):
    data = load_split(fixture_set, "train")
    x = data.x.copy()
    x[1, 0, 0, 0] = np.nan
    bad = SplitData(x, None, data.entries)
    cfg = TrainConfig.defaults("autoencoder", epochs=1, batch_size=6, **TINY)
    with pytest.raises(NumericError, match="epoch 0 batch 0"):
        train_autoencoder(None, cfg, train_data=bad)


def test_task_mismatch_rejected(fixture_set):
    with pytest.raises(ConfigError):
        train_unet(fixture_set, TrainConfig.defaults("autoencoder", epochs=0, **TINY))


def test_parameter_digest_groups():
    ae = build_autoencoder(AutoencoderSpec(9, **TINY))
    d = parameter_digests(ae)
    ae.params["head.bias"].data = ae.params["head.bias"].data + 1
    d2 = parameter_digests(ae)
    assert d["encoder"] == d2["encoder"] and d["decoder"] != d2["decoder"]
