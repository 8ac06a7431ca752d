"""Training loops for autoencoder pretraining and U-Net segmentation.

Batches are drawn in an order that is a pure function of ``(seed, epoch)``
(a Philox generator keyed on both), the best-validation weights are kept,
and patience-based early stopping ends a run once the validation loss stops
improving by ``min_delta``.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TextIO

import numpy as np

from wetseg import evaluation, losses
from wetseg import tensorcore as tc
from wetseg.datasets import SplitData, load_split
from wetseg.errors import ConfigError, NumericError
from wetseg.nnmodels import (
    AutoencoderSpec,
    ModelCheckpoint,
    UNetSpec,
    build_autoencoder,
    build_unet,
    checkpoint_from_model,
    is_encoder_param,
    load_checkpoint,
    save_checkpoint,
    transfer_encoder,
)
from wetseg.rascore import UNLABELED, DatasetManifest

TASKS = ("autoencoder", "unet")
SCHEDULES = ("fixed", "cosine")
INITS = ("scratch", "from_checkpoint")
LOSSES = {"autoencoder": ("mixed",), "unet": ("dice", "dice+ce")}


def cosine_lr(t: float, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine-annealed rate at epoch ``t`` of ``total``: lr_max at 0, lr_min at total."""
    if total < 1:
        raise ValueError(f"total epochs must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside schedule [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class TrainConfig:
    task: str = "unet"
    epochs: int = 300
    batch_size: int = 8
    lr_schedule: str = "cosine"
    lr: float = 1e-3
    lr_min: float = 1e-4
    dropout_p: float = 0.15
    seed: int = 0
    loss: str = "dice"
    huber_weight: float = 0.5
    ssim_weight: float = 0.4
    edge_weight: float = 0.1
    init: str = "scratch"
    init_checkpoint: str | None = None
    freeze_encoder: bool = False
    patience: int = 0          # 0 disables early stopping
    min_delta: float = 1e-5
    base_channels: int = 64
    depth: int = 4
    bridge_channels: int = 512
    eval_batch_size: int = 8
    deterministic: bool = True

    @classmethod
    def defaults(cls, task: str, high_resolution: bool = False, **overrides) -> TrainConfig:
        """Reference settings: AE fixed 0.001 for 200 epochs, U-Net cosine 0.001 -> 0.0001 for 300."""
        base = dict(task=task, batch_size=4 if high_resolution else 8)
        if task == "autoencoder":
            base.update(epochs=200, lr_schedule="fixed", loss="mixed")
        else:
            base.update(epochs=300, lr_schedule="cosine", loss="dice")
        base.update(overrides)
        return cls(**base)

    def problems(self) -> list[str]:
        out = []
        if self.task not in TASKS:
            out.append(f"task: must be one of {TASKS}, got {self.task!r}")
        elif self.loss not in LOSSES[self.task]:
            out.append(f"loss: {self.task} supports {LOSSES[self.task]}, got {self.loss!r}")
        if self.epochs < 0:
            out.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.eval_batch_size < 1:
            out.append(f"eval_batch_size: must be >= 1, got {self.eval_batch_size}")
        if self.lr_schedule not in SCHEDULES:
            out.append(f"lr_schedule: must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if not self.lr > 0:
            out.append(f"lr: must be > 0, got {self.lr}")
        if self.lr_schedule == "cosine" and not (self.lr >= self.lr_min > 0):
            out.append(f"lr_min: need lr >= lr_min > 0, got lr={self.lr} lr_min={self.lr_min}")
        if not 0.0 <= self.dropout_p < 1.0:
            out.append(f"dropout_p: must be in [0, 1), got {self.dropout_p}")
        if min(self.huber_weight, self.ssim_weight, self.edge_weight) < 0 or \
                self.huber_weight + self.ssim_weight + self.edge_weight <= 0:
            out.append("loss weights: must be nonnegative and not all zero")
        if self.init not in INITS:
            out.append(f"init: must be one of {INITS}, got {self.init!r}")
        elif self.init == "from_checkpoint" and not self.init_checkpoint:
            out.append("init_checkpoint: required when init is 'from_checkpoint'")
        if self.init == "from_checkpoint" and self.task != "unet":
            out.append("init: from_checkpoint only applies to the unet task")
        if self.patience < 0:
            out.append(f"patience: must be >= 0, got {self.patience}")
        if self.min_delta < 0:
            out.append(f"min_delta: must be >= 0, got {self.min_delta}")
        for name in ("base_channels", "depth", "bridge_channels"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.seed < 0:
            out.append(f"seed: must be >= 0, got {self.seed}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown train option" for k in unknown])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError([str(exc)]) from None

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "fixed":
            return self.lr
        return cosine_lr(epoch, max(self.epochs, 1), self.lr, self.lr_min)

    def loss_weights(self) -> losses.MixedLossWeights:
        return losses.MixedLossWeights(self.huber_weight, self.ssim_weight, self.edge_weight)


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    seed: int
    task: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    stopped_early: bool = False
    final_val_metrics: dict | None = None
    initial_digests: dict = field(default_factory=dict)
    checkpoint: str | None = None
    wall_time_s: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.config.get("deterministic"):
            d.pop("wall_time_s")
        return d

    def to_json(self) -> str:
        return json.dumps(evaluation._jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; depends only on (seed, epoch)."""
    return np.random.Generator(np.random.Philox(key=[seed, epoch])).permutation(n)


def parameter_digests(model) -> dict[str, str]:
    """SHA-256 over encoder and non-encoder parameters, for auditing initialisation."""
    groups = {"encoder": hashlib.sha256(), "decoder": hashlib.sha256()}
    for name, p in model.params.items():
        h = groups["encoder" if is_encoder_param(name) else "decoder"]
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return {k: h.hexdigest() for k, h in groups.items()}


def _emit(progress: TextIO | None, epoch: int, split: str, loss: float, acc: float | None) -> None:
    if progress is None:
        return
    acc_s = "nan" if acc is None else f"{acc:.6f}"
    progress.write(f"epoch={epoch} split={split} loss={loss:.6f} acc={acc_s}\n")
    progress.flush()


def _fit(model, train: SplitData, val: SplitData | None, config: TrainConfig, batch_loss, validate,
         progress: TextIO | None) -> tuple[RunRecord, ModelCheckpoint]:
    start = time.perf_counter()
    record = RunRecord(config.config_hash(), config.to_dict(), config.seed, config.task,
                       initial_digests=parameter_digests(model))
    best_state = model.params.state_dict()
    best_loss = math.inf
    ref_loss = math.inf
    waited = 0
    n = len(train)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = epoch_order(n, config.seed, epoch)
        total, seen, hits, scored = 0.0, 0, 0, 0
        for b, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            model.params.zero_grad()
            try:
                loss, h, m = batch_loss(idx)
                if not math.isfinite(loss.item()):
                    raise NumericError("loss is not finite")
                loss.backward()
            except NumericError as exc:
                raise NumericError(f"non-finite value at epoch {epoch} batch {b}: {exc}") from None
            tc.adam_step(model.params, lr)
            total += loss.item() * len(idx)
            seen += len(idx)
            hits += h
            scored += m
        train_loss = total / seen
        train_acc = hits / scored if scored else None
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_accuracy": train_acc}
        if val is not None:
            val_loss, metrics = validate(val)
            row.update(val_loss=val_loss, val_metrics=metrics)
        else:
            val_loss, metrics = train_loss, {}
        _emit(progress, epoch, "train", train_loss, train_acc)
        if val is not None:
            _emit(progress, epoch, "val", val_loss, metrics.get("accuracy"))
        record.epochs.append(row)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = model.params.state_dict()
            record.best_epoch, record.best_val_loss = epoch, val_loss
        if val_loss < ref_loss - config.min_delta:
            ref_loss, waited = val_loss, 0
        else:
            waited += 1
            if config.patience and waited >= config.patience:
                record.stopped_early = True
                break
    model.params.load_state_dict(best_state)
    if not config.deterministic:
        record.wall_time_s = time.perf_counter() - start
    provenance = {"config": config.to_dict(), "config_hash": record.config_hash, "best_epoch": record.best_epoch,
                  "epochs_run": len(record.epochs)}
    return record, checkpoint_from_model(model, provenance)


def _finish(record: RunRecord, ckpt: ModelCheckpoint, out_dir: str | Path | None) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out_dir / "model.wsck")
    record.checkpoint = "model.wsck"
    (out_dir / "run.json").write_text(record.to_json())


def _optional_split(manifest: DatasetManifest, name: str, labeled: bool) -> SplitData | None:
    if not manifest.split(name):
        return None
    return load_split(manifest, name, labeled)


def train_autoencoder(manifest: DatasetManifest | None, config: TrainConfig, out_dir=None, *,
                      train_data: SplitData | None = None, val_data: SplitData | None = None,
                      progress: TextIO | None = None) -> tuple[RunRecord, ModelCheckpoint]:
    """Pretrain an autoencoder on the train split (labels ignored) with the mixed loss."""
    config.validate()
    if config.task != "autoencoder":
        raise ConfigError([f"task: expected 'autoencoder', got {config.task!r}"])
    train = train_data or load_split(manifest, "train")
    val = val_data if val_data is not None or manifest is None else _optional_split(manifest, "val", False)
    spec = AutoencoderSpec(train.x.shape[1], config.base_channels, config.depth, config.bridge_channels,
                           config.dropout_p)
    model = build_autoencoder(spec, config.seed)
    weights = config.loss_weights()
    window = min(11, train.x.shape[2])

    def batch_loss(idx):
        x = train.x[idx]
        out = model(x, training=True)
        close = np.abs(out.data - x) <= evaluation.DEFAULT_TOLERANCE
        return losses.mixed_loss(out, x, weights, window), int(close.sum()), close.size

    def validate(data):
        acc = evaluation.ReconstructionAccumulator(weights=weights, window_size=window)
        for i, out in evaluation.predict_batches(model, data.x, config.eval_batch_size):
            acc.add(out, data.x[i:i + len(out)])
        r = acc.result()
        return r["mixed_loss"], {"accuracy": r["accuracy"], "psnr": r["psnr"], "ssim": r["ssim"]}

    record, ckpt = _fit(model, train, val, config, batch_loss, validate, progress)
    if val is not None:
        record.final_val_metrics = evaluation.evaluate_model(model, val, tol=evaluation.DEFAULT_TOLERANCE,
                                                             weights=weights, batch_size=config.eval_batch_size)
    _finish(record, ckpt, out_dir)
    return record, ckpt


def train_unet(manifest: DatasetManifest | None, config: TrainConfig, out_dir=None, *,
               train_data: SplitData | None = None, val_data: SplitData | None = None,
               scheme=None, pretrained: ModelCheckpoint | None = None,
               progress: TextIO | None = None) -> tuple[RunRecord, ModelCheckpoint]:
    """Train a U-Net with Dice loss on labelled train patches.

    With ``init='from_checkpoint'`` (or an explicit ``pretrained`` checkpoint)
    the autoencoder's encoder and bridge are copied in before the first step.
    """
    config.validate()
    if config.task != "unet":
        raise ConfigError([f"task: expected 'unet', got {config.task!r}"])
    scheme = scheme or manifest.class_scheme
    train = train_data or load_split(manifest, "train", labeled=True)
    val = val_data if val_data is not None or manifest is None else _optional_split(manifest, "val", True)
    k = len(scheme)
    spec = UNetSpec(train.x.shape[1], config.base_channels, config.depth, config.bridge_channels,
                    config.dropout_p, num_classes=k)
    model = build_unet(spec, config.seed)
    if pretrained is None and config.init == "from_checkpoint":
        pretrained = load_checkpoint(config.init_checkpoint, expected_kind="autoencoder")
    if pretrained is not None:
        transfer_encoder(pretrained, model, freeze=config.freeze_encoder)

    def batch_loss(idx):
        logits = model(train.x[idx], training=True)
        y = train.y[idx]
        valid = y != UNLABELED
        hits = int((logits.data.argmax(axis=1) == y)[valid].sum())
        return losses.segmentation_loss(logits, y, k, config.loss), hits, int(valid.sum())

    def validate(data):
        m = evaluation.evaluate_model(model, data, scheme, config.eval_batch_size)
        return m.dice_loss, {"accuracy": m.overall_accuracy, "dice": m.macro_dice, "iou": m.macro_iou}

    record, ckpt = _fit(model, train, val, config, batch_loss, validate, progress)
    if val is not None:
        record.final_val_metrics = evaluation.evaluate_model(model, val, scheme, config.eval_batch_size).to_dict()
    _finish(record, ckpt, out_dir)
    return record, ckpt
