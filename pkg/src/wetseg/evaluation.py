"""Metric suite for reconstruction and segmentation, plus PNG renders.

Split-level numbers are computed from accumulated counts (one global
confusion matrix, summed error terms), never by averaging per-image scores,
so results do not depend on how patches are grouped or ordered.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from wetseg import losses
from wetseg import tensorcore as tc
from wetseg.datasets import load_split
from wetseg.errors import CheckpointError, DataError
from wetseg.rascore import UNLABELED, ClassScheme, DatasetManifest, generic_scheme

DEFAULT_TOLERANCE = 0.05


# reconstruction -----------------------------------------------------------------


def reconstruction_accuracy(pred, target, tol: float = DEFAULT_TOLERANCE) -> float:
    """Fraction of elements with |pred - target| <= tol."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target) <= tol))


def psnr(pred, target) -> float:
    """PSNR in dB for data with peak 1.0; identical inputs give ``math.inf``."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


class ReconstructionAccumulator:
    def __init__(self, tol: float = DEFAULT_TOLERANCE, weights: losses.MixedLossWeights = losses.MixedLossWeights(),
                 window_size: int = 11):
        self.tol = tol
        self.weights = weights
        self.window_size = window_size
        self.n = 0
        self.within = 0
        self.sq = 0.0
        self.huber = 0.0
        self.edge = 0.0
        self.ssim_sum = 0.0
        self.ssim_n = 0

    def add(self, pred: np.ndarray, target: np.ndarray) -> None:
        pred64, target64 = np.asarray(pred, np.float64), np.asarray(target, np.float64)
        err = np.abs(pred64 - target64)
        self.n += err.size
        self.within += int((err <= self.tol).sum())
        self.sq += float((err ** 2).sum())
        with tc.no_grad():
            self.huber += losses.huber_loss(pred, target).item() * err.size
            self.edge += losses.edge_loss(pred, target).item() * err.size
            smap = losses.ssim_map(pred, target, self.window_size).data
        self.ssim_sum += float(smap.astype(np.float64).sum())
        self.ssim_n += smap.size

    def result(self) -> dict:
        if self.n == 0:
            raise DataError("empty split: nothing accumulated")
        mse = self.sq / self.n
        s = self.ssim_sum / self.ssim_n
        huber, edge = self.huber / self.n, self.edge / self.n
        w = self.weights
        return {
            "accuracy": self.within / self.n,
            "psnr": math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse),
            "ssim": s,
            "huber": huber,
            "ssim_loss": 1.0 - s,
            "edge_loss": edge,
            "mixed_loss": w.alpha * huber + w.beta * (1.0 - s) + w.gamma * edge,
            "tolerance": self.tol,
        }


# segmentation ---------------------------------------------------------------------


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """C[i, j] = pixels of true class i predicted as j; unlabeled truth pixels are skipped."""
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"mask shape mismatch: {truth.shape} vs {pred.shape}")
    valid = truth != UNLABELED
    t = truth[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes or t.min() < 0 or p.min() < 0):
        raise ValueError(f"class id outside scheme of {num_classes} classes")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class SegmentationMetrics:
    confusion: np.ndarray
    labels: list[str]
    overall_accuracy: float
    weighted_accuracy: float
    macro_dice: float
    macro_iou: float
    macro_precision: float
    macro_recall: float
    per_class: list[dict]
    dice_loss: float | None = None
    mean_probabilities: list[float] | None = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("overall_accuracy", "weighted_accuracy", "macro_dice", "macro_iou",
                                           "macro_precision", "macro_recall", "dice_loss", "per_class")}
        d["confusion_matrix"] = self.confusion.tolist()
        if self.mean_probabilities is not None:
            d["mean_probabilities"] = dict(zip(self.labels, self.mean_probabilities))
        return d


def metrics_from_confusion(cm: np.ndarray, labels: list[str] | None = None) -> SegmentationMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    labels = labels or [f"class_{i}" for i in range(k)]
    total = int(cm.sum())
    if total == 0:
        raise DataError("no labelled pixels to score")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    per_class, included = [], []
    for c in range(k):
        s, p, t = int(support[c]), int(predicted[c]), int(tp[c])
        row = {"id": c, "label": labels[c], "support": s, "predicted": p,
               "precision": t / p if p else 0.0, "recall": t / s if s else 0.0,
               "dice": 2 * t / (s + p) if s + p else 0.0, "iou": t / (s + p - t) if s + p else 0.0,
               "included": bool(s + p)}
        per_class.append(row)
        if s + p:
            included.append(row)

    def macro(key):
        return sum(r[key] for r in included) / len(included)

    # exact rational arithmetic so the recall-weighted sum reproduces trace/total bit for bit
    weighted = float(sum((Fraction(int(support[c]), total) * Fraction(int(tp[c]), int(support[c]))
                          for c in range(k) if support[c]), Fraction(0)))
    return SegmentationMetrics(cm, list(labels), int(tp.sum()) / total, weighted, macro("dice"), macro("iou"),
                               macro("precision"), macro("recall"), per_class)


def segmentation_metrics(pred_mask, true_mask, scheme: ClassScheme | int) -> SegmentationMetrics:
    if isinstance(scheme, int):
        scheme = generic_scheme(scheme)
    return metrics_from_confusion(confusion_matrix(true_mask, pred_mask, len(scheme)), scheme.labels)


class SegmentationAccumulator:
    """Sums confusion counts and soft-Dice terms across batches."""

    def __init__(self, scheme: ClassScheme, eps: float = 1e-6):
        self.scheme = scheme
        k = len(scheme)
        self.eps = eps
        self.cm = np.zeros((k, k), dtype=np.int64)
        self.inter = np.zeros(k)
        self.psum = np.zeros(k)
        self.gsum = np.zeros(k)
        self.prob_sum = np.zeros(k)
        self.n_pixels = 0

    def add(self, probs: np.ndarray, truth: np.ndarray) -> np.ndarray:
        """Add a batch of N x K x H x W probabilities; returns the argmax masks."""
        probs = np.asarray(probs, dtype=np.float64)
        truth = np.asarray(truth)
        if truth.ndim == 2:
            truth, probs = truth[None], probs[None] if probs.ndim == 3 else probs
        k = len(self.scheme)
        pred = probs.argmax(axis=1).astype(np.uint8)
        self.cm += confusion_matrix(truth, pred, k)
        valid = truth != UNLABELED
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, np.where(valid, truth, 0).astype(np.int64)[:, None], 1.0, axis=1)
        onehot *= valid[:, None]
        pv = probs * valid[:, None]
        self.inter += (pv * onehot).sum(axis=(0, 2, 3))
        self.psum += pv.sum(axis=(0, 2, 3))
        self.gsum += onehot.sum(axis=(0, 2, 3))
        self.prob_sum += probs.sum(axis=(0, 2, 3))
        self.n_pixels += probs.shape[0] * probs.shape[2] * probs.shape[3]
        return pred

    def dice_loss(self) -> float:
        predicted = self.cm.sum(axis=0) > 0
        include = (self.gsum > 0) | predicted
        if not include.any():
            return 0.0
        dice = (2 * self.inter + self.eps) / (self.psum + self.gsum + self.eps)
        return float(1.0 - dice[include].mean())

    def result(self) -> SegmentationMetrics:
        m = metrics_from_confusion(self.cm, self.scheme.labels)
        m.dice_loss = self.dice_loss()
        m.mean_probabilities = (self.prob_sum / max(self.n_pixels, 1)).tolist()
        return m


# renders --------------------------------------------------------------------------


def render_segmentation(mask: np.ndarray, scheme: ClassScheme, probs: np.ndarray | None = None) -> np.ndarray:
    """Colour a class mask with the scheme palette; unlabeled pixels are black.

    With ``probs`` (K x H x W) a legend block listing each class's image-average
    probability is appended below the map.
    """
    mask = np.asarray(mask)
    if mask.size and int(mask[mask != UNLABELED].max(initial=0)) >= len(scheme):
        raise ValueError(f"palette has no colour for class {int(mask[mask != UNLABELED].max())}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[:len(scheme)] = scheme.palette()
    img = lut[mask]
    if probs is None:
        return img
    return _append_legend(img, scheme, class_legend(probs, scheme))


def class_legend(probs: np.ndarray, scheme: ClassScheme) -> list[tuple[str, float]]:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != len(scheme):
        raise ValueError(f"{probs.shape[0]} probability channels for {len(scheme)} classes")
    means = probs.reshape(probs.shape[0], -1).mean(axis=1)
    return [(label, float(v)) for label, v in zip(scheme.labels, means)]


def _append_legend(img: np.ndarray, scheme: ClassScheme, legend: list[tuple[str, float]]) -> np.ndarray:
    from PIL import Image, ImageDraw

    row_h = 14
    width = max(img.shape[1], 220)
    block = Image.new("RGB", (width, row_h * len(legend) + 4), (255, 255, 255))
    draw = ImageDraw.Draw(block)
    palette = scheme.palette()
    for i, (label, p) in enumerate(legend):
        y = 2 + i * row_h
        draw.rectangle([2, y, 12, y + 10], fill=tuple(int(v) for v in palette[i]))
        draw.text((16, y - 1), f"{label}: {p:.3f}", fill=(0, 0, 0))
    canvas = np.full((img.shape[0] + block.height, width, 3), 255, dtype=np.uint8)
    canvas[:img.shape[0], :img.shape[1]] = img
    canvas[img.shape[0]:] = np.asarray(block)
    return canvas


def render_error_map(probs: np.ndarray, true_mask: np.ndarray, scheme: ClassScheme) -> np.ndarray:
    """Correct pixels as dimmed truth colour; errors pure red scaled by the wrong class's probability.

    Dimmed colours keep green and blue >= 60, so a pixel is "red" (G = B = 0)
    exactly when it is misclassified.
    """
    probs = np.asarray(probs, dtype=np.float64)
    true_mask = np.asarray(true_mask)
    pred = probs.argmax(axis=0)
    conf = probs.max(axis=0)
    lut = np.zeros((256, 3), dtype=np.float64)
    lut[:len(scheme)] = scheme.palette()
    img = (lut[true_mask] * 0.4 + 60).astype(np.uint8)
    wrong = (pred != true_mask) & (true_mask != UNLABELED)
    img[true_mask == UNLABELED] = 0
    img[wrong] = 0
    img[wrong, 0] = np.maximum(np.round(conf[wrong] * 255), 1).astype(np.uint8)
    return img


def red_pixels(img: np.ndarray) -> np.ndarray:
    return (img[..., 0] > 0) & (img[..., 1] == 0) & (img[..., 2] == 0)


def render_reconstruction_error(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel mean absolute band error on a blue (small) to yellow (large) ramp."""
    err = np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64)).mean(axis=0)
    peak = err.max()
    t = err / peak if peak > 0 else np.zeros_like(err)
    return np.stack([255 * t, 255 * t, 255 * (1 - t)], axis=-1).round().astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


# split evaluation -----------------------------------------------------------------


@dataclass
class MetricsReport:
    task: str
    dataset: dict
    checkpoint: str
    reconstruction: dict | None = None
    segmentation: dict | None = None
    palette: dict | None = None
    renders: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task": self.task, "dataset": self.dataset, "checkpoint": self.checkpoint,
                "reconstruction": self.reconstruction, "segmentation": self.segmentation,
                "palette": self.palette, "renders": self.renders}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def predict_batches(model, x: np.ndarray, batch_size: int = 8):
    with tc.no_grad():
        for i in range(0, len(x), batch_size):
            yield i, model(x[i:i + batch_size], training=False).data


def evaluate_model(model, data, scheme: ClassScheme | None = None, batch_size: int = 8,
                   tol: float = DEFAULT_TOLERANCE, weights: losses.MixedLossWeights = losses.MixedLossWeights()):
    """Metrics of ``model`` over a loaded split (:class:`~wetseg.datasets.SplitData`)."""
    if len(data) == 0:
        raise DataError("empty split")
    if model.kind == "autoencoder":
        acc = ReconstructionAccumulator(tol, weights, window_size=min(11, data.x.shape[2], data.x.shape[3]))
        for i, out in predict_batches(model, data.x, batch_size):
            acc.add(out, data.x[i:i + len(out)])
        return acc.result()
    scheme = scheme or generic_scheme(model.spec.num_classes)
    acc = SegmentationAccumulator(scheme)
    for i, logits in predict_batches(model, data.x, batch_size):
        with tc.no_grad():
            probs = tc.softmax_channels(tc.Tensor(logits)).data
        acc.add(probs, data.y[i:i + len(probs)])
    return acc.result()


def evaluate(checkpoint, manifest: DatasetManifest, split: str = "test", *, expected_kind: str | None = None,
             batch_size: int = 8, tol: float = DEFAULT_TOLERANCE,
             weights: losses.MixedLossWeights = losses.MixedLossWeights(),
             render_dir: str | Path | None = None, max_renders: int = 4, manifest_name: str = "") -> MetricsReport:
    """Evaluate a checkpoint (path or ModelCheckpoint) on one manifest split."""
    from wetseg.nnmodels import ModelCheckpoint, encode_checkpoint, load_checkpoint

    ckpt = checkpoint if isinstance(checkpoint, ModelCheckpoint) else load_checkpoint(checkpoint)
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model, expected {expected_kind!r}")
    model = ckpt.build()
    segmentation = model.kind == "unet"
    data = load_split(manifest, split, labeled=segmentation)
    if segmentation and model.spec.num_classes != len(manifest.class_scheme):
        raise CheckpointError(f"model predicts {model.spec.num_classes} classes but the manifest scheme "
                              f"{manifest.class_scheme.name!r} has {len(manifest.class_scheme)}")
    result = evaluate_model(model, data, manifest.class_scheme, batch_size, tol, weights)
    report = MetricsReport(
        task="segmentation" if segmentation else "reconstruction",
        dataset={"manifest": manifest_name, "split": split, "patches": len(data)},
        checkpoint=hashlib.sha256(encode_checkpoint(ckpt)).hexdigest(),
        palette=manifest.class_scheme.to_dict() if segmentation else None,
    )
    if segmentation:
        report.segmentation = result.to_dict()
    else:
        report.reconstruction = result
    if render_dir is not None:
        report.renders = _write_renders(model, data, manifest.class_scheme, Path(render_dir), max_renders)
    return report


def _write_renders(model, data, scheme, out: Path, limit: int) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    n = min(limit, len(data))
    with tc.no_grad():
        out_batch = model(data.x[:n], training=False).data
    for i in range(n):
        stem = Path(data.entries[i].patch).stem
        if model.kind == "unet":
            probs = tc.softmax_channels(tc.Tensor(out_batch[i:i + 1])).data[0]
            pred = probs.argmax(axis=0).astype(np.uint8)
            images = {"prediction": render_segmentation(pred, scheme, probs),
                      "truth": render_segmentation(data.y[i], scheme),
                      "error": render_error_map(probs, data.y[i], scheme)}
        else:
            images = {"reconstruction_error": render_reconstruction_error(out_batch[i], data.x[i])}
        for kind, img in images.items():
            name = f"{stem}_{kind}.png"
            save_png(img, out / name)
            written.append(name)
    return written
