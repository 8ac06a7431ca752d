"""Differentiable reconstruction and segmentation losses on NCHW tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wetseg import tensorcore as tc
from wetseg.rascore import UNLABELED

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
_EDGE_EPS = 1e-12


@dataclass(frozen=True)
class MixedLossWeights:
    alpha: float = 0.5  # Huber
    beta: float = 0.4   # 1 - SSIM
    gamma: float = 0.1  # Sobel edge

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"mixed-loss weights must be nonnegative, got {self}")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("mixed-loss weights must not all be zero")


def _pair(pred, target) -> tuple[tc.Tensor, tc.Tensor]:
    pred, target = tc.as_tensor(pred), tc.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return pred, target


def huber_loss(pred, target, delta: float = 1.0) -> tc.Tensor:
    """Mean Huber loss: 0.5 e^2 for |e| <= delta, delta (|e| - delta/2) beyond."""
    pred, target = _pair(pred, target)
    err = tc.tabs(pred - target)
    inner = tc.clip(err, None, delta)
    # 0.5*min(|e|,d)^2 + d*(|e| - min(|e|,d)) is the piecewise form in one expression
    return (inner * inner * 0.5 + (err - inner) * delta).mean()


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _planes(x: tc.Tensor) -> tc.Tensor:
    n, c, h, w = x.shape
    return x.reshape((n * c, 1, h, w))


def ssim_map(pred, target, window_size: int = 11, sigma: float = 1.5) -> tc.Tensor:
    """Local SSIM over the valid region of a Gaussian window, one plane per band."""
    pred, target = _pair(pred, target)
    if pred.ndim != 4:
        raise ValueError(f"ssim expects N x C x H x W, got {pred.shape}")
    if pred.shape[2] < window_size or pred.shape[3] < window_size:
        raise ValueError(f"spatial dims {pred.shape[2]}x{pred.shape[3]} smaller than the "
                         f"{window_size}x{window_size} SSIM window")
    g = gaussian_kernel(window_size, sigma).sum(axis=1)  # the window is separable
    col = tc.Tensor(g.reshape(1, 1, window_size, 1))
    row = tc.Tensor(g.reshape(1, 1, 1, window_size))
    x, y = _planes(pred), _planes(target)

    def blur(t):
        return tc.conv2d(tc.conv2d(t, col), row)

    mx, my = blur(x), blur(y)
    mxx, myy, mxy = mx * mx, my * my, mx * my
    sxx = blur(x * x) - mxx
    syy = blur(y * y) - myy
    sxy = blur(x * y) - mxy
    num = (mxy * 2.0 + SSIM_C1) * (sxy * 2.0 + SSIM_C2)
    den = (mxx + myy + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(pred, target, window_size: int = 11, sigma: float = 1.5) -> tc.Tensor:
    return ssim_map(pred, target, window_size, sigma).mean()


def ssim_loss(pred, target, window_size: int = 11, sigma: float = 1.5) -> tc.Tensor:
    return 1.0 - ssim(pred, target, window_size, sigma)


def sobel_magnitude(x) -> tc.Tensor:
    """Per-band Sobel gradient magnitude with replicate padding, same shape as ``x``."""
    x = tc.as_tensor(x)
    planes = tc.pad_replicate(_planes(x), 1)
    gx = tc.conv2d(planes, tc.Tensor(SOBEL_X[None, None]))
    gy = tc.conv2d(planes, tc.Tensor(SOBEL_Y[None, None]))
    return tc.sqrt(gx * gx + gy * gy + _EDGE_EPS).reshape(x.shape)


def edge_loss(pred, target) -> tc.Tensor:
    """Mean absolute difference of Sobel gradient magnitudes."""
    pred, target = _pair(pred, target)
    return tc.tabs(sobel_magnitude(pred) - sobel_magnitude(target)).mean()


def mixed_loss(pred, target, weights: MixedLossWeights = MixedLossWeights(),
               window_size: int = 11) -> tc.Tensor:
    pred, target = _pair(pred, target)
    total = None
    for w, term in ((weights.alpha, huber_loss), (weights.beta, lambda p, t: ssim_loss(p, t, window_size)),
                    (weights.gamma, edge_loss)):
        if w == 0:
            continue
        part = term(pred, target) * w
        total = part if total is None else total + part
    return total


def _mask_arrays(mask, logits: tc.Tensor, num_classes: int):
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    n, k, h, w = logits.shape
    if k != num_classes:
        raise ValueError(f"logits have {k} channels for {num_classes} classes")
    if mask.shape != (n, h, w):
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    valid = mask != UNLABELED
    if (mask[valid] >= num_classes).any() or (mask[valid] < 0).any():
        bad = mask[valid][(mask[valid] >= num_classes) | (mask[valid] < 0)][0]
        raise ValueError(f"invalid class id {int(bad)} for {num_classes} classes")
    onehot = np.zeros((n, num_classes, h, w), dtype=logits.dtype)
    idx = np.where(valid, mask, 0).astype(np.int64)
    np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
    onehot *= valid[:, None]
    return onehot, valid


def dice_loss(logits, mask, num_classes: int, eps: float = 1e-6) -> tc.Tensor:
    """1 - mean soft Dice over classes present in the mask or predicted anywhere.

    Sums run over the whole batch; pixels labelled 255 are ignored.
    """
    logits = tc.as_tensor(logits)
    onehot, valid = _mask_arrays(mask, logits, num_classes)
    vmask = valid[:, None].astype(logits.dtype)
    probs = tc.softmax_channels(logits) * vmask
    inter = (probs * onehot).sum(axis=(0, 2, 3))
    psum = probs.sum(axis=(0, 2, 3))
    gsum = onehot.sum(axis=(0, 2, 3))
    dice = (inter * 2.0 + eps) / (psum + (gsum + eps))

    predicted = np.bincount(logits.data.argmax(axis=1)[valid], minlength=num_classes) > 0
    include = (gsum > 0) | predicted
    if not include.any():
        return tc.Tensor(np.zeros(()))
    return 1.0 - (dice * include.astype(logits.dtype)).sum() * (1.0 / include.sum())


def cross_entropy(logits, mask, num_classes: int) -> tc.Tensor:
    logits = tc.as_tensor(logits)
    onehot, valid = _mask_arrays(mask, logits, num_classes)
    n_valid = max(int(valid.sum()), 1)
    return (tc.log_softmax_channels(logits) * onehot).sum() * (-1.0 / n_valid)


def segmentation_loss(logits, mask, num_classes: int, kind: str = "dice") -> tc.Tensor:
    if kind == "dice":
        return dice_loss(logits, mask, num_classes)
    if kind == "dice+ce":
        return dice_loss(logits, mask, num_classes) + cross_entropy(logits, mask, num_classes)
    raise ValueError(f"unknown segmentation loss {kind!r}")
