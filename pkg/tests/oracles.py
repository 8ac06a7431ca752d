"""Independent brute-force reference implementations used by the tests.

Nothing here imports the code paths it checks; loops are deliberately naive.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[i, ic, y * stride + ky, xx * stride + kx] * w[oc, ic, ky, kx]
                    out[i, oc, y, xx] = acc
    return out


def central_differences(f, arrays, indices, h=1e-3):
    """Numerical partial derivatives of scalar ``f()`` w.r.t. ``arrays[k][idx]``.

    ``indices`` is a list of (k, flat_index). Arrays are perturbed in place
    and restored.
    """
    out = []
    for k, flat in indices:
        arr = arrays[k].reshape(-1)
        orig = arr[flat].copy()
        arr[flat] = orig + h
        fp = float(f())
        arr[flat] = orig - h
        fm = float(f())
        arr[flat] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def argmax_loop(probs):
    """Per-pixel argmax of an H x W x C cube, first maximum wins."""
    h, w, c = probs.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            best, best_k = -math.inf, 0
            for k in range(c):
                if probs[y, x, k] > best:
                    best, best_k = probs[y, x, k], k
            out[y, x] = best_k
    return out


def count_confusion(truth, pred, num_classes, ignore=255):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(np.asarray(truth).ravel().tolist(), np.asarray(pred).ravel().tolist()):
        if t == ignore:
            continue
        cm[t][p] += 1
    return np.array(cm, dtype=np.int64)


def metrics_from_counts(truth, pred, num_classes):
    """Per-class TP/FP/FN by direct pixel counting, then the macro metrics."""
    t = np.asarray(truth).ravel().tolist()
    p = np.asarray(pred).ravel().tolist()
    total = len(t)
    correct = sum(1 for a, b in zip(t, p) if a == b)
    per = {}
    for c in range(num_classes):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(t, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(t, p) if a == c and b != c)
        if tp + fp + fn == 0:
            continue
        per[c] = {
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "dice": 2 * tp / (2 * tp + fp + fn),
            "iou": tp / (tp + fp + fn),
        }
    macro = {k: sum(v[k] for v in per.values()) / len(per) for k in ("precision", "recall", "dice", "iou")}
    return correct / total, per, macro


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def sliding_ssim(a, b, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean SSIM of two 2-D images by explicit window enumeration (valid region)."""
    win = gaussian_window(size, sigma)
    h, w = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            pa = a[y:y + size, x:x + size]
            pb = b[y:y + size, x:x + size]
            ma = (win * pa).sum()
            mb = (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def center_vote_downscale(mask, scale_y, scale_x, off_y, off_x, out_h, out_w, unlabeled=255):
    """Majority vote by visiting every fine pixel and binning its mapped centre."""
    votes = {}
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            v = int(mask[r, c])
            if v == unlabeled:
                continue
            cy = math.floor(off_y + (r + 0.5) * scale_y)
            cx = math.floor(off_x + (c + 0.5) * scale_x)
            cell = votes.setdefault((cy, cx), {})
            cell[v] = cell.get(v, 0) + 1
    out = np.full((out_h, out_w), unlabeled, dtype=np.uint8)
    for (cy, cx), hist in votes.items():
        best = max(hist.values())
        out[cy, cx] = min(k for k, n in hist.items() if n == best)
    return out
