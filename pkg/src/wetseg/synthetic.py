"""Synthetic multispectral scenes with known labels for smoke tests and desk-scale experiments.

Three classes are planted: 0 background, 1 disks, 2 stripe bands. Each class
has its own spectral signature, disks are smooth and stripe regions carry a
periodic texture, so classes are separable from both spectrum and pattern.
With ``texture_defined`` the stripe class shares the background spectrum and
only its texture tells it apart, so single pixels no longer identify the class
and spatial context is required.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from wetseg.pipeline import Source
from wetseg.rascore import (
    SYNTHETIC,
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    MultibandRaster,
    save_manifest,
    write_mask,
    write_raster,
)

SYNTHETIC_SCHEME = SYNTHETIC


def class_signatures(num_bands: int, num_classes: int = 3, seed: int = 1234) -> np.ndarray:
    """Per-class mean reflectance, num_classes x num_bands, in [0.2, 0.8]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.2, 0.8, size=(num_classes, num_bands))


def synthetic_mask(rng: np.random.Generator, size: int, max_disks: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    mask = np.zeros((size, size), dtype=np.uint8)
    # one stripe band at a random angle
    theta = rng.uniform(0, np.pi)
    d = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta)
    centre = rng.uniform(-size / 4, size / 4)
    width = rng.uniform(size / 8, size / 4)
    mask[np.abs(d - centre) < width] = 2
    for _ in range(rng.integers(1, max_disks + 1)):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 10, size / 5)
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = 1
    return mask


def render_image(rng: np.random.Generator, mask: np.ndarray, signatures: np.ndarray,
                 noise: float = 0.05, texture: float = 0.1, period: float = 4.0,
                 jitter: float = 0.0, texture_defined: bool = False) -> np.ndarray:
    """Bands x H x W float32 image in [0, 1] for ``mask``.

    ``jitter`` adds a per-scene band gain and offset (acquisition-to-acquisition
    variation), so signatures differ between images by up to that amount.
    ``texture_defined`` gives class 2 the class-0 signature.
    """
    size = mask.shape[0]
    yy, xx = np.mgrid[:mask.shape[0], :mask.shape[1]].astype(np.float64)
    sig = signatures
    if texture_defined:
        sig = signatures.copy()
        sig[2] = sig[0]
    if jitter:
        nb = signatures.shape[1]
        sig = sig * rng.uniform(1 - jitter, 1 + jitter, nb) + rng.uniform(-jitter, jitter, nb)
    img = sig[mask].transpose(2, 0, 1).copy()
    stripes = np.sin(2 * np.pi * (xx + yy) / period)
    img += texture * stripes * (mask == 2)
    # low-frequency illumination shared by all bands
    gy, gx = rng.normal(size=2) * 0.05
    img += (gy * (yy / size - 0.5) + gx * (xx / size - 0.5))[None]
    img += rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_patch(seed: int, size: int = 64, num_bands: int = 9, **kw) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    mask = synthetic_mask(rng, size)
    return render_image(rng, mask, class_signatures(num_bands), **kw), mask


def striped_patch(size: int = 64, num_bands: int = 9, period: int = 8) -> np.ndarray:
    """Deterministic striped patch used for reconstruction overfit checks."""
    yy, xx = np.mgrid[:size, :size]
    base = 0.5 + 0.35 * np.sin(2 * np.pi * xx / period)[None]
    ramp = np.linspace(0.8, 1.0, num_bands)[:, None, None]
    return (base * ramp + 0.05 * (yy / size)[None]).astype(np.float32)


def synthetic_source(name: str, seed: int, size: int = 256, band_names=None, region: str = "synthetic",
                     acquired_at: str = "2023-06-10", gsd_m: float = 10.0, **kw) -> Source:
    """A full scene as a :class:`~wetseg.pipeline.Source` (uint16 reflectance plus label)."""
    from wetseg.pipeline import SENTINEL2_BANDS

    band_names = tuple(band_names or SENTINEL2_BANDS)
    img, mask = synthetic_patch(seed, size, len(band_names), **kw)
    raster = MultibandRaster((img * 10000).astype(np.uint16), band_names, 0.0, gsd_m, region, acquired_at)
    return Source(name, raster, LabelMask(mask, SYNTHETIC_SCHEME, gsd_m))


def write_dataset(out_dir: str | Path, counts: dict[str, int], size: int = 64, num_bands: int = 9,
                  seed: int = 0, labeled: bool = True, **kw) -> DatasetManifest:
    """Write ready-to-train [0, 1] float patches and their manifest into ``out_dir``."""
    from wetseg.pipeline import SENTINEL2_BANDS

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bands = tuple(SENTINEL2_BANDS[:num_bands]) if num_bands <= len(SENTINEL2_BANDS) else \
        tuple(f"band{i}" for i in range(num_bands))
    entries = []
    ss = np.random.SeedSequence(seed)
    for split in ("train", "val", "test"):
        for i in range(counts.get(split, 0)):
            child = int(ss.spawn(1)[0].generate_state(1)[0])
            img, mask = synthetic_patch(child, size, num_bands, **kw)
            stem = f"{split}_{i:04d}"
            write_raster(MultibandRaster(img, bands, 0.0, 10.0, "synthetic", "2023-06-10"), out_dir / f"{stem}.ras")
            label = None
            if labeled:
                write_mask(LabelMask(mask, SYNTHETIC_SCHEME, 10.0), out_dir / f"{stem}_label.ras")
                label = f"{stem}_label.ras"
            entries.append(ManifestEntry(f"{stem}.ras", "synthetic", split, label, "2023-06-10", 10.0,
                                         "synthetic", i, 0, (0, 0)))
    manifest = DatasetManifest(entries, SYNTHETIC_SCHEME, {"generator": "synthetic", "seed": seed, "size": size,
                                                          "num_bands": num_bands}, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
