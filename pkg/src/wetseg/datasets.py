"""Load manifest splits into dense arrays for training and evaluation.

When ``WETSEG_CACHE`` names a directory, decoded splits are cached there as
``.npz`` files keyed by the entries and the size and mtime of every file read.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wetseg.errors import DataError
from wetseg.pipeline import normalize_minmax
from wetseg.rascore import DatasetManifest, ManifestEntry, MultibandRaster, read_mask, read_raster


@dataclass
class SplitData:
    x: np.ndarray               # N x C x H x W float32 in [0, 1]
    y: np.ndarray | None        # N x H x W uint8, 255 = unlabeled
    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.x)


def to_unit_range(raster: MultibandRaster) -> np.ndarray:
    """Float32 patch values in [0, 1]; integer or out-of-range data is min-max scaled per band."""
    data = raster.data
    if data.dtype == np.float32 and data.size and np.nanmin(data) >= 0.0 and np.nanmax(data) <= 1.0:
        return np.array(data, dtype=np.float32)
    return normalize_minmax(data, ~raster.invalid_mask())


def _cache_key(manifest: DatasetManifest, entries: list[ManifestEntry], labeled: bool) -> str:
    h = hashlib.sha256(json.dumps({"scheme": manifest.class_scheme.to_dict(), "labeled": labeled},
                                  sort_keys=True).encode())
    for e in entries:
        for rel in (e.patch, e.label if labeled else None):
            if rel is None:
                continue
            st = manifest.resolve(rel).stat()
            h.update(f"{manifest.resolve(rel).resolve()}|{st.st_size}|{st.st_mtime_ns}\n".encode())
    return h.hexdigest()


def load_split(manifest: DatasetManifest, split: str, labeled: bool = False) -> SplitData:
    entries = manifest.split(split)
    if labeled:
        entries = [e for e in entries if e.label is not None]
    if not entries:
        kind = "labeled " if labeled else ""
        raise DataError(f"empty split: no {kind}entries in split {split!r}")
    cache_dir = os.environ.get("WETSEG_CACHE")
    if cache_dir:
        path = Path(cache_dir) / f"{_cache_key(manifest, entries, labeled)}.npz"
        if path.exists():
            with np.load(path) as z:
                return SplitData(z["x"], z["y"] if labeled else None, entries)
        data = _read_split(manifest, split, entries, labeled)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, x=data.x, **({"y": data.y} if labeled else {}))
        os.replace(tmp, path)
        return data
    return _read_split(manifest, split, entries, labeled)


def _read_split(manifest: DatasetManifest, split: str, entries: list[ManifestEntry], labeled: bool) -> SplitData:
    xs, ys = [], []
    for e in entries:
        xs.append(to_unit_range(read_raster(manifest.resolve(e.patch))))
        if labeled:
            ys.append(np.asarray(read_mask(manifest.resolve(e.label), manifest.class_scheme).values))
    shapes = {a.shape for a in xs}
    if len(shapes) != 1:
        raise DataError(f"split {split!r} mixes patch shapes {sorted(shapes)}")
    return SplitData(np.stack(xs), np.stack(ys) if labeled else None, entries)
