"""Preprocessing: band selection, tiling, quality filtering, equalisation, splits.

The chain turns co-registered scene rasters (plus optional label masks) into
fixed-size RAS1 patches under ``<out>/<split>/<region>/`` and a
``manifest.json`` describing them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from wetseg.errors import ConfigError, DataError
from wetseg.rascore import (
    DYNAMIC_WORLD,
    SPLITS,
    UNLABELED,
    ClassScheme,
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    MultibandRaster,
    read_mask,
    read_raster,
    save_manifest,
    sorted_entries,
    write_mask,
    write_raster,
)

log = logging.getLogger(__name__)

SENTINEL2_BANDS = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B11", "B12")
PLEIADES_BANDS = ("R", "G", "B", "NIR")
# Region -> split for the medium-resolution wetland dataset.
WETLAND_REGION_SPLITS = {
    "Biesbosch": "test",
    "Lauwersmeer": "val",
    "Gelderse Poort": "train",
    "Oostvaardersplassen": "train",
    "Loosdrechtse Plassen": "train",
    "Land van Saeftinghe": "train",
}
EQUALIZE_BINS = 256


@dataclass
class SplitPolicy:
    """Either ``by_region`` (region -> split, ``"*"`` as fallback) or ``random``."""

    kind: str = "by_region"
    regions: dict[str, str] = field(default_factory=lambda: dict(WETLAND_REGION_SPLITS))
    fractions: tuple[float, float, float] = (0.75, 0.15, 0.10)
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("by_region", "random"):
            out.append(f"split_policy.kind: {self.kind!r} is not 'by_region' or 'random'")
        if self.kind == "random":
            if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
                out.append("split_policy.fractions: need three nonnegative fractions")
            elif not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
                out.append(f"split_policy.fractions: sum to {sum(self.fractions)}, not 1")
        bad = sorted(s for s in self.regions.values() if s not in SPLITS)
        if bad:
            out.append(f"split_policy.regions: unknown splits {bad}")
        return out


@dataclass
class PreprocessConfig:
    selected_bands: list[str] = field(default_factory=lambda: list(SENTINEL2_BANDS))
    patch_size: int = 256
    max_invalid_fraction: float = 0.10
    equalize: bool = False
    normalize: str = "minmax"
    split_policy: SplitPolicy = field(default_factory=SplitPolicy)

    @classmethod
    def high_resolution(cls, **kw) -> PreprocessConfig:
        base = dict(selected_bands=list(PLEIADES_BANDS), patch_size=1024, max_invalid_fraction=0.30,
                    split_policy=SplitPolicy("random", {}, (0.75, 0.15, 0.10), 0))
        base.update(kw)
        return cls(**base)

    def problems(self) -> list[str]:
        out = []
        if not isinstance(self.patch_size, int) or self.patch_size <= 0:
            out.append(f"patch_size: must be a positive integer, got {self.patch_size!r}")
        if not 0.0 <= self.max_invalid_fraction <= 1.0:
            out.append(f"max_invalid_fraction: {self.max_invalid_fraction} not in [0, 1]")
        if self.normalize not in ("minmax", "none"):
            out.append(f"normalize: {self.normalize!r} is not 'minmax' or 'none'")
        if not self.selected_bands:
            out.append("selected_bands: empty")
        return out + self.split_policy.problems()

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_policy"]["fractions"] = list(self.split_policy.fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PreprocessConfig:
        d = dict(d)
        sp = d.pop("split_policy", None)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError([f"preprocess.{k}: unknown field" for k in sorted(unknown)])
        cfg = cls(**d)
        if sp is not None:
            sp = dict(sp)
            if "fractions" in sp:
                sp["fractions"] = tuple(sp["fractions"])
            cfg.split_policy = SplitPolicy(**sp)
        return cfg


@dataclass
class Tile:
    row: int
    col: int
    y0: int
    x0: int
    data: np.ndarray  # (bands, h, w)
    invalid_count: int
    undersized: bool

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class Source:
    """One co-registered scene handed to :func:`run_pipeline`."""

    name: str
    image: MultibandRaster
    label: LabelMask | None = None
    cloud_cover: float | None = None


def select_bands(raster: MultibandRaster, bands: Sequence[str]) -> MultibandRaster:
    missing = [b for b in bands if b not in raster.band_names]
    if missing:
        raise DataError(f"unknown band name(s) {missing}; raster has {list(raster.band_names)}")
    idx = [raster.band_names.index(b) for b in bands]
    return raster.replace(data=raster.data[idx], band_names=tuple(bands))


def tile(raster: MultibandRaster, patch_size: int) -> list[Tile]:
    """Non-overlapping grid anchored at (0, 0); edge remainders become undersized tiles."""
    invalid = raster.invalid_mask()
    tiles = []
    for row, y0 in enumerate(range(0, raster.height, patch_size)):
        for col, x0 in enumerate(range(0, raster.width, patch_size)):
            block = raster.data[:, y0:y0 + patch_size, x0:x0 + patch_size]
            inv = int(invalid[y0:y0 + patch_size, x0:x0 + patch_size].sum())
            undersized = block.shape[1] < patch_size or block.shape[2] < patch_size
            tiles.append(Tile(row, col, y0, x0, block, inv, undersized))
    return tiles


def quality_filter(tiles: Sequence[Tile], max_invalid_fraction: float, patch_size: int):
    """Split tiles into (kept, rejected) where rejected holds (tile, reason) pairs."""
    kept, rejected = [], []
    for t in tiles:
        if t.undersized or t.height < patch_size or t.width < patch_size:
            rejected.append((t, "undersized"))
        elif t.invalid_count / float(patch_size * patch_size) > max_invalid_fraction:
            rejected.append((t, "invalid_fraction"))
        else:
            kept.append(t)
    return kept, rejected


def equalize_histogram(data: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-band histogram equalisation onto [0, 1] over valid pixels.

    Each valid value is replaced by the empirical CDF of its 256-bin histogram
    bin. Invalid pixels come out as 0; a band whose valid pixels are all equal
    maps to 0.5.
    """
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if valid is None:
        valid = np.ones(data.shape[1:], dtype=bool)
    out = np.zeros(data.shape, dtype=np.float32)
    for b in range(data.shape[0]):
        v = data[b][valid].astype(np.float64)
        if v.size == 0:
            continue
        lo, hi = v.min(), v.max()
        if lo == hi:
            out[b][valid] = 0.5
            continue
        bins = np.minimum(((v - lo) / (hi - lo) * EQUALIZE_BINS).astype(np.int64), EQUALIZE_BINS - 1)
        cdf = np.cumsum(np.bincount(bins, minlength=EQUALIZE_BINS)) / v.size
        out[b][valid] = cdf[bins]
    return out


def normalize_minmax(data: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-band min-max scaling to [0, 1] over valid pixels; constant bands -> 0.5."""
    data = np.asarray(data)
    if valid is None:
        valid = np.ones(data.shape[1:], dtype=bool)
    out = np.zeros(data.shape, dtype=np.float32)
    for b in range(data.shape[0]):
        v = data[b][valid].astype(np.float64)
        if v.size == 0:
            continue
        lo, hi = v.min(), v.max()
        out[b][valid] = 0.5 if hi == lo else (v - lo) / (hi - lo)
    return out


def _split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    # floor val/test, remainder to train; rounding guards against 0.29*100 -> 28.999...
    n_val = math.floor(round(n * fractions[1], 9))
    n_test = math.floor(round(n * fractions[2], 9))
    return n - n_val - n_test, n_val, n_test


def assign_splits(entries: Sequence[ManifestEntry], policy: SplitPolicy,
                  class_scheme: ClassScheme = DYNAMIC_WORLD, provenance: dict | None = None) -> DatasetManifest:
    problems = policy.problems()
    if problems:
        raise ConfigError(problems)
    ordered = sorted_entries(entries)
    if policy.kind == "by_region":
        fallback = policy.regions.get("*")
        unmapped = sorted({e.region for e in ordered if e.region not in policy.regions})
        if unmapped and fallback is None:
            raise DataError(f"unmapped region(s) {unmapped}")
        for e in ordered:
            e.split = policy.regions.get(e.region, fallback)
    else:
        n_train, n_val, _ = _split_sizes(len(ordered), policy.fractions)
        perm = np.random.default_rng(policy.seed).permutation(len(ordered))
        for rank, i in enumerate(perm):
            ordered[i].split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return DatasetManifest(ordered, class_scheme, dict(provenance or {}))


def prepare_patch(data: np.ndarray, valid: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    if config.equalize:
        return equalize_histogram(data, valid)
    if config.normalize == "minmax":
        return normalize_minmax(data, valid)
    return np.ascontiguousarray(data)


def _safe(name: str) -> str:
    return name.replace("/", "_").replace("\\", "_") or "unknown"


def run_pipeline(sources: Sequence[Source], config: PreprocessConfig, out_dir: str | Path,
                 class_scheme: ClassScheme | None = None, *, source_splits: dict[str, str] | None = None,
                 require_labels: bool = False) -> DatasetManifest:
    """Tile, filter and split ``sources`` into ``out_dir``; returns the saved manifest.

    An image tile and its label tile are always kept or rejected together.
    ``source_splits`` (source name -> split) overrides the split policy so
    several datasets can share one scene-level assignment. With
    ``require_labels`` tiles whose label is entirely unlabeled are rejected.
    """
    config.validate()
    out_dir = Path(out_dir)
    if class_scheme is None:
        class_scheme = next((s.label.scheme for s in sources if s.label is not None), DYNAMIC_WORLD)
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate source names in {names}")

    candidates: list[tuple[ManifestEntry, np.ndarray, np.ndarray | None, Source]] = []
    rejections: dict[str, int] = {"undersized": 0, "invalid_fraction": 0}
    if require_labels:
        rejections["unlabeled"] = 0
    if source_splits is not None:
        missing = sorted(set(names) - set(source_splits))
        bad = sorted({v for v in source_splits.values() if v not in SPLITS})
        if missing or bad:
            raise ConfigError([f"source_splits: no split for {missing}"] * bool(missing)
                              + [f"source_splits: unknown splits {bad}"] * bool(bad))
    for src in sorted(sources, key=lambda s: s.name):
        image = select_bands(src.image, config.selected_bands)
        if src.label is not None and (src.label.height, src.label.width) != (image.height, image.width):
            raise DataError(f"{src.name}: label {src.label.height}x{src.label.width} does not match "
                            f"image {image.height}x{image.width}")
        invalid = image.invalid_mask()
        kept, rejected = quality_filter(tile(image, config.patch_size), config.max_invalid_fraction,
                                        config.patch_size)
        for _, reason in rejected:
            rejections[reason] += 1
        for t in kept:
            window = (slice(t.y0, t.y0 + config.patch_size), slice(t.x0, t.x0 + config.patch_size))
            patch = prepare_patch(t.data, ~invalid[window], config)
            label = src.label.values[window] if src.label is not None else None
            if require_labels and (label is None or (label == UNLABELED).all()):
                rejections["unlabeled"] += 1
                continue
            entry = ManifestEntry(patch="", region=image.region, split="train", acquired_at=image.acquired_at,
                                  gsd_m=image.gsd_m, source=src.name, row=t.row, col=t.col, offset=(t.y0, t.x0))
            candidates.append((entry, patch, label, src))

    provenance = {
        "patch_size": config.patch_size,
        "selected_bands": list(config.selected_bands),
        "filters": ["size", "invalid_fraction"],
        "max_invalid_fraction": config.max_invalid_fraction,
        "equalize": config.equalize,
        "normalize": "none" if config.equalize else config.normalize,
        "split_policy": config.to_dict()["split_policy"],
        "rejections": rejections,
    }
    clouds = {s.name: s.cloud_cover for s in sources if s.cloud_cover is not None}
    if clouds:
        provenance["cloud_cover"] = clouds
    if source_splits is None:
        manifest = assign_splits([c[0] for c in candidates], config.split_policy, class_scheme, provenance)
    else:
        for c in candidates:
            c[0].split = source_splits[c[0].source]
        provenance["split_policy"] = {"kind": "by_source", "sources": dict(sorted(source_splits.items()))}
        manifest = DatasetManifest(sorted_entries([c[0] for c in candidates]), class_scheme, provenance)
    manifest.root = out_dir

    payload = {id(c[0]): c for c in candidates}
    for entry in manifest.entries:
        _, patch, label, src = payload[id(entry)]
        stem = f"{_safe(entry.source)}_{entry.row}_{entry.col}"
        rel = Path(entry.split) / _safe(entry.region) / f"{stem}.ras"
        (out_dir / rel.parent).mkdir(parents=True, exist_ok=True)
        nodata = src.image.nodata_value if patch.dtype == src.image.dtype else 0.0
        write_raster(src.image.replace(data=patch, band_names=tuple(config.selected_bands), nodata_value=nodata),
                     out_dir / rel)
        entry.patch = rel.as_posix()
        if label is not None:
            lrel = rel.with_name(f"{stem}_label.ras")
            write_mask(LabelMask(label, class_scheme, src.label.gsd_m), out_dir / lrel)
            entry.label = lrel.as_posix()
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out_dir / "manifest.json")
    log.info("pipeline: %d patches kept, rejections %s", len(manifest.entries), rejections)
    return manifest


def discover_sources(input_dir: str | Path, class_scheme: ClassScheme | None = None) -> list[Source]:
    """Scenes in a directory: ``<name>.ras`` (or .tif) with optional ``<name>_label.ras``."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise DataError(f"input directory {input_dir} does not exist")
    sources = []
    for path in sorted(input_dir.iterdir()):
        if path.suffix not in (".ras", ".tif", ".tiff") or path.stem.endswith("_label"):
            continue
        label_path = path.with_name(f"{path.stem}_label.ras")
        label = read_mask(label_path, class_scheme) if label_path.exists() else None
        sources.append(Source(path.stem, read_raster(path), label))
    if not sources:
        raise DataError(f"no input rasters found in {input_dir}")
    return sources
