"""Label transfer from high- to medium-resolution imagery.

High-resolution scenes are paired with the temporally nearest medium-resolution
scene, and their annotation masks are downscaled onto the coarse grid by a
majority vote over mapped pixel centres. A fine pixel ``(r, c)`` lands in
coarse cell ``(floor(off_y + (r + 0.5) * sy), floor(off_x + (c + 0.5) * sx))``
where ``s = fine_gsd / coarse_gsd`` and the offset is the fine scene origin in
coarse pixel units.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from wetseg.errors import ConfigError, DataError
from wetseg.pipeline import PLEIADES_BANDS, PreprocessConfig, Source, _split_sizes, run_pipeline
from wetseg.rascore import SPLITS, UNLABELED, DatasetManifest, LabelMask, MultibandRaster, read_raster

SENTINEL2_RGBNIR = ("B4", "B3", "B2", "B8")
DEFAULT_MAX_GAP_DAYS = 7


@dataclass(frozen=True)
class Scene:
    """A scene reference: where it is, when it was taken and how it is aligned."""

    name: str
    acquired_at: str
    gsd_m: float
    path: str | None = None
    offset: tuple[float, float] = (0.0, 0.0)  # origin in coarse pixel units
    shape: tuple[int, int] | None = None      # (height, width) when known
    raster: MultibandRaster | None = field(default=None, compare=False, repr=False)

    @property
    def date(self) -> dt.date:
        try:
            return dt.date.fromisoformat(self.acquired_at[:10])
        except ValueError:
            raise DataError(f"scene {self.name!r}: acquisition date {self.acquired_at!r} is not ISO") from None

    def load(self) -> MultibandRaster:
        if self.raster is not None:
            return self.raster
        if self.path is None:
            raise DataError(f"scene {self.name!r} has neither a raster nor a path")
        return read_raster(self.path)

    @classmethod
    def from_raster(cls, name: str, raster: MultibandRaster, path: str | None = None,
                    offset: tuple[float, float] = (0.0, 0.0)) -> Scene:
        return cls(name, raster.acquired_at, raster.gsd_m, path, tuple(offset), (raster.height, raster.width),
                   raster)


@dataclass(frozen=True)
class PixelMapping:
    scale_y: float
    scale_x: float
    offset_y: float = 0.0
    offset_x: float = 0.0

    @classmethod
    def from_gsd(cls, fine_gsd: float, coarse_gsd: float, offset: tuple[float, float] = (0.0, 0.0)) -> PixelMapping:
        s = fine_gsd / coarse_gsd
        return cls(s, s, float(offset[0]), float(offset[1]))

    def rows(self, n: int) -> np.ndarray:
        return np.floor(self.offset_y + (np.arange(n) + 0.5) * self.scale_y).astype(np.int64)

    def cols(self, n: int) -> np.ndarray:
        return np.floor(self.offset_x + (np.arange(n) + 0.5) * self.scale_x).astype(np.int64)

    def footprint(self, height: int, width: int) -> tuple[int, int, int, int]:
        """Inclusive coarse-cell bounds (r0, c0, r1, c1) reached by a fine grid."""
        r, c = self.rows(height), self.cols(width)
        return int(r[0]), int(c[0]), int(r[-1]), int(c[-1])

    def to_dict(self) -> dict:
        return {"scale_y": self.scale_y, "scale_x": self.scale_x, "offset_y": self.offset_y,
                "offset_x": self.offset_x}


@dataclass(frozen=True)
class ScenePair:
    hires: Scene
    lores: Scene
    date_gap_days: int
    mapping: PixelMapping

    def to_dict(self) -> dict:
        return {"hires": self.hires.name, "lores": self.lores.name, "hires_date": self.hires.acquired_at,
                "lores_date": self.lores.acquired_at, "date_gap_days": self.date_gap_days,
                "mapping": self.mapping.to_dict()}


@dataclass
class PairingResult:
    pairs: list[ScenePair]
    unpaired: list[dict]
    max_gap_days: int

    def to_dict(self) -> dict:
        return {"max_gap_days": self.max_gap_days, "pairs": [p.to_dict() for p in self.pairs],
                "unpaired": self.unpaired}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _inside(mapping: PixelMapping, hires: Scene, lores: Scene) -> bool:
    if hires.shape is None or lores.shape is None:
        return True
    r0, c0, r1, c1 = mapping.footprint(*hires.shape)
    return r0 >= 0 and c0 >= 0 and r1 < lores.shape[0] and c1 < lores.shape[1]


def pair_scenes(hires: Sequence[Scene], lores: Sequence[Scene],
                max_gap_days: int = DEFAULT_MAX_GAP_DAYS) -> PairingResult:
    """Pair each high-resolution scene with the nearest-dated coarse scene.

    Equal gaps before and after go to the earlier date. Scenes without a
    candidate inside the window (or whose footprint would fall outside the
    candidate) are listed as unpaired.
    """
    if max_gap_days < 0:
        raise ConfigError([f"max_gap_days: must be >= 0, got {max_gap_days}"])
    pairs, unpaired = [], []
    for h in sorted(hires, key=lambda s: s.name):
        ranked = sorted(lores, key=lambda s: (abs((s.date - h.date).days), s.date, s.name))
        chosen = None
        for cand in ranked:
            gap = abs((cand.date - h.date).days)
            if gap > max_gap_days:
                break
            mapping = PixelMapping.from_gsd(h.gsd_m, cand.gsd_m, h.offset)
            if _inside(mapping, h, cand):
                chosen = ScenePair(h, cand, gap, mapping)
                break
        if chosen is None:
            nearest = min((abs((s.date - h.date).days) for s in lores), default=None)
            unpaired.append({"scene": h.name, "acquired_at": h.acquired_at, "nearest_gap_days": nearest,
                             "reason": "no candidate within window" if nearest is None or nearest > max_gap_days
                             else "footprint outside candidate"})
        else:
            pairs.append(chosen)
    return PairingResult(pairs, unpaired, max_gap_days)


@dataclass(frozen=True)
class GridTile:
    row: int
    col: int
    y0: int
    x0: int
    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


def _edges(n: int, parts: int) -> list[int]:
    step = n // parts
    return [i * step for i in range(parts)] + [n]


def grid_split(raster, rows: int, cols: int) -> list[GridTile]:
    """Split into rows x cols near-equal tiles; the last row/column takes the remainder."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {rows}x{cols}")
    data = raster.data if isinstance(raster, MultibandRaster) else \
        raster.values if isinstance(raster, LabelMask) else np.asarray(raster)
    h, w = data.shape[-2:]
    if rows > h or cols > w:
        raise ValueError(f"cannot split {h}x{w} into {rows}x{cols} non-empty tiles")
    ys, xs = _edges(h, rows), _edges(w, cols)
    return [GridTile(r, c, ys[r], xs[c], data[..., ys[r]:ys[r + 1], xs[c]:xs[c + 1]])
            for r in range(rows) for c in range(cols)]


def downscale_labels(hires_mask, mapping: PixelMapping, lores_dims: tuple[int, int]) -> LabelMask | np.ndarray:
    """Majority vote of fine labels per coarse cell; ties go to the lower id, empty cells to 255.

    Returns a LabelMask when given one (keeping its scheme), else a uint8 array.
    """
    scheme = hires_mask.scheme if isinstance(hires_mask, LabelMask) else None
    values = np.asarray(hires_mask.values if scheme is not None else hires_mask)
    h, w = values.shape
    out_h, out_w = lores_dims
    rows, cols = mapping.rows(h), mapping.cols(w)
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= out_h or cols.max() >= out_w:
        raise DataError(f"mapping sends fine pixels to rows {rows.min()}..{rows.max()}, cols "
                        f"{cols.min()}..{cols.max()}, outside the {out_h}x{out_w} coarse grid")
    valid = values != UNLABELED
    k = int(values[valid].max()) + 1 if valid.any() else 1
    counts = np.zeros((out_h * out_w, k), dtype=np.int64)
    # row by row keeps the index arrays small for large fine masks
    for r in range(h):
        ok = valid[r]
        if not ok.any():
            continue
        cells = rows[r] * out_w + cols[ok]
        np.add.at(counts, (cells, values[r, ok].astype(np.int64)), 1)
    out = counts.argmax(axis=1).astype(np.uint8)
    out[counts.sum(axis=1) == 0] = UNLABELED
    out = out.reshape(out_h, out_w)
    if scheme is None:
        return out
    return LabelMask(out, scheme, hires_mask.gsd_m / mapping.scale_y)


@dataclass
class ResolutionConfig:
    hires_bands: list[str] = field(default_factory=lambda: list(PLEIADES_BANDS))
    lores_bands: list[str] = field(default_factory=lambda: list(SENTINEL2_RGBNIR))
    hires_patch: int = 1024
    lores_patch: int = 256
    hires_max_invalid: float = 0.30
    lores_max_invalid: float = 0.10
    fractions: tuple[float, float, float] = (0.75, 0.15, 0.10)
    seed: int = 0
    scene_splits: dict[str, str] = field(default_factory=dict)
    max_gap_days: int = DEFAULT_MAX_GAP_DAYS

    def problems(self) -> list[str]:
        out = []
        if len(self.hires_bands) != len(self.lores_bands):
            out.append(f"bands: {len(self.hires_bands)} high-resolution vs {len(self.lores_bands)} "
                       "medium-resolution bands; both must use the same spectral bands")
        for name in ("hires_patch", "lores_patch"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be positive")
        if len(self.fractions) != 3 or min(self.fractions) < 0 or not math.isclose(sum(self.fractions), 1.0):
            out.append(f"fractions: need three nonnegative values summing to 1, got {self.fractions}")
        bad = sorted({v for v in self.scene_splits.values() if v not in SPLITS})
        if bad:
            out.append(f"scene_splits: unknown splits {bad}")
        return out

    def to_dict(self) -> dict:
        return {"hires_bands": list(self.hires_bands), "lores_bands": list(self.lores_bands),
                "hires_patch": self.hires_patch, "lores_patch": self.lores_patch,
                "hires_max_invalid": self.hires_max_invalid, "lores_max_invalid": self.lores_max_invalid,
                "fractions": list(self.fractions), "seed": self.seed, "scene_splits": dict(self.scene_splits),
                "max_gap_days": self.max_gap_days}


def scene_split_assignment(names: Sequence[str], config: ResolutionConfig) -> dict[str, str]:
    """Scene -> split, shared by both resolutions. Explicit entries win; the rest are drawn at random."""
    fixed = {n: config.scene_splits[n] for n in names if n in config.scene_splits}
    rest = sorted(n for n in names if n not in fixed)
    n_train, n_val, _ = _split_sizes(len(rest), config.fractions)
    perm = np.random.default_rng(config.seed).permutation(len(rest))
    for rank, i in enumerate(perm):
        fixed[rest[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return dict(sorted(fixed.items()))


def build_resolution_experiment(pairs: Sequence[ScenePair], hires_masks: dict[str, LabelMask],
                                config: ResolutionConfig, out_dir) -> tuple[DatasetManifest, DatasetManifest]:
    """Matched high/medium-resolution datasets with scene-coupled splits.

    Writes ``<out>/hires`` (original masks) and ``<out>/lores`` (downscaled
    masks) and returns both manifests.
    """
    problems = config.problems()
    if problems:
        raise ConfigError(problems)
    if not pairs:
        raise DataError("no scene pairs to build an experiment from")
    missing = sorted(p.hires.name for p in pairs if p.hires.name not in hires_masks)
    if missing:
        raise DataError(f"missing high-resolution mask for scene(s) {missing}")
    out_dir = Path(out_dir)
    splits = scene_split_assignment([p.hires.name for p in pairs], config)
    hi_sources, lo_sources = [], []
    for p in pairs:
        mask = hires_masks[p.hires.name]
        hi = p.hires.load()
        lo = p.lores.load()
        if (mask.height, mask.width) != (hi.height, hi.width):
            raise DataError(f"{p.hires.name}: mask {mask.height}x{mask.width} does not match scene "
                            f"{hi.height}x{hi.width}")
        lo_mask = downscale_labels(mask, p.mapping, (lo.height, lo.width))
        hi_sources.append(Source(p.hires.name, hi, mask))
        # each coarse scene copy is keyed by the fine scene it was paired with
        lo_sources.append(Source(p.hires.name, lo, LabelMask(lo_mask.values, mask.scheme, lo.gsd_m)))
    scheme = hires_masks[pairs[0].hires.name].scheme
    hi_cfg = PreprocessConfig(selected_bands=list(config.hires_bands), patch_size=config.hires_patch,
                              max_invalid_fraction=config.hires_max_invalid)
    lo_cfg = PreprocessConfig(selected_bands=list(config.lores_bands), patch_size=config.lores_patch,
                              max_invalid_fraction=config.lores_max_invalid)
    hi_m = run_pipeline(hi_sources, hi_cfg, out_dir / "hires", scheme, source_splits=splits, require_labels=True)
    lo_m = run_pipeline(lo_sources, lo_cfg, out_dir / "lores", scheme, source_splits=splits, require_labels=True)
    return hi_m, lo_m
