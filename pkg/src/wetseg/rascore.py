"""Core raster types, the RAS1 container, class schemes and dataset manifests.

RAS1 layout (little-endian)::

    b"RAS1"
    u32 width, u32 height, u32 bands
    u8  dtype code (0=u8, 1=u16, 2=f32)
    u8  flags (bit 0: metadata block follows the name table)
    u16 reserved (0)
    f32 nodata, f32 gsd_m
    u16 name-table byte length, then band names as UTF-8 joined by NUL
    [u16 metadata length, UTF-8 JSON {"region", "acquired_at", ...}]   if flag bit 0
    payload: band-sequential, row-major, ``bands * height * width`` values

Label masks use the same container with one u8 band named ``label``; the
metadata block carries the class-scheme name.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from wetseg.errors import ManifestError, RasterFormatError

MAGIC = b"RAS1"
UNLABELED = 255
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_CODE_FOR_DTYPE = {np.dtype(np.uint8): 0, np.dtype(np.uint16): 1, np.dtype(np.float32): 2}
_HEADER = struct.Struct("<4sIIIBBHff")
FLAG_META = 0x01


@dataclass(frozen=True, eq=False)
class MultibandRaster:
    """``data`` has shape (bands, height, width) and is read-only."""

    data: np.ndarray
    band_names: tuple[str, ...]
    nodata_value: float = 0.0
    gsd_m: float = 10.0
    region: str = ""
    acquired_at: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"raster data must be (bands, height, width), got shape {data.shape}")
        if data.dtype not in _CODE_FOR_DTYPE:
            raise ValueError(f"unsupported raster dtype {data.dtype}; use uint8, uint16 or float32")
        if data.shape[0] == 0:
            raise ValueError("raster must have at least one band")
        names = tuple(self.band_names)
        if len(names) != data.shape[0]:
            raise ValueError(f"{len(names)} band names for {data.shape[0]} bands")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate band names in {names}")
        if not self.gsd_m > 0:
            raise ValueError(f"gsd_m must be positive, got {self.gsd_m}")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "band_names", names)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def invalid_mask(self) -> np.ndarray:
        """Pixels where every band equals the nodata value."""
        return np.all(self.data == self.data.dtype.type(self.nodata_value), axis=0)

    def replace(self, **changes) -> MultibandRaster:
        fields = dict(data=self.data, band_names=self.band_names, nodata_value=self.nodata_value,
                      gsd_m=self.gsd_m, region=self.region, acquired_at=self.acquired_at)
        fields.update(changes)
        return MultibandRaster(**fields)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultibandRaster):
            return NotImplemented
        return (self.band_names == other.band_names
                and self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes()
                and np.float32(self.nodata_value).tobytes() == np.float32(other.nodata_value).tobytes()
                and np.float32(self.gsd_m) == np.float32(other.gsd_m)
                and self.region == other.region
                and self.acquired_at == other.acquired_at)

    __hash__ = None


@dataclass(frozen=True)
class ClassInfo:
    id: int
    label: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassScheme:
    name: str
    classes: tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be contiguous from 0, got {ids}")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate class labels in scheme {self.name!r}")
        if len(ids) >= UNLABELED:
            raise ValueError("class id 255 is reserved for unlabeled pixels")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.classes]

    def palette(self) -> np.ndarray:
        return np.array([c.color for c in self.classes], dtype=np.uint8)

    def to_dict(self) -> dict:
        return {"name": self.name,
                "classes": [{"id": c.id, "label": c.label, "color": list(c.color)} for c in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> ClassScheme:
        return cls(d["name"], tuple(ClassInfo(int(c["id"]), c["label"], tuple(c["color"])) for c in d["classes"]))


def _hex(color: str) -> tuple[int, int, int]:
    return tuple(int(color[i:i + 2], 16) for i in (0, 2, 4))


DYNAMIC_WORLD = ClassScheme("dynamic-world", tuple(
    ClassInfo(i, label, _hex(color)) for i, (label, color) in enumerate([
        ("water", "419BDF"), ("trees", "397D49"), ("grass", "88B053"),
        ("flooded_vegetation", "7A87C6"), ("crops", "E49635"), ("shrub_and_scrub", "DFC35A"),
        ("built", "C4281B"), ("bare", "A59B8F"), ("snow_and_ice", "B39FE1"),
    ])))

BIESBOSCH_MANUAL = ClassScheme("biesbosch-manual", tuple(
    ClassInfo(i, label, _hex(color)) for i, (label, color) in enumerate([
        ("water", "419BDF"), ("grass", "88B053"), ("reed", "C9B26B"),
        ("forest", "397D49"), ("built", "C4281B"),
    ])))

# three-class scheme of the generated desk-scale fixtures
SYNTHETIC = ClassScheme("synthetic-3", (
    ClassInfo(0, "background", (96, 96, 96)),
    ClassInfo(1, "disk", (65, 155, 223)),
    ClassInfo(2, "stripe", (57, 125, 73)),
))
SCHEMES = {s.name: s for s in (DYNAMIC_WORLD, BIESBOSCH_MANUAL, SYNTHETIC)}


def register_scheme(scheme: ClassScheme) -> None:
    """Make ``scheme`` resolvable by name when reading masks and manifests."""
    known = SCHEMES.get(scheme.name)
    if known is not None and known != scheme:
        raise ValueError(f"a different scheme named {scheme.name!r} is already registered")
    SCHEMES[scheme.name] = scheme


def generic_scheme(num_classes: int, name: str | None = None) -> ClassScheme:
    """Scheme with ``class_<i>`` labels, for synthetic data."""
    rng = np.random.default_rng(num_classes)
    colors = rng.integers(40, 230, size=(num_classes, 3))
    return ClassScheme(name or f"generic-{num_classes}", tuple(
        ClassInfo(i, f"class_{i}", tuple(int(v) for v in colors[i])) for i in range(num_classes)))


def get_scheme(name: str) -> ClassScheme:
    if name in SCHEMES:
        return SCHEMES[name]
    if name.startswith("generic-") and name[8:].isdigit():
        return generic_scheme(int(name[8:]))
    raise KeyError(f"unknown class scheme {name!r}; known: {sorted(SCHEMES)}")


@dataclass(frozen=True, eq=False)
class LabelMask:
    values: np.ndarray
    scheme: ClassScheme
    gsd_m: float = 10.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"label mask must be 2-D, got shape {v.shape}")
        if v.dtype != np.uint8:
            if v.size and (v.min() < 0 or v.max() > 255):
                raise ValueError("label values must fit in uint8")
            v = v.astype(np.uint8)
        bad = (v >= len(self.scheme)) & (v != UNLABELED)
        if bad.any():
            raise ValueError(f"class id {int(v[bad][0])} outside scheme {self.scheme.name!r} "
                             f"({len(self.scheme)} classes)")
        v = v.view()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return (self.scheme == other.scheme and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values)
                and np.float32(self.gsd_m) == np.float32(other.gsd_m))

    __hash__ = None


# RAS1 I/O ---------------------------------------------------------------------


def _encode(data: np.ndarray, band_names: Sequence[str], nodata: float, gsd: float, meta: dict) -> bytes:
    bands, height, width = data.shape
    names = "\0".join(band_names).encode("utf-8")
    if len(names) > 0xFFFF:
        raise RasterFormatError("band-name table too long")
    meta = {k: v for k, v in meta.items() if v not in ("", None)}
    flags = FLAG_META if meta else 0
    parts = [_HEADER.pack(MAGIC, width, height, bands, _CODE_FOR_DTYPE[data.dtype], flags, 0,
                          nodata, gsd),
             struct.pack("<H", len(names)), names]
    if meta:
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts += [struct.pack("<H", len(blob)), blob]
    parts.append(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def _decode(buf: bytes, source: str):
    if len(buf) < _HEADER.size + 2:
        raise RasterFormatError(f"{source}: malformed header (file too short)")
    magic, width, height, bands, code, flags, _reserved, nodata, gsd = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"{source}: malformed header (bad magic {magic!r})")
    if code not in _DTYPE_CODES:
        raise RasterFormatError(f"{source}: dtype code {code} unsupported")
    pos = _HEADER.size
    (name_len,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + name_len > len(buf):
        raise RasterFormatError(f"{source}: malformed header (name table overruns file)")
    names_blob = buf[pos:pos + name_len].decode("utf-8")
    pos += name_len
    names = tuple(names_blob.split("\0")) if bands else ()
    meta = {}
    if flags & FLAG_META:
        if pos + 2 > len(buf):
            raise RasterFormatError(f"{source}: malformed header (missing metadata block)")
        (meta_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        try:
            meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        except ValueError as exc:
            raise RasterFormatError(f"{source}: malformed metadata block: {exc}") from None
        pos += meta_len
    dtype = _DTYPE_CODES[code]
    expected = width * height * bands * dtype.itemsize
    if len(buf) - pos != expected:
        raise RasterFormatError(f"{source}: truncated payload ({len(buf) - pos} bytes, "
                                f"expected {expected} for {width}x{height}x{bands} {dtype.name})")
    data = np.frombuffer(buf, dtype=dtype, count=width * height * bands, offset=pos)
    data = data.reshape(bands, height, width).astype(dtype.newbyteorder("="))
    return data, names, float(nodata), float(gsd), meta


def write_raster(raster: MultibandRaster, path: str | os.PathLike) -> None:
    blob = _encode(raster.data, raster.band_names, raster.nodata_value, raster.gsd_m,
                   {"region": raster.region, "acquired_at": raster.acquired_at})
    Path(path).write_bytes(blob)


def read_raster(path: str | os.PathLike) -> MultibandRaster:
    """Read a RAS1 file, or a GeoTIFF through the optional adapter."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] in (b"II*\x00", b"MM\x00*", b"II+\x00", b"MM\x00+"):
        return _read_geotiff(path)
    data, names, nodata, gsd, meta = _decode(buf, str(path))
    try:
        return MultibandRaster(data, names, nodata, gsd, meta.get("region", ""), meta.get("acquired_at", ""))
    except ValueError as exc:
        raise RasterFormatError(f"{path}: {exc}") from None


def read_header(path: str | os.PathLike) -> dict:
    """Dimensions and dtype of a RAS1 file without decoding the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise RasterFormatError(f"{path}: malformed header")
    _, width, height, bands, code, *_ = _HEADER.unpack(head)
    return {"width": width, "height": height, "bands": bands, "dtype_code": code}


def write_mask(mask: LabelMask, path: str | os.PathLike) -> None:
    blob = _encode(mask.values[None], ("label",), float(UNLABELED), mask.gsd_m,
                   {"class_scheme": mask.scheme.name})
    Path(path).write_bytes(blob)


def read_mask(path: str | os.PathLike, scheme: ClassScheme | None = None) -> LabelMask:
    data, names, _nodata, gsd, meta = _decode(Path(path).read_bytes(), str(path))
    if data.shape[0] != 1 or data.dtype != np.uint8:
        raise RasterFormatError(f"{path}: label masks must be single-band u8")
    if scheme is None:
        scheme = get_scheme(meta.get("class_scheme", "dynamic-world"))
    try:
        return LabelMask(data[0], scheme, gsd)
    except ValueError as exc:
        raise RasterFormatError(f"{path}: {exc}") from None


def _read_geotiff(path: Path) -> MultibandRaster:
    try:
        import tifffile
    except ImportError:
        raise RasterFormatError(f"{path}: GeoTIFF input needs the optional 'tifffile' package") from None
    arr = tifffile.imread(path)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and arr.shape[-1] < arr.shape[0]:
        arr = np.moveaxis(arr, -1, 0)
    if arr.dtype not in _CODE_FOR_DTYPE:
        arr = arr.astype(np.float32)
    names = tuple(f"band_{i + 1}" for i in range(arr.shape[0]))
    return MultibandRaster(np.ascontiguousarray(arr), names, 0.0, 10.0, "", "")


def labels_from_probabilities(probs: np.ndarray, scheme: ClassScheme | None = None,
                              gsd_m: float = 10.0) -> LabelMask:
    """Per-pixel argmax of an H x W x C probability cube; ties go to the lowest id."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValueError(f"probability cube must be H x W x C, got {probs.shape}")
    if np.isnan(probs).any():
        raise ValueError("NaN probability")
    if scheme is None:
        scheme = DYNAMIC_WORLD if probs.shape[2] == len(DYNAMIC_WORLD) else generic_scheme(probs.shape[2])
    if probs.shape[2] != len(scheme):
        raise ValueError(f"{probs.shape[2]} probability channels for a {len(scheme)}-class scheme")
    return LabelMask(np.argmax(probs, axis=2).astype(np.uint8), scheme, gsd_m)


# manifests --------------------------------------------------------------------


@dataclass
class ManifestEntry:
    patch: str
    region: str
    split: str
    label: str | None = None
    acquired_at: str = ""
    gsd_m: float = 10.0
    source: str = ""
    row: int = 0
    col: int = 0
    offset: tuple[int, int] = (0, 0)

    def to_dict(self) -> dict:
        return {"patch": self.patch, "label": self.label, "region": self.region, "split": self.split,
                "acquired_at": self.acquired_at, "gsd_m": self.gsd_m, "source": self.source,
                "row": self.row, "col": self.col, "offset": list(self.offset)}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    class_scheme: ClassScheme = DYNAMIC_WORLD
    provenance: dict = field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: sum(1 for e in self.entries if e.split == s) for s in SPLITS}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_dict(self) -> dict:
        return {"version": MANIFEST_VERSION, "class_scheme": self.class_scheme.to_dict(),
                "provenance": self.provenance, "entries": [e.to_dict() for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self, check_files: bool = False) -> None:
        problems = []
        seen: dict[str, int] = {}
        for i, e in enumerate(self.entries):
            if e.split not in SPLITS:
                problems.append(f"entry {i}: split {e.split!r} not one of {SPLITS}")
            if e.patch in seen:
                problems.append(f"entry {i}: patch {e.patch!r} already listed at entry {seen[e.patch]}")
            seen.setdefault(e.patch, i)
            if not e.gsd_m > 0:
                problems.append(f"entry {i}: gsd_m must be positive")
            if check_files:
                ppath = self.resolve(e.patch)
                if not ppath.exists():
                    problems.append(f"entry {i}: dangling patch path {e.patch!r}")
                    continue
                if e.label is not None:
                    lpath = self.resolve(e.label)
                    if not lpath.exists():
                        problems.append(f"entry {i}: dangling label path {e.label!r}")
                        continue
                    ph, lh = read_header(ppath), read_header(lpath)
                    if (ph["width"], ph["height"]) != (lh["width"], lh["height"]):
                        problems.append(f"entry {i}: label {lh['width']}x{lh['height']} does not match "
                                        f"patch {ph['width']}x{ph['height']}")
        if problems:
            raise ManifestError("invalid manifest: " + "; ".join(problems))


_ENTRY_KEYS = {"patch", "label", "region", "split", "acquired_at", "gsd_m", "source", "row", "col", "offset"}


def manifest_from_dict(d: dict, root: Path | None = None) -> DatasetManifest:
    if not isinstance(d, dict) or "entries" not in d:
        raise ManifestError("manifest must be an object with an 'entries' list")
    if d.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {d.get('version')}")
    entries = []
    for i, raw in enumerate(d["entries"]):
        if not isinstance(raw, dict):
            raise ManifestError(f"entry {i}: not an object")
        unknown = set(raw) - _ENTRY_KEYS
        if unknown:
            raise ManifestError(f"entry {i}: unknown fields {sorted(unknown)}")
        for key in ("patch", "region", "split"):
            if key not in raw:
                raise ManifestError(f"entry {i}: missing field {key!r}")
        try:
            entries.append(ManifestEntry(
                patch=str(raw["patch"]), region=str(raw["region"]), split=str(raw["split"]),
                label=raw.get("label"), acquired_at=str(raw.get("acquired_at", "")),
                gsd_m=float(raw.get("gsd_m", 10.0)), source=str(raw.get("source", "")),
                row=int(raw.get("row", 0)), col=int(raw.get("col", 0)),
                offset=tuple(int(v) for v in raw.get("offset", (0, 0)))))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"entry {i}: {exc}") from None
    scheme_raw = d.get("class_scheme", DYNAMIC_WORLD.name)
    try:
        scheme = get_scheme(scheme_raw) if isinstance(scheme_raw, str) else ClassScheme.from_dict(scheme_raw)
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestError(f"class_scheme: {exc}") from None
    return DatasetManifest(entries, scheme, dict(d.get("provenance", {})), root)


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except ValueError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from None
    m = manifest_from_dict(d, root=path.parent)
    m.validate(check_files=check_files)
    return m


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    manifest.validate()
    Path(path).write_text(manifest.to_json())


def sorted_entries(entries: Iterable[ManifestEntry]) -> list[ManifestEntry]:
    return sorted(entries, key=lambda e: (e.source, e.row, e.col, e.patch))
