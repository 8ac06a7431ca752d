import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wetseg.errors import ManifestError, RasterFormatError
from wetseg.rascore import (
    BIESBOSCH_MANUAL,
    DYNAMIC_WORLD,
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    MultibandRaster,
    labels_from_probabilities,
    load_manifest,
    read_mask,
    read_raster,
    save_manifest,
    write_mask,
    write_raster,
)

from oracles import argmax_loop

S2_BANDS = ("B2", "B3", "B4", "B5", "B6", "B7", "B8", "B11", "B12")


def test_ras1_roundtrip_small(tmp_path):
    data = np.arange(32, dtype=np.float32).reshape(2, 4, 4)
    r = MultibandRaster(data, ("B2", "B3"), region="Lauwersmeer", acquired_at="2021-05-04")
    write_raster(r, tmp_path / "a.ras")
    back = read_raster(tmp_path / "a.ras")
    assert (back.width, back.height, back.bands) == (4, 4, 2)
    assert back == r
    write_raster(back, tmp_path / "b.ras")
    assert (tmp_path / "a.ras").read_bytes() == (tmp_path / "b.ras").read_bytes()


def test_header_layout(tmp_path):
    r = MultibandRaster(np.zeros((1, 3, 5), np.uint16), ("B8",), nodata_value=0, gsd_m=0.3)
    write_raster(r, tmp_path / "x.ras")
    buf = (tmp_path / "x.ras").read_bytes()
    magic, w, h, b, code, flags, res, nodata, gsd = struct.unpack_from("<4sIIIBBHff", buf)
    assert (magic, w, h, b, code, flags, res) == (b"RAS1", 5, 3, 1, 1, 0, 0)
    assert gsd == pytest.approx(0.3)
    (nlen,) = struct.unpack_from("<H", buf, 28)
    assert buf[30:30 + nlen] == b"B8"
    assert len(buf) == 30 + nlen + 15 * 2


def test_truncated_payload(tmp_path):
    r = MultibandRaster(np.ones((2, 4, 4), np.float32), ("a", "b"))
    write_raster(r, tmp_path / "t.ras")
    blob = (tmp_path / "t.ras").read_bytes()
    (tmp_path / "t.ras").write_bytes(blob[:-4])
    with pytest.raises(RasterFormatError, match="truncated payload"):
        read_raster(tmp_path / "t.ras")


def test_malformed_header_and_dtype(tmp_path):
    (tmp_path / "bad.ras").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(RasterFormatError, match="malformed header"):
        read_raster(tmp_path / "bad.ras")
    hdr = struct.pack("<4sIIIBBHff", b"RAS1", 1, 1, 1, 7, 0, 0, 0.0, 10.0) + struct.pack("<H", 1) + b"x" + b"\0"
    (tmp_path / "dt.ras").write_bytes(hdr)
    with pytest.raises(RasterFormatError, match="unsupported"):
        read_raster(tmp_path / "dt.ras")


def test_zero_band_raster_rejected():
    with pytest.raises(ValueError):
        MultibandRaster(np.zeros((0, 4, 4), np.float32), ())


def test_nine_band_patch_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    r = MultibandRaster(rng.integers(0, 10000, (9, 256, 256)).astype(np.uint16), S2_BANDS)
    write_raster(r, tmp_path / "s2.ras")
    back = read_raster(tmp_path / "s2.ras")
    assert back.bands == 9 and back.band_names == S2_BANDS


def test_large_hires_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    r = MultibandRaster(rng.random((4, 1024, 1024), dtype=np.float32), ("R", "G", "B", "NIR"), gsd_m=0.3)
    write_raster(r, tmp_path / "hr.ras")
    assert read_raster(tmp_path / "hr.ras") == r


@settings(max_examples=40, deadline=None)
@given(
    dtype=st.sampled_from([np.uint8, np.uint16, np.float32]),
    shape=st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(tmp_path_factory, dtype, shape, seed):
    rng = np.random.default_rng(seed)
    if dtype == np.float32:
        data = rng.normal(size=shape).astype(np.float32)
        data.reshape(-1)[0] = np.nan
    else:
        data = rng.integers(0, np.iinfo(dtype).max, size=shape, endpoint=True).astype(dtype)
    r = MultibandRaster(data, tuple(f"b{i}" for i in range(shape[0])), nodata_value=-1.0, gsd_m=2.5)
    path = tmp_path_factory.mktemp("rt") / "r.ras"
    write_raster(r, path)
    assert read_raster(path) == r


def test_mask_roundtrip(tmp_path):
    m = LabelMask(np.array([[0, 1], [8, 255]], dtype=np.uint8), DYNAMIC_WORLD)
    write_mask(m, tmp_path / "m.ras")
    assert read_mask(tmp_path / "m.ras") == m
    m2 = LabelMask(np.array([[4, 0]]), BIESBOSCH_MANUAL, gsd_m=0.3)
    write_mask(m2, tmp_path / "m2.ras")
    assert read_mask(tmp_path / "m2.ras") == m2


def test_mask_rejects_out_of_scheme():
    with pytest.raises(ValueError, match="outside scheme"):
        LabelMask(np.array([[5]]), BIESBOSCH_MANUAL)


def test_builtin_schemes():
    assert len(DYNAMIC_WORLD) == 9
    assert {"water", "grass", "reed", "forest", "built"} <= set(BIESBOSCH_MANUAL.labels)


def test_argmax_simple_and_tie():
    assert labels_from_probabilities(np.array([[[0.1, 0.7, 0.2]]])).values[0, 0] == 1
    assert labels_from_probabilities(np.array([[[0.5, 0.5]]])).values[0, 0] == 0


def test_argmax_nan_rejected():
    with pytest.raises(ValueError, match="NaN"):
        labels_from_probabilities(np.array([[[np.nan, 0.5]]]))


@pytest.mark.parametrize("seed", range(5))
def test_argmax_matches_loop(seed):
    rng = np.random.default_rng(seed)
    probs = rng.random((8, 8, 9))
    probs[0, 0, 3] = probs[0, 0, 5] = 2.0  # planted tie
    got = labels_from_probabilities(probs)
    np.testing.assert_array_equal(got.values, argmax_loop(probs))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])))
def test_argmax_property(probs):
    got = labels_from_probabilities(probs).values
    np.testing.assert_array_equal(got, argmax_loop(probs))


def _reference_manifest():
    entries = []
    for split, n, region in (("train", 1701, "Gelderse Poort"), ("val", 948, "Lauwersmeer"),
                             ("test", 1140, "Biesbosch")):
        entries += [ManifestEntry(f"{split}/{region}/p_{i}.ras", region, split) for i in range(n)]
    return DatasetManifest(entries, DYNAMIC_WORLD, {"patch_size": 256})


def test_manifest_split_counts(tmp_path):
    save_manifest(_reference_manifest(), tmp_path / "manifest.json")
    m = load_manifest(tmp_path / "manifest.json", check_files=False)
    assert m.counts() == {"train": 1701, "val": 948, "test": 1140}


def test_manifest_roundtrip_stable(tmp_path):
    m = _reference_manifest()
    save_manifest(m, tmp_path / "a.json")
    save_manifest(load_manifest(tmp_path / "a.json", check_files=False), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_empty_manifest(tmp_path):
    save_manifest(DatasetManifest(), tmp_path / "e.json")
    assert load_manifest(tmp_path / "e.json").entries == []


def test_manifest_bad_split(tmp_path):
    d = DatasetManifest().to_dict()
    d["entries"] = [{"patch": "a.ras", "region": "x", "split": "holdout"}]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="entry 0: split 'holdout'"):
        load_manifest(tmp_path / "m.json", check_files=False)


def test_manifest_dangling_path_reports_index(tmp_path):
    d = DatasetManifest().to_dict()
    d["entries"] = [{"patch": "missing.ras", "region": "x", "split": "train"}]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="entry 0: dangling patch path"):
        load_manifest(tmp_path / "m.json")


def test_manifest_partition_enforced():
    m = DatasetManifest([ManifestEntry("a.ras", "r", "train"), ManifestEntry("a.ras", "r", "test")])
    with pytest.raises(ManifestError, match="already listed"):
        m.validate()


def test_manifest_label_dims_checked(tmp_path):
    write_raster(MultibandRaster(np.zeros((1, 4, 4), np.uint8), ("b",)), tmp_path / "p.ras")
    write_mask(LabelMask(np.zeros((3, 4), np.uint8), DYNAMIC_WORLD), tmp_path / "l.ras")
    d = DatasetManifest().to_dict()
    d["entries"] = [{"patch": "p.ras", "label": "l.ras", "region": "x", "split": "train"}]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="does not match"):
        load_manifest(tmp_path / "m.json")
