import numpy as np

from wetseg.datasets import load_split
from wetseg.rascore import load_manifest
from wetseg.synthetic import class_signatures, render_image, synthetic_mask, synthetic_patch, write_dataset


def test_patch_is_deterministic_and_bounded():
    a, ma = synthetic_patch(7, 32, 9, jitter=0.2)
    b, mb = synthetic_patch(7, 32, 9, jitter=0.2)
    assert a.tobytes() == b.tobytes() and np.array_equal(ma, mb)
    assert a.dtype == np.float32 and a.min() >= 0 and a.max() <= 1
    assert set(np.unique(ma)) <= {0, 1, 2}


def test_mask_has_all_three_classes_usually():
    rng = np.random.default_rng(0)
    seen = [set(np.unique(synthetic_mask(rng, 64)).tolist()) for _ in range(20)]
    assert sum(s == {0, 1, 2} for s in seen) >= 15


def test_texture_defined_stripe_is_background_without_texture():
    sig = class_signatures(5)
    mask = synthetic_mask(np.random.default_rng(1), 32)
    as_background = np.where(mask == 2, 0, mask).astype(np.uint8)
    kw = dict(texture=0.0, jitter=0.2)
    tied = render_image(np.random.default_rng(9), mask, sig, texture_defined=True, **kw)
    plain = render_image(np.random.default_rng(9), as_background, sig, **kw)
    assert tied.tobytes() == plain.tobytes()
    own = render_image(np.random.default_rng(9), mask, sig, **kw)
    assert own.tobytes() != plain.tobytes()


def test_write_dataset_manifest(tmp_path):
    m = write_dataset(tmp_path, {"train": 3, "val": 1}, size=16, num_bands=4, seed=2)
    again = load_manifest(tmp_path / "manifest.json")
    assert again.counts() == m.counts() and m.counts()["train"] == 3
    data = load_split(again, "train", labeled=True)
    assert data.x.shape == (3, 4, 16, 16) and data.y.shape == (3, 16, 16)
    unl = write_dataset(tmp_path / "u", {"train": 2}, size=16, labeled=False)
    assert all(e.label is None for e in unl.entries)
