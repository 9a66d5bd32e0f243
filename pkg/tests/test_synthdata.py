import json

import numpy as np
import pytest
from PIL import Image

from diffseg.synthdata import (AREA_RANGE, CorpusSpec, SegSample, generate_corpus,
                               load_corpus, load_manifest, render_sample)


def small_spec(**kw):
    base = dict(counts={"train": 4, "val": 2, "test": 2}, image_size=32, seed=11)
    base.update(kw)
    return CorpusSpec(**base)


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(contrast=0.0)
    with pytest.raises(ValueError):
        CorpusSpec(contrast=1.5)
    with pytest.raises(ValueError):
        CorpusSpec(shape_family="square")
    with pytest.raises(ValueError):
        CorpusSpec(counts={"train": 0})


def test_noiseless_high_contrast_is_separable():
    spec = small_spec(contrast=1.0, noise_std=0.0, blur_radius=0.0)
    image, mask = render_sample(spec, [1, 2, 3])
    assert image[mask > 0].min() > image[mask == 0].max()


def test_generation_bit_identical(tmp_path):
    spec = small_spec()
    generate_corpus(spec, tmp_path / "a")
    generate_corpus(spec, tmp_path / "b")
    ma = (tmp_path / "a" / "manifest.json").read_text()
    mb = (tmp_path / "b" / "manifest.json").read_text()
    assert ma == mb
    for rel in ["train/images/train_00000.png", "test/masks/test_00001.png"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.parametrize("family", ["ellipse", "blob", "crescent"])
def test_area_fraction_within_range(family):
    spec = small_spec(shape_family=family)
    lo, hi = AREA_RANGE
    for i in range(100):
        _, mask = render_sample(spec, [spec.seed, 9, i])
        assert lo <= mask.mean() <= hi


def test_round_trip_pixel_identical(tmp_path):
    spec = small_spec(counts={"train": 3, "val": 1, "test": 1})
    root = generate_corpus(spec, tmp_path)
    for sample in load_corpus(root, "train"):
        png = np.asarray(Image.open(root / "train" / "images" / f"{sample.id}.png"))
        assert np.array_equal(np.round(sample.image * 255).astype(np.uint8), png)
        mask_png = np.asarray(Image.open(root / "train" / "masks" / f"{sample.id}.png"))
        assert np.array_equal(sample.mask * 255, mask_png)


def test_empty_split_yields_nothing(tmp_path):
    root = generate_corpus(small_spec(), tmp_path)
    manifest = load_manifest(root)
    manifest["ids"]["test"] = []
    (root / "manifest.json").write_text(json.dumps(manifest))
    assert list(load_corpus(root, "test")) == []


def test_nonbinary_mask_rejected_with_id(tmp_path):
    root = generate_corpus(small_spec(), tmp_path)
    bad = np.full((32, 32), 128, dtype=np.uint8)
    Image.fromarray(bad).save(root / "train" / "masks" / "train_00001.png")
    with pytest.raises(ValueError, match="train_00001"):
        list(load_corpus(root, "train"))


def test_missing_file_names_sample(tmp_path):
    root = generate_corpus(small_spec(), tmp_path)
    (root / "train" / "images" / "train_00002.png").unlink()
    with pytest.raises(IOError, match="train_00002"):
        list(load_corpus(root, "train"))


def test_resize_preserves_binarity_and_sizes(tmp_path):
    root = generate_corpus(small_spec(), tmp_path)
    for sample in load_corpus(root, "train", image_size=16):
        assert sample.image.shape == (16, 16)
        assert set(np.unique(sample.mask)) <= {0, 1}


def test_splits_disjoint_by_id(tmp_path):
    root = generate_corpus(small_spec(), tmp_path)
    manifest = load_manifest(root)
    ids = [set(v) for v in manifest["ids"].values()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])


def test_segsample_invariants():
    with pytest.raises(ValueError):
        SegSample(image=np.zeros((4, 4), np.float32), mask=np.zeros((5, 5), np.uint8),
                  id="x", split="train")
    with pytest.raises(ValueError):
        SegSample(image=np.zeros((4, 4), np.float32),
                  mask=np.full((4, 4), 2, np.uint8), id="x", split="train")


def test_unknown_split():
    with pytest.raises(ValueError):
        list(load_corpus("/nonexistent", "dev"))
