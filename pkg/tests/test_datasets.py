import numpy as np
import pytest
from PIL import Image

from cgrp.datasets import (
    DistortionRanges,
    PairRecord,
    SplitManifest,
    distort_corpus,
    load_record,
    load_records,
    read_manifest,
    sample_batch,
    save_record,
    scan_pairs,
    split_corpus,
    synthesize_pair,
    synthetic_corpus,
    synthetic_scene,
    write_manifest,
)
from cgrp.geometry import AffineParams, DeformationField
from cgrp.images import (
    GrayImage,
    check_gray_image,
    check_pair_stack,
    read_image,
    recolor,
    write_image,
)
from cgrp.metrics import mse


@pytest.fixture
def pair():
    return synthetic_scene(32, 7)


# -- images ----------------------------------------------------------------

def test_gray_image_validation():
    GrayImage(np.zeros((3, 3)), "fused")
    with pytest.raises(ValueError):
        GrayImage(np.full((3, 3), 1.5))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((3, 3)), "thermal")
    with pytest.raises(ValueError):
        check_gray_image(np.zeros((2, 3, 3)))


def test_pair_stack_validation():
    assert check_pair_stack(np.zeros((2, 5, 5))).shape == (1, 2, 5, 5)
    with pytest.raises(ValueError, match="n_samples, 2"):
        check_pair_stack(np.zeros((3, 3, 5, 5)))
    with pytest.raises(ValueError):
        check_pair_stack(-np.ones((1, 2, 4, 4)))


@pytest.mark.parametrize("bits,tol", [(8, 0.5 / 255 + 1e-9), (16, 0.5 / 65535 + 1e-9)])
def test_png_round_trip(tmp_path, rng, bits, tol):
    img = rng.random((9, 6)).astype(np.float32)
    write_image(tmp_path / "x.png", img, bits=bits)
    back = read_image(tmp_path / "x.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= tol


def test_colour_input_reduced_to_luminance(tmp_path):
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
    gray, chroma = read_image(tmp_path / "c.png", keep_chroma=True)
    assert np.allclose(gray, 0.299, atol=1e-6)
    assert chroma.shape == (4, 4, 3)
    back = recolor(gray, chroma)
    assert np.allclose(back, chroma, atol=2e-3)


# -- synthesis -------------------------------------------------------------

def test_identity_distortion_is_noop(pair):
    vis, ir = pair
    r = synthesize_pair(vis, ir, AffineParams(), (4.0, 0.0, 1))
    assert np.array_equal(r.ir_distorted, r.ir_aligned)
    assert not r.gt_field.dx.any() and not r.gt_field.dy.any()


def test_translation_shift_oracle(pair):
    vis, ir = pair
    r = synthesize_pair(vis, ir, AffineParams(translation=(2.0, 0.0)), (4.0, 0.0, 1))
    assert np.allclose(r.ir_distorted[:, :-2], ir[:, 2:], atol=1e-6)
    assert mse(r.ir_distorted, r.ir_aligned) > 0


def test_synthesis_deterministic_and_invariant(pair):
    vis, ir = pair
    a = synthesize_pair(vis, ir, AffineParams(rotation=3.0), (6.0, 4.0, 9))
    b = synthesize_pair(vis, ir, AffineParams(rotation=3.0), (6.0, 4.0, 9))
    assert np.array_equal(a.ir_distorted, b.ir_distorted)
    assert np.array_equal(a.gt_field.dx, b.gt_field.dx)
    assert a.check_invariant(1e-6)


def test_synthesis_shape_mismatch(pair):
    vis, ir = pair
    with pytest.raises(ValueError):
        synthesize_pair(vis, ir[:-1], AffineParams(), (4.0, 1.0, 0))


def test_distort_corpus_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        distort_corpus([], DistortionRanges(1, 1, 0, 0, 4, 1), 0)


def test_distort_corpus_respects_ranges():
    recs = distort_corpus(synthetic_corpus(4, 32, 0), DistortionRanges(5, 5, 0.0, 0.0, 8.0, 6.0), seed=3)
    for r in recs:
        assert abs(r.meta["rotation"]) <= 5 and r.meta["alpha"] <= 6
        assert r.check_invariant()


# -- sampling --------------------------------------------------------------

def _records(n=3, size=32):
    return distort_corpus(synthetic_corpus(n, size, 0), DistortionRanges(3, 3, 0, 0, 6, 3), seed=1)


def test_full_size_patch_is_whole_image():
    recs = _records(1)
    b = sample_batch(recs, patch=32, count=1, seed=0)
    assert b["offsets"] == [(0, 0, 0)]
    assert np.array_equal(b["vis"][0], recs[0].vis)
    assert np.array_equal(b["gt_field"][0, 0], recs[0].gt_field.dx)


def test_batch_shapes_and_colocation():
    recs = _records(3)
    b = sample_batch(recs, patch=16, count=8, seed=4)
    for key in ("vis", "ir_distorted", "ir_aligned"):
        assert b[key].shape == (8, 16, 16)
    assert b["gt_field"].shape == (8, 2, 16, 16)
    for i, (idx, top, left) in enumerate(b["offsets"]):
        r = recs[idx]
        assert np.array_equal(b["ir_aligned"][i], r.ir_aligned[top:top + 16, left:left + 16])
        assert np.array_equal(b["gt_field"][i, 1], r.gt_field.dy[top:top + 16, left:left + 16])


def test_sampling_reproducible_and_seed_dependent():
    big = [PairRecord(np.zeros((512, 512)), np.zeros((512, 512)), np.zeros((512, 512)),
                      DeformationField.zeros(512, 512))]
    a = sample_batch(big, 256, 8, seed=1)["offsets"]
    assert a == sample_batch(big, 256, 8, seed=1)["offsets"]
    assert a != sample_batch(big, 256, 8, seed=2)["offsets"]


def test_patch_larger_than_image_rejected():
    with pytest.raises(ValueError, match="smaller than patch"):
        sample_batch(_records(1), patch=64, count=1)


# -- splits and files ------------------------------------------------------

def test_split_fraction_and_disjointness():
    ids = [f"i{k}" for k in range(100)]
    m = split_corpus(ids, 0.55, seed=0)
    assert len(m.test) == 55 and len(m.train) == 45
    assert not set(m.train) & set(m.test)
    assert split_corpus(ids, 0.55, seed=0) == m


def test_split_overlap_flag():
    ids = [f"i{k}" for k in range(20)]
    m = split_corpus(ids, 0.55, seed=0, overlap=True)
    assert m.train == ids and set(m.test) <= set(ids) and len(m.test) == 11


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_fraction_bounds(frac):
    with pytest.raises(ValueError):
        split_corpus(["a", "b"], frac)


def test_split_empty():
    with pytest.raises(ValueError):
        split_corpus([], 0.5)


def test_manifest_rejects_overlap_without_flag():
    with pytest.raises(ValueError):
        SplitManifest(["a"], ["a"])


def test_manifest_round_trip(tmp_path):
    m = SplitManifest(["b", "a"], ["c"], {"corpus": "toy", "seed": "3"})
    write_manifest(m, tmp_path / "m.txt")
    text = (tmp_path / "m.txt").read_text()
    assert "train:\nb\na\ntest:\nc\n" in text
    assert read_manifest(tmp_path / "m.txt") == m


def test_record_round_trip_lossless(tmp_path):
    r = _records(1)[0]
    save_record(r, tmp_path / "rec")
    back = load_record(tmp_path / "rec")
    for name in ("vis", "ir_aligned", "ir_distorted"):
        assert np.array_equal(getattr(back, name), getattr(r, name))
    assert np.array_equal(back.gt_field.dx, r.gt_field.dx)
    assert back.item_id == r.item_id and back.corpus == r.corpus
    assert back.check_invariant(1e-6)


def test_load_records_reports_missing(tmp_path):
    save_record(_records(1)[0], tmp_path / "syn0000")
    with pytest.raises(FileNotFoundError):
        load_records(tmp_path, ["syn0000", "nope"])


def test_scan_pairs(tmp_path, rng):
    (tmp_path / "vis").mkdir()
    (tmp_path / "ir").mkdir()
    for name in ("a", "b"):
        write_image(tmp_path / "vis" / f"{name}.png", rng.random((8, 8)))
        write_image(tmp_path / "ir" / f"{name}.png", rng.random((8, 8)))
    write_image(tmp_path / "vis" / "orphan.png", rng.random((8, 8)))
    items = scan_pairs(tmp_path)
    assert [i for i, _, _ in items] == ["a", "b"]
