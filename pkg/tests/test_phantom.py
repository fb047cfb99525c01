import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesion_decomp.errors import DegenerateStatsError, InvalidSpecError, RoiTooSmallError
from lesion_decomp.phantom import (
    CENTER_MARGIN,
    ImageSample,
    NormStats,
    PhantomSpec,
    blob_profile,
    compute_norm_stats,
    generate_phantom_corpus,
    inject_lesions,
    load_manifest,
    load_samples,
    preprocess,
    render_normal_phantom,
    sample_rng,
)


def _tree(root: Path):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


def test_empty_corpus(tmp_path):
    spec = PhantomSpec(n_normal=0, n_lesioned=0)
    m = generate_phantom_corpus(spec, 0, tmp_path)
    assert m.n_total == 0 and m.n_normal == 0
    assert load_manifest(tmp_path).n_total == 0


def test_generation_is_byte_identical(tmp_path):
    spec = PhantomSpec(n_normal=5, n_lesioned=4, n_test_normal=1, n_test_lesioned=2)
    a, b = tmp_path / "a", tmp_path / "b"
    generate_phantom_corpus(spec, 7, a)
    generate_phantom_corpus(spec, 7, b)
    files = _tree(a)
    assert files == _tree(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert mismatch == [] and errors == []


def test_different_seeds_differ(tmp_path):
    spec = PhantomSpec(n_normal=2, n_lesioned=0)
    generate_phantom_corpus(spec, 1, tmp_path / "a")
    generate_phantom_corpus(spec, 2, tmp_path / "b")
    assert (tmp_path / "a/images/train/n00000.png").read_bytes() != \
        (tmp_path / "b/images/train/n00000.png").read_bytes()


def test_corpus_counts_and_masks(tmp_path):
    spec = PhantomSpec(image_size=64, n_normal=40, n_lesioned=20, n_test_lesioned=20)
    m = generate_phantom_corpus(spec, 1, tmp_path)
    assert m.n_total == 60 and m.n_normal == 40
    reloaded = load_manifest(tmp_path)
    assert reloaded.n_total == 60 and reloaded.n_normal == 40
    assert reloaded.phantom_spec == spec and reloaded.generator_seed == 1
    for entry, sample in zip(reloaded.entries, load_samples(reloaded)):
        if entry.label == 0:
            assert entry.mask_path is None
            assert sample.lesion_mask is None
        else:
            mask = sample.lesion_mask
            assert 1 <= mask.sum() <= 64 * 64
            assert not np.any(mask & ~sample.roi_mask)
        assert np.all(sample.image[~sample.roi_mask] == 0)


def test_layout_and_spec_file(small_corpus):
    root = small_corpus.root
    d = json.loads((root / "phantom_spec.json").read_text())
    assert d["seed"] == 3 and d["image_size"] == 64
    header = (root / "manifest.csv").read_text().splitlines()[0]
    assert header.split(",")[:4] == ["path", "mask_path", "label", "split"]
    assert (root / "masks/test").is_dir()
    assert not (root / "masks/train").exists()
    assert len(list((root / "masks/test").glob("*.png"))) == 4


def test_train_split_needs_no_mask_files(small_corpus):
    for e in small_corpus.split("train"):
        assert e.mask_path is None


def test_degenerate_texture_is_flat():
    spec = PhantomSpec(noise_amplitude=0.0, vessel_count=(0, 0), background_jitter=0.0)
    image, roi = render_normal_phantom(sample_rng(0, 0), spec)
    assert np.all(image[roi] == spec.background_level)
    assert np.all(image[~roi] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_outside_roi_is_zero(seed, index):
    image, roi = render_normal_phantom(sample_rng(seed, index), PhantomSpec())
    assert roi.any()
    assert np.all(image[~roi] == 0)
    assert image.min() >= 0 and image.max() <= 1


def test_independent_draws_differ():
    spec = PhantomSpec()
    for k in range(100):
        a, ra = render_normal_phantom(sample_rng(11, 2 * k), spec)
        b, rb = render_normal_phantom(sample_rng(11, 2 * k + 1), spec)
        both = ra & rb
        assert np.any(a[both] != b[both])


def test_zero_contrast_leaves_image_unchanged():
    spec = PhantomSpec(blob_contrast=(0.0, 0.0))
    image, roi = render_normal_phantom(sample_rng(0, 1), spec)
    out, lesion = inject_lesions(image, roi, sample_rng(0, 2), spec)
    np.testing.assert_array_equal(out, image)
    assert not lesion.any()


def test_single_blob_peak_at_center():
    spec = PhantomSpec(blob_count=(1, 1), blob_radius=(5.0, 5.0), blob_contrast=(0.3, 0.3),
                       background_level=0.3, noise_amplitude=0.0, background_jitter=0.0)
    size = 64
    c = size // 2
    # a (2*margin+1)^2 square ROI forces the only admissible centre to be c
    roi = np.zeros((size, size), dtype=bool)
    roi[c - CENTER_MARGIN:c + CENTER_MARGIN + 1, c - CENTER_MARGIN:c + CENTER_MARGIN + 1] = True
    roi_big = np.zeros_like(roi)
    roi_big[c - 20:c + 20, c - 20:c + 20] = True
    image = np.where(roi_big, 0.3, 0.0)
    out, lesion = inject_lesions(image, roi, sample_rng(0, 0), spec)
    diff = out - image
    assert diff.min() >= 0
    assert diff[c, c] == pytest.approx(0.3, abs=1e-12)
    assert diff.max() == pytest.approx(0.3, abs=1e-12)
    assert lesion[c, c]
    # the blob itself (before ROI masking) peaks at the centre
    profile = blob_profile((size, size), (c, c), 5.0, 0.3, 1.0)
    assert profile.max() == pytest.approx(0.3, abs=1e-12)
    assert profile[c, c] == pytest.approx(0.3, abs=1e-12)
    assert np.all(profile >= 0)


def test_half_peak_mask_matches_radius():
    profile = blob_profile((41, 41), (20, 20), 6.0, 0.2, 1.0)
    mask = profile >= 0.1
    yy, xx = np.mgrid[0:41, 0:41]
    r = np.hypot(yy - 20, xx - 20)
    assert mask[r <= 5.5].all()
    assert not mask[r >= 6.5].any()


def test_blob_near_border_stays_inside_roi():
    spec = PhantomSpec(blob_count=(3, 3), blob_radius=(6.0, 6.0), blob_contrast=(0.2, 0.2))
    roi = np.zeros((64, 64), dtype=bool)
    roi[10:17, 10:40] = True
    image = np.where(roi, 0.4, 0.0)
    for k in range(10):
        out, lesion = inject_lesions(image, roi, sample_rng(5, k), spec)
        assert not np.any(lesion & ~roi)
        assert np.all(out[~roi] == 0)


def test_roi_too_small():
    roi = np.zeros((64, 64), dtype=bool)
    roi[5:8, 5:8] = True
    with pytest.raises(RoiTooSmallError):
        inject_lesions(np.zeros((64, 64)), roi, sample_rng(0, 0), PhantomSpec())


@pytest.mark.parametrize("kwargs", [
    {"image_size": 16},
    {"blob_radius": (5.0, 3.0)},
    {"blob_count": (3, 1)},
    {"blob_contrast": (0.1, 0.9)},
    {"n_test_lesioned": 50, "n_lesioned": 10},
])
def test_invalid_spec(kwargs):
    with pytest.raises(InvalidSpecError):
        PhantomSpec(**kwargs)


def test_unwritable_out_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InvalidSpecError):
        generate_phantom_corpus(PhantomSpec(n_normal=1, n_lesioned=0), 0, blocker / "sub")


def _single_pixel(v):
    return ImageSample(image=np.array([[v]]), label=0, roi_mask=np.array([[True]]))


def test_norm_stats_arithmetic():
    stats = compute_norm_stats([_single_pixel(0.2), _single_pixel(0.6)])
    assert stats.mean == pytest.approx(0.4, abs=1e-12)
    assert stats.std == pytest.approx(0.2, abs=1e-12)


def test_norm_stats_degenerate():
    img = np.full((4, 4), 0.5)
    roi = np.zeros((4, 4), dtype=bool)
    roi[1:3, 1:3] = True
    img[~roi] = 0.0
    with pytest.raises(DegenerateStatsError):
        compute_norm_stats([ImageSample(img, 0, roi)])


def test_norm_stats_roi_only():
    img = np.array([[0.2, 0.0], [0.6, 0.0]])
    roi = np.array([[True, False], [True, False]])
    stats = compute_norm_stats([ImageSample(img, 0, roi)])
    assert stats.mean == pytest.approx(0.4) and stats.std == pytest.approx(0.2)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=2, max_size=6),
       st.randoms(use_true_random=False))
def test_norm_stats_permutation_invariant(rows, rnd):
    samples = [ImageSample(np.array(r).reshape(2, 2), 0, np.ones((2, 2), dtype=bool)) for r in rows]
    try:
        a = compute_norm_stats(samples)
    except DegenerateStatsError:
        return
    shuffled = samples[:]
    rnd.shuffle(shuffled)
    b = compute_norm_stats(shuffled)
    assert a == b


def test_norm_stats_from_manifest(small_corpus):
    stats = compute_norm_stats(small_corpus)
    assert stats.std > 0 and 0 < stats.mean < 1


def test_norm_stats_json_roundtrip(tmp_path):
    s = NormStats(0.25, 0.125)
    s.save(tmp_path / "norm_stats.json")
    assert NormStats.load(tmp_path / "norm_stats.json") == s
    assert set(json.loads((tmp_path / "norm_stats.json").read_text())) == {"mean", "std"}


def test_preprocess_arithmetic():
    sample = ImageSample(np.full((32, 32), 0.5), 0, np.ones((32, 32), dtype=bool))
    out = preprocess(sample, NormStats(0.3, 0.1), 32)
    np.testing.assert_allclose(out, 2.0, rtol=0, atol=1e-6)
    out = preprocess(sample, NormStats(0.5, 0.1), 32)
    assert np.all(out == 0)


def test_preprocess_identity_resize_and_masking():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(64, 64))
    roi = np.zeros((64, 64), dtype=bool)
    roi[10:50, 5:30] = True
    stats = NormStats(0.4, 0.2)
    out = preprocess(ImageSample(img, 0, roi), stats, 64)
    expected = (np.where(roi, img, 0.0) - 0.4) / 0.2
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-6)
    fill = (0.0 - 0.4) / 0.2
    assert np.allclose(out[~roi], fill)


def test_preprocess_resize_changes_shape():
    img = np.full((64, 64), 0.5)
    roi = np.ones((64, 64), dtype=bool)
    out = preprocess(ImageSample(img, 0, roi), NormStats(0.5, 0.1), 32)
    assert out.shape == (32, 32)
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_preprocess_masking_is_idempotent():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(32, 32))
    roi = rng.uniform(size=(32, 32)) > 0.3
    stats = NormStats(0.3, 0.2)
    once = preprocess(ImageSample(img, 0, roi), stats, 32)
    # undo normalization, then run the pipeline again on the masked image
    masked = once.astype(np.float64) * stats.std + stats.mean
    twice = preprocess(ImageSample(masked, 0, roi), stats, 32)
    fill = -stats.mean / stats.std
    np.testing.assert_allclose(twice[~roi], fill, atol=1e-5)
    np.testing.assert_allclose(twice, once, atol=1e-5)


def test_sample_rng_independent_of_order():
    a = sample_rng(3, 10).uniform(size=5)
    _ = sample_rng(3, 9).uniform(size=5)
    b = sample_rng(3, 10).uniform(size=5)
    np.testing.assert_array_equal(a, b)
