import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from streamfcl.augment import WEAK_METHODS, AugmentationPipeline, strong_views, weak_view

images = arrays(np.float64, st.tuples(st.just(3), st.integers(2, 9), st.integers(2, 9)),
                elements=st.floats(0.0, 1.0))


def _img(seed=0, shape=(3, 8, 8)):
    return np.random.default_rng(seed).uniform(size=shape)


def test_identity_pipeline_returns_input():
    x = _img()
    v1, v2 = strong_views(x, AugmentationPipeline.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(v1, x)
    np.testing.assert_array_equal(v2, x)


def test_same_rng_state_same_views():
    x = _img(1)
    a = strong_views(x, AugmentationPipeline(), np.random.default_rng(5))
    b = strong_views(x, AugmentationPipeline(), np.random.default_rng(5))
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_certain_flip_mirrors_both_views():
    x = _img(2)
    p = AugmentationPipeline.identity()
    p.hflip_p = 1.0
    v1, v2 = strong_views(x, p, np.random.default_rng(0))
    np.testing.assert_array_equal(v1, x[:, :, ::-1])
    np.testing.assert_array_equal(v2, x[:, :, ::-1])


def test_views_are_independent_draws():
    x = _img(3)
    v1, v2 = strong_views(x, AugmentationPipeline(), np.random.default_rng(1))
    assert not np.array_equal(v1, v2)


@settings(max_examples=50, deadline=None)
@given(images, st.integers(0, 2**31))
def test_strong_pipeline_keeps_shape_and_range(x, seed):
    out = AugmentationPipeline()(x, np.random.default_rng(seed))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_batch_matches_shape():
    x = np.stack([_img(i) for i in range(4)])
    out = AugmentationPipeline()(x, np.random.default_rng(0))
    assert out.shape == x.shape


def test_crop_only_shifts_content():
    x = _img(4)
    p = AugmentationPipeline.identity()
    p.crop_pad = 2
    out = p(x, np.random.default_rng(3))
    # every nonzero output pixel value occurs in the input
    vals = set(np.round(x.ravel(), 12))
    assert all(v in vals for v in np.round(out[out != 0], 12))


def test_bad_pipeline_settings():
    with pytest.raises(ValueError):
        AugmentationPipeline(hflip_p=1.5)
    with pytest.raises(ValueError):
        AugmentationPipeline(crop_pad=-1)


# weak views

def test_hflip_width_two():
    x = np.array([[[0.1, 0.9]]])
    np.testing.assert_array_equal(weak_view(x, "hflip"), [[[0.9, 0.1]]])


@settings(max_examples=30, deadline=None)
@given(images)
def test_hflip_is_an_involution(x):
    np.testing.assert_array_equal(weak_view(weak_view(x, "hflip"), "hflip"), x)


def test_grayscale_of_gray_image_is_unchanged():
    g = np.random.default_rng(0).uniform(size=(1, 6, 6))
    x = np.repeat(g, 3, axis=0)
    assert np.max(np.abs(weak_view(x, "grayscale") - x)) <= 1e-6


@pytest.mark.parametrize("method", WEAK_METHODS)
def test_weak_views_are_pure(method):
    x = _img(7)
    before = x.copy()
    a, b = weak_view(x, method), weak_view(x, method)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(x, before)
    assert a.shape == x.shape and a.min() >= 0.0 and a.max() <= 1.0


def test_weak_crop_and_jitter_are_fixed_transforms():
    x = np.ones((3, 16, 16))
    c = weak_view(x, "crop")
    assert c[:, :2].sum() == 0 and c[:, :, -2:].sum() == 0 and np.all(c[:, 2:14, 2:14] == 1)
    np.testing.assert_allclose(weak_view(x, "jitter"), 0.8)


def test_weak_view_batches_match_single_images():
    x = np.stack([_img(i) for i in range(3)])
    for m in WEAK_METHODS:
        batched = weak_view(x, m)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], weak_view(x[i], m))


def test_unknown_weak_method():
    with pytest.raises(ValueError):
        weak_view(_img(), "blur")
