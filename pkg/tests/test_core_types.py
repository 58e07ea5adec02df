import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bandssl.core_types import (
    CANONICAL_BANDS,
    BandImage,
    BandLabel,
    ClusterObservation,
    make_observation,
    normalize_observation,
    normalize_pixels,
    validate_observation,
)


def _obs(side=16, richness=12.0, seed=0):
    rng = np.random.default_rng(seed)
    return make_observation("c1", rng.normal(size=(5, side, side)), richness)


def test_band_label_order():
    assert [b.value for b in CANONICAL_BANDS] == ["u", "g", "r", "i", "z"]
    assert sorted(b.class_index for b in BandLabel) == [0, 1, 2, 3, 4]
    for b in BandLabel:
        assert BandLabel.from_index(b.class_index) is b
        assert BandLabel.coerce(b.value) is b


def test_valid_observation():
    assert validate_observation(_obs()) == []
    assert validate_observation(_obs(side=16), side=16) == []


def test_missing_band():
    obs = _obs()
    images = {b: img for b, img in obs.images.items() if b is not BandLabel.z}
    assert validate_observation(ClusterObservation("c1", images, 3.0)) == ["missing band z"]


def test_nan_pixel():
    stack = np.random.default_rng(0).normal(size=(5, 8, 8))
    stack[1, 3, 3] = np.nan
    assert validate_observation(make_observation("c", stack, 1.0)) == ["non-finite pixel in band g"]


def test_other_violations():
    stack = np.zeros((5, 8, 8))
    assert validate_observation(make_observation("c", stack, -1.0))
    assert validate_observation(make_observation("c", stack, 1.0), side=16)
    images = dict(make_observation("c", stack).images)
    images[BandLabel.r] = BandImage(np.zeros((8, 8)), BandLabel.r, "other")
    assert validate_observation(ClusterObservation("c", images)) == ["cluster_id mismatch in band r"]
    images[BandLabel.r] = BandImage(np.zeros((6, 6)), BandLabel.r, "c")
    assert "bands have differing dimensions" in validate_observation(ClusterObservation("c", images))


def test_images_are_read_only():
    obs = _obs()
    with pytest.raises(ValueError):
        obs.images[BandLabel.u].pixels[0, 0] = 1.0
    with pytest.raises(TypeError):
        obs.images[BandLabel.u] = None


def test_stacked_is_canonical_regardless_of_insertion_order():
    obs = _obs()
    shuffled = ClusterObservation("c1", {b: obs.images[b] for b in reversed(CANONICAL_BANDS)}, 1.0)
    np.testing.assert_array_equal(obs.stacked(), shuffled.stacked())


def test_zscore_constant_image_is_zero():
    img = BandImage(np.full((4, 4), 5.0), "g", "c")
    assert np.all(normalize_pixels(img).pixels == 0)


def test_minmax_endpoints():
    img = BandImage(np.array([[0.0, 10.0], [0.0, 10.0]]), "r", "c")
    out = normalize_pixels(img, "global_minmax").pixels
    assert set(out.ravel().tolist()) == {0.0, 1.0}


def test_zscore_random_image():
    img = BandImage(np.random.default_rng(1).normal(3, 7, (32, 32)), "i", "c")
    out = normalize_pixels(img).pixels.astype(np.float64)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1) < 1e-5


def test_rejects_nonfinite_and_unknown_scheme():
    bad = BandImage(np.array([[np.inf, 0.0], [0.0, 0.0]]), "u", "c")
    with pytest.raises(ValueError):
        normalize_pixels(bad)
    with pytest.raises(ValueError):
        normalize_pixels(BandImage(np.zeros((2, 2)), "u", "c"), "nope")


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(-1e4, 1e4)))
def test_zscore_idempotent(px):
    img = BandImage(px, "z", "c")
    once = normalize_pixels(img)
    if np.all(once.pixels == 0):
        return
    twice = normalize_pixels(once)
    np.testing.assert_allclose(twice.pixels, once.pixels, atol=1e-5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-1e6, 1e6)))
def test_minmax_range(px):
    out = normalize_pixels(BandImage(px, "u", "c"), "global_minmax").pixels
    assert out.min() >= 0 and out.max() <= 1


def test_normalize_observation_preserves_metadata():
    obs = make_observation("c9", np.random.default_rng(2).normal(size=(5, 8, 8)), 4.0, redshift=0.3)
    out = normalize_observation(obs)
    assert out.cluster_id == "c9" and out.richness == 4.0 and out.redshift == 0.3
    assert validate_observation(out) == []
