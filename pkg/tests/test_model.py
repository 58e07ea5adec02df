import numpy as np
import pytest
import torch

from bandssl.core_types import CANONICAL_BANDS, BandImage, ClusterObservation, make_observation
from bandssl.model import (
    PERMUTATIONS,
    REFERENCE_HEAD_SHAPES,
    FeatureExtractorConfig,
    ModelConfig,
    NonFiniteError,
    RegressionHeadConfig,
    build_feature_extractor,
    build_model,
    build_pretext_head,
    build_regression_head,
    forward_pretext,
    forward_regression,
    inverse_permutation,
    permute_channels,
)
from bandssl.persistence import state_arrays

SMALL_HEAD = RegressionHeadConfig((4, 8), (32, 16))


@pytest.fixture(scope="module")
def extractor():
    return build_feature_extractor(FeatureExtractorConfig(seed=3)).eval()


def test_extractor_output_shape(extractor):
    with torch.no_grad():
        assert extractor(torch.zeros(1, 1, 224, 224)).shape == (1, 512, 7, 7)


def test_extractor_rgb_mode():
    ext = build_feature_extractor(FeatureExtractorConfig(input_channels=3)).eval()
    with torch.no_grad():
        assert ext(torch.zeros(2, 3, 64, 64)).shape == (2, 512, 2, 2)


def test_extractor_batch_independence(extractor):
    x = torch.randn(8, 1, 64, 64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        full = extractor(x)
        solo = torch.cat([extractor(x[k:k + 1]) for k in range(8)])
    torch.testing.assert_close(full, solo, rtol=1e-4, atol=1e-5)


def test_extractor_seed_determinism():
    a = build_feature_extractor(FeatureExtractorConfig(seed=11))
    b = build_feature_extractor(FeatureExtractorConfig(seed=11))
    c = build_feature_extractor(FeatureExtractorConfig(seed=12))
    sa, sb, sc = state_arrays(a), state_arrays(b), state_arrays(c)
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_feature_extractor(FeatureExtractorConfig(seed=5))
    torch.testing.assert_close(torch.rand(3), expected)


def test_extractor_config_validation():
    with pytest.raises(ValueError):
        FeatureExtractorConfig(backbone="vgg16")
    with pytest.raises(ValueError):
        FeatureExtractorConfig(feature_channels=256)


def test_pretext_head_shapes():
    head = build_pretext_head(5).eval()
    with torch.no_grad():
        logits = head(torch.randn(2, 512, 7, 7))
    assert logits.shape == (2, 5)
    probs = torch.softmax(logits.double(), 1).sum(1)
    assert torch.allclose(probs, torch.ones(2, dtype=torch.float64), atol=1e-6)
    assert build_pretext_head(6).n_classes == 6
    with pytest.raises(ValueError):
        build_pretext_head(4)


def test_regression_head_table_s2_shape_chain():
    head = build_regression_head()
    assert head.shape_chain == REFERENCE_HEAD_SHAPES
    shapes = dict(head.shape_chain)
    assert shapes["conv2"] == (510, 5, 16)
    assert shapes["conv3"] == (508, 5, 64)
    assert head.fc1.in_features == 508 * 5 * 64
    head.eval()
    with torch.no_grad():
        assert head(torch.randn(3, 512, 5)).shape == (3,)


def test_regression_head_zero_input():
    head = build_regression_head(SMALL_HEAD).eval()
    with torch.no_grad():
        assert float(head(torch.zeros(1, 512, 5))) == 0.0
    head.set_output_bias(12.5)
    with torch.no_grad():
        assert float(head(torch.zeros(1, 512, 5))) == 12.5


def test_scaled_head_keeps_table_geometry():
    chain = dict(build_regression_head(SMALL_HEAD).shape_chain)
    assert chain["conv2"] == (510, 5, 4) and chain["conv3"] == (508, 5, 8)
    assert chain["fc3"] == (1,)


def _obs(seed=0, side=32):
    return make_observation("c", np.random.default_rng(seed).normal(size=(5, side, side)), 10.0)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(head=SMALL_HEAD)).eval()


def test_forward_pretext(model):
    img = BandImage(np.random.default_rng(0).normal(size=(32, 32)), "g", "c")
    a = forward_pretext(model.extractor, model.pretext_head, img)
    b = forward_pretext(model.extractor, model.pretext_head, img)
    assert a.shape == (5,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        forward_pretext(model.extractor, model.pretext_head, type("I", (), {"pixels": np.zeros((2, 8, 8))})())


def test_forward_regression_ordering_and_purity(model):
    obs = _obs()
    shuffled = ClusterObservation("c", {b: obs.images[b] for b in reversed(CANONICAL_BANDS)}, 10.0)
    twin = make_observation("d", obs.stacked(), 3.0)
    y = forward_regression(model.extractor, model.regression_head, obs)
    assert np.isfinite(y)
    assert forward_regression(model.extractor, model.regression_head, shuffled) == y
    assert forward_regression(model.extractor, model.regression_head, twin) == y


def test_forward_regression_matches_batched_module(model):
    obs = _obs(1)
    batched = model(torch.from_numpy(obs.stacked())[None, :, None])
    assert float(batched.detach()) == pytest.approx(forward_regression(model.extractor, model.regression_head, obs), rel=1e-5)


def test_forward_regression_errors(model):
    obs = _obs()
    partial = ClusterObservation("c", {b: obs.images[b] for b in CANONICAL_BANDS[:4]})
    with pytest.raises(KeyError, match="missing band z"):
        forward_regression(model.extractor, model.regression_head, partial)
    huge = make_observation("c", np.full((5, 32, 32), 3e38, dtype=np.float32))
    with pytest.raises(NonFiniteError):
        forward_regression(model.extractor, model.regression_head, huge)


def test_fused_feature_columns_follow_band_order(model):
    x = torch.randn(2, 5, 1, 32, 32)
    with torch.no_grad():
        fused = model.fused_features(x)
        col2 = model.extractor(x[:, 2]).mean(dim=(2, 3))
    assert fused.shape == (2, 512, 5)
    torch.testing.assert_close(fused[:, :, 2], col2)


def test_permute_channels():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(3, 8, 8))
    out, idx = permute_channels(img, (0, 1, 2))
    assert idx == 0 and np.array_equal(out, img)
    outs = []
    for k, perm in enumerate(PERMUTATIONS):
        out, idx = permute_channels(img, perm)
        assert idx == k
        for c in range(3):
            assert np.array_equal(out[c], img[perm[c]])
        back, _ = permute_channels(out, inverse_permutation(perm))
        assert back.tobytes() == img.tobytes()
        outs.append(out.tobytes())
    assert len(set(outs)) == 6
    assert permute_channels(img, (2, 0, 1))[1] == 4  # lexicographic rank
    with pytest.raises(ValueError):
        permute_channels(img, (0, 0, 1))
    with pytest.raises(ValueError):
        permute_channels(img[:2], (0, 1, 2))


def test_shared_extractor_and_freezing():
    m = build_model(ModelConfig(head=SMALL_HEAD))
    assert m.pretext_head is not None and m.regression_head is not None
    m.freeze_extractor(True)
    m.train()
    assert not m.extractor.training
    assert all(not p.requires_grad for p in m.extractor.parameters())
    m.freeze_extractor(False)
    m.train()
    assert m.extractor.training


def test_gradient_flow_joint_vs_fixed():
    from bandssl.losses_metrics import torch_loss

    x = torch.randn(4, 5, 1, 32, 32, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([3.0, 8.0, 1.0, 12.0])
    m = build_model(ModelConfig(head=SMALL_HEAD)).train()
    torch_loss(y, m(x), 1.0).backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.extractor.parameters())

    m = build_model(ModelConfig(head=SMALL_HEAD))
    m.freeze_extractor(True)
    m.train()
    torch_loss(y, m(x), 1.0).backward()
    assert all(p.grad is None for p in m.extractor.parameters())
