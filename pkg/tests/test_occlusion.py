import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from bandssl.core_types import BandImage
from bandssl.model import ModelConfig, build_model
from bandssl.occlusion import (
    OcclusionConfig,
    OcclusionMap,
    dataset_mean_value,
    grid_shape,
    load_map,
    marker_saliency_score,
    occlusion_map,
    render_overlay,
    save_map,
    upsample_map,
)


class CornerProbe(torch.nn.Module):
    """Cheap 5-class stand-in whose logits depend on the mean of the top-left 8x8 block."""

    def forward(self, x):
        m = x[:, 0, :8, :8].mean(dim=(1, 2))
        return torch.stack([m, -m, 0 * m, 0 * m, 0 * m], 1)


@given(st.integers(1, 256).flatmap(
    lambda side: st.integers(1, side).flatmap(
        lambda patch: st.tuples(st.just(side), st.just(patch), st.integers(1, patch)))))
@settings(max_examples=200, deadline=None)
def test_grid_shape_counts_positions(triple):
    side, patch, stride = triple
    n = len(range(0, side - patch + 1, stride))
    assert grid_shape(side, patch, stride) == (n, n)
    assert n * stride + patch > side  # the next position would overrun


def test_full_size_grid_is_27():
    img = BandImage(np.random.default_rng(0).normal(size=(224, 224)), "u", "c")
    omap = occlusion_map(CornerProbe(), img, "u", OcclusionConfig(16, 8, "zero"))
    assert omap.grid.shape == (27, 27)
    assert np.all((omap.grid >= 0) & (omap.grid <= 1))


def test_whole_image_patch_gives_single_cell():
    img = BandImage(np.random.default_rng(0).normal(size=(32, 32)), "u", "c")
    omap = occlusion_map(CornerProbe(), img, "u", OcclusionConfig(32, 32, "zero"))
    assert omap.grid.shape == (1, 1)
    # fully zeroed image -> logits all zero -> uniform softmax
    assert omap.grid[0, 0] == pytest.approx(0.2)


def test_only_cells_touching_the_probe_region_change():
    img = BandImage(np.full((32, 32), 2.0), "u", "c")
    omap = occlusion_map(CornerProbe(), img, "u", OcclusionConfig(4, 4, "zero"))
    changed = np.argwhere(np.abs(omap.grid - omap.base_probability) > 1e-9)
    assert {tuple(c) for c in changed} == {(r, c) for r in range(2) for c in range(2)}
    assert marker_saliency_score(omap, [(20, 20)]) == 0.0
    assert marker_saliency_score(omap, [(1, 1)]) > 0.1


@pytest.fixture(scope="module")
def net():
    return build_model(ModelConfig(), with_regression=False).eval()


def test_fill_equal_patch_is_noop(net):
    px = np.random.default_rng(1).normal(size=(32, 32)).astype(np.float32)
    fill = 0.375
    px[:8, :8] = fill
    omap = occlusion_map(net, BandImage(px, "g", "c"), "g", OcclusionConfig(8, 8, "dataset_mean"), fill_value=fill)
    assert abs(omap.grid[0, 0] - omap.base_probability) < 1e-6


def test_determinism_and_mode_restore(net):
    img = BandImage(np.random.default_rng(2).normal(size=(32, 32)), "r", "c")
    cfg = OcclusionConfig(8, 4, "dataset_mean")
    net.train()
    a = occlusion_map(net, img, "r", cfg, fill_value=0.0)
    assert net.training
    b = occlusion_map(net, img, "r", cfg, fill_value=0.0)
    np.testing.assert_array_equal(a.grid, b.grid)
    c = occlusion_map(net, img, "r", cfg, fill_value=0.0, batch_size=5)
    np.testing.assert_allclose(a.grid, c.grid, atol=1e-6)
    assert a.grid.shape == grid_shape(32, 8, 4) == (7, 7)
    net.eval()


def test_config_errors(net):
    img = BandImage(np.zeros((32, 32)), "r", "c")
    for cfg in (OcclusionConfig(8, 9), OcclusionConfig(40, 8), OcclusionConfig(8, 0), OcclusionConfig(8, 4, "noise")):
        with pytest.raises(ValueError):
            occlusion_map(net, img, "r", cfg, fill_value=0.0)
    with pytest.raises(ValueError, match="fill_value"):
        occlusion_map(net, img, "r", OcclusionConfig(8, 8, "dataset_mean"))
    headless = CornerProbe()
    headless.pretext_head = None
    with pytest.raises(ValueError, match="pretext head"):
        occlusion_map(headless, img, "r", OcclusionConfig(8, 8, "zero"))


def test_marker_score_errors():
    omap = OcclusionMap(np.full((3, 3), 0.5), 8, 4, 0.5)
    with pytest.raises(ValueError):
        marker_saliency_score(omap, [])
    with pytest.raises(ValueError):
        marker_saliency_score(omap, [(100, 1)])
    assert marker_saliency_score(omap, [(5, 5), (10, 2)]) == 0.0


def test_dataset_mean_value():
    imgs = [np.ones((2, 2)), BandImage(np.zeros((2, 2)), "u", "c"), np.full((4, 4), 3.0)]
    assert dataset_mean_value(imgs) == pytest.approx((4 + 0 + 48) / 24)


def test_save_load_roundtrip(tmp_path):
    omap = OcclusionMap(np.random.default_rng(0).random((5, 5)), 8, 4, 0.93, 0.12)
    save_map(omap, tmp_path / "m")
    back = load_map(tmp_path / "m.npy")
    np.testing.assert_array_equal(back.grid, omap.grid)
    assert (back.patch_size, back.stride, back.base_probability, back.fill_value) == (8, 4, 0.93, 0.12)
    assert '"fill_value"' in (tmp_path / "m.json").read_text()


def test_upsample_map_covers_image():
    omap = OcclusionMap(np.arange(9.0).reshape(3, 3) / 9, 8, 4, 1.0)
    up = upsample_map(omap, 16)
    assert up.shape == (16, 16) and not np.isnan(up).any()
    assert up[0, 0] == omap.grid[0, 0]


@pytest.mark.parametrize("members,stars", [([], []), ([(3, 4), (10, 10), (20, 5)], [(1, 30), (28, 2)])])
def test_render_overlay(tmp_path, members, stars):
    omap = OcclusionMap(np.random.default_rng(0).random((7, 7)), 8, 4, 0.8)
    img = BandImage(np.random.default_rng(0).normal(size=(32, 32)), "i", "c1")
    out = render_overlay(omap, img, members, stars, tmp_path / "o.png")
    assert out.n_markers == len(members) + len(stars)
    with Image.open(out.path) as im:
        im.verify()
    with pytest.raises(ValueError):
        render_overlay(omap, img, [(40, 1)], [], tmp_path / "bad.png")


def test_render_overlay_unwritable(tmp_path):
    (tmp_path / "f").write_text("")
    omap = OcclusionMap(np.zeros((1, 1)), 32, 32, 0.5)
    with pytest.raises(OSError):
        render_overlay(omap, BandImage(np.zeros((32, 32)), "u", "c"), [], [], tmp_path / "f" / "x.png")
