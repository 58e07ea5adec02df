"""Sliding-patch occlusion maps for the band-classification network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core_types import BandImage, BandLabel


@dataclass(frozen=True)
class OcclusionConfig:
    patch_size: int = 16
    stride: int = 8
    fill: str = "dataset_mean"
    target: str = "true_class"

    def check(self, side: int) -> None:
        if not 1 <= self.stride <= self.patch_size <= side:
            raise ValueError(
                f"need 1 <= stride ({self.stride}) <= patch_size ({self.patch_size}) <= side ({side})"
            )
        if self.fill not in ("zero", "dataset_mean"):
            raise ValueError(f"unknown fill {self.fill!r}")
        if self.target != "true_class":
            raise ValueError(f"unknown target {self.target!r}")


@dataclass(frozen=True)
class OcclusionMap:
    grid: np.ndarray
    patch_size: int
    stride: int
    base_probability: float
    fill_value: float = 0.0

    def cell_window(self, row: int, col: int) -> tuple[slice, slice]:
        y0, x0 = row * self.stride, col * self.stride
        return slice(y0, y0 + self.patch_size), slice(x0, x0 + self.patch_size)

    def cells_covering(self, x: float, y: float) -> list[tuple[int, int]]:
        """Grid cells whose patch contains pixel position (x, y)."""
        px, py = int(round(x)), int(round(y))
        rows = [r for r in range(self.grid.shape[0]) if r * self.stride <= py < r * self.stride + self.patch_size]
        cols = [c for c in range(self.grid.shape[1]) if c * self.stride <= px < c * self.stride + self.patch_size]
        return [(r, c) for r in rows for c in cols]


def grid_shape(side: int, patch_size: int, stride: int) -> tuple[int, int]:
    n = (side - patch_size) // stride + 1
    return n, n


def dataset_mean_value(images) -> float:
    """Mean pixel value over a collection of (normalised) 2-D images."""
    total, count = 0.0, 0
    for img in images:
        px = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
        total += px.sum()
        count += px.size
    return total / count


@torch.no_grad()
def occlusion_map(
    model,
    img: BandImage,
    true_band: BandLabel | str | int,
    cfg: OcclusionConfig = OcclusionConfig(),
    fill_value: float | None = None,
    batch_size: int = 128,
) -> OcclusionMap:
    """Correct-class softmax probability with each stride-grid patch replaced by the fill value.

    ``model`` is a BandSSLModel (or any module mapping (N, 1, H, W) images to
    logits via ``pretext_logits``). ``fill_value`` is required for the
    ``dataset_mean`` fill.
    """
    px = np.asarray(img.pixels, dtype=np.float32)
    side = px.shape[0]
    if px.shape != (side, side):
        raise ValueError(f"expected a square image, got {px.shape}")
    cfg.check(side)
    if getattr(model, "pretext_head", True) is None:
        raise ValueError("model has no pretext head")
    if cfg.fill == "zero":
        fill = 0.0
    elif fill_value is None:
        raise ValueError("dataset_mean fill needs fill_value (see dataset_mean_value)")
    else:
        fill = float(fill_value)
    target = BandLabel.coerce(true_band).class_index
    logits_fn = getattr(model, "pretext_logits", model)
    was_training = model.training
    model.eval()

    rows, cols = grid_shape(side, cfg.patch_size, cfg.stride)
    base = torch.from_numpy(px.copy())[None, None]
    first = logits_fn(base)
    if first.shape[-1] <= target:
        raise ValueError(f"model emits {first.shape[-1]} classes, cannot score class {target}")
    base_p = float(torch.softmax(first, 1)[0, target])

    positions = [(r, c) for r in range(rows) for c in range(cols)]
    grid = np.empty((rows, cols), dtype=np.float64)
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        batch = base.repeat(len(chunk), 1, 1, 1)
        for k, (r, c) in enumerate(chunk):
            y0, x0 = r * cfg.stride, c * cfg.stride
            batch[k, 0, y0:y0 + cfg.patch_size, x0:x0 + cfg.patch_size] = fill
        probs = torch.softmax(logits_fn(batch), 1)[:, target].numpy()
        for (r, c), p in zip(chunk, probs):
            grid[r, c] = p
    model.train(was_training)
    return OcclusionMap(np.clip(grid, 0.0, 1.0), cfg.patch_size, cfg.stride, base_p, fill)


def marker_saliency_score(omap: OcclusionMap, positions) -> float:
    """Mean probability drop over the cells whose patch covers each position."""
    positions = list(positions)
    if not positions:
        raise ValueError("positions must be non-empty")
    side = (omap.grid.shape[0] - 1) * omap.stride + omap.patch_size
    drops = []
    for x, y in positions:
        if not (0 <= x < side + 0.5 and 0 <= y < side + 0.5):
            raise ValueError(f"position ({x}, {y}) outside the {side}px image")
        cells = omap.cells_covering(x, y)
        if not cells:
            continue
        drops.extend(omap.base_probability - omap.grid[r, c] for r, c in cells)
    if not drops:
        raise ValueError("no grid cell covers any of the positions")
    return float(np.mean(drops))


def save_map(omap: OcclusionMap, path) -> Path:
    """``<path>.npy`` grid plus ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), omap.grid)
    meta = {k: v for k, v in asdict(omap).items() if k != "grid"}
    meta["format_version"] = 1
    meta["grid_shape"] = list(omap.grid.shape)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path.with_suffix(".npy")


def load_map(path) -> OcclusionMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = np.load(path.with_suffix(".npy"))
    return OcclusionMap(grid, meta["patch_size"], meta["stride"], meta["base_probability"], meta["fill_value"])


def upsample_map(omap: OcclusionMap, side: int) -> np.ndarray:
    """Per-pixel mean of the cells covering each pixel (for display)."""
    acc = np.zeros((side, side))
    cnt = np.zeros((side, side))
    for r in range(omap.grid.shape[0]):
        for c in range(omap.grid.shape[1]):
            win = omap.cell_window(r, c)
            acc[win] += omap.grid[r, c]
            cnt[win] += 1
    return np.where(cnt > 0, acc / np.maximum(cnt, 1), np.nan)


@dataclass(frozen=True)
class Overlay:
    path: Path
    n_markers: int


def render_overlay(omap: OcclusionMap, img: BandImage, members, stars, out_path) -> Overlay:
    """Image beside its occlusion map; on the map, blue dots mark members and red circles stars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    px = np.asarray(img.pixels)
    side = px.shape[0]
    members, stars = list(members), list(stars)
    for x, y in members + stars:
        if not (0 <= x < side and 0 <= y < side):
            raise ValueError(f"marker ({x}, {y}) outside the {side}px image")
    out_path = Path(out_path)
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 4))
    left.imshow(px, cmap="gray", origin="upper")
    left.set_title(f"{img.cluster_id} [{img.band.value}]")
    heat = right.imshow(upsample_map(omap, side), cmap="viridis", vmin=0, vmax=1, origin="upper")
    fig.colorbar(heat, ax=right, fraction=0.046)
    right.set_title(f"p(correct), base={omap.base_probability:.3f}")
    n_markers = 0
    if members:
        mx, my = zip(*members)
        n_markers += len(right.scatter(mx, my, s=10, c="tab:blue", label="member galaxy").get_offsets())
    if stars:
        sx, sy = zip(*stars)
        n_markers += len(right.scatter(sx, sy, s=90, facecolors="none", edgecolors="tab:red",
                                       label="foreground star").get_offsets())
    for ax in (left, right):
        ax.set_xticks([])
        ax.set_yticks([])
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, dpi=100)
    finally:
        plt.close(fig)
    return Overlay(out_path, n_markers)
