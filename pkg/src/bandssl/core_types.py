"""Domain data model: bands, single-band images, cluster observations, split plans."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from types import MappingProxyType
from typing import Hashable, Mapping, Sequence

import numpy as np

DEFAULT_SIDE = 224


class BandLabel(enum.Enum):
    """The five SDSS broad bands, in canonical class order."""

    u = "u"
    g = "g"
    r = "r"
    i = "i"
    z = "z"

    @property
    def class_index(self) -> int:
        return _CLASS_INDEX[self]

    @classmethod
    def from_index(cls, index: int) -> "BandLabel":
        return CANONICAL_BANDS[index]

    @classmethod
    def coerce(cls, value: "BandLabel | str | int") -> "BandLabel":
        if isinstance(value, BandLabel):
            return value
        if isinstance(value, (int, np.integer)):
            return cls.from_index(int(value))
        return cls(str(value))


CANONICAL_BANDS: tuple[BandLabel, ...] = tuple(BandLabel)
_CLASS_INDEX = {band: idx for idx, band in enumerate(CANONICAL_BANDS)}


@dataclass(frozen=True, eq=False)
class BandImage:
    pixels: np.ndarray
    band: BandLabel
    cluster_id: Hashable

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float32, copy=True)
        if pixels.ndim != 2:
            raise ValueError(f"band image must be 2-D, got shape {pixels.shape}")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "band", BandLabel.coerce(self.band))

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> "BandImage":
        return BandImage(pixels, self.band, self.cluster_id)


@dataclass(frozen=True)
class SourceTruth:
    """Pixel positions (x, y) of injected member galaxies and foreground stars."""

    members: tuple[tuple[float, float], ...] = ()
    stars: tuple[tuple[float, float], ...] = ()


@dataclass(frozen=True, eq=False)
class ClusterObservation:
    cluster_id: Hashable
    images: Mapping[BandLabel, BandImage]
    richness: float | None = None
    redshift: float | None = None
    center: tuple[float, float] | None = None
    truth: SourceTruth | None = None

    def __post_init__(self):
        images = {BandLabel.coerce(k): v for k, v in dict(self.images).items()}
        object.__setattr__(self, "images", MappingProxyType(images))

    def stacked(self) -> np.ndarray:
        """Pixels as a (5, H, W) array in canonical band order."""
        missing = [b.value for b in CANONICAL_BANDS if b not in self.images]
        if missing:
            raise KeyError(f"missing band {', '.join(missing)}")
        return np.stack([self.images[b].pixels for b in CANONICAL_BANDS])


@dataclass(frozen=True)
class SplitPlan:
    pretext_train: frozenset
    pretext_test: frozenset
    regression_folds: tuple[frozenset, ...]
    seed: int

    def training_folds(self, fold: int) -> list[frozenset]:
        return [f for k, f in enumerate(self.regression_folds) if k != fold]

    def violations(self) -> list[str]:
        out = []
        if self.pretext_train & self.pretext_test:
            out.append("pretext train/test overlap")
        folds = self.regression_folds
        if len(folds) != 10:
            out.append(f"expected 10 regression folds, got {len(folds)}")
        seen: set = set()
        for k, fold in enumerate(folds):
            if seen & fold:
                out.append(f"fold {k} overlaps an earlier fold")
            seen |= fold
        sizes = [len(f) for f in folds]
        if sizes and max(sizes) - min(sizes) > 1:
            out.append(f"fold sizes differ by more than 1: {sizes}")
        return out


def validate_observation(
    obs: ClusterObservation, side: int | None = None
) -> list[str]:
    """Return every invariant violation of ``obs``; empty when valid.

    ``side`` additionally pins the expected square side length.
    """
    problems: list[str] = []
    for band in CANONICAL_BANDS:
        if band not in obs.images:
            problems.append(f"missing band {band.value}")
    shapes = set()
    for band in CANONICAL_BANDS:
        img = obs.images.get(band)
        if img is None:
            continue
        if img.band is not band:
            problems.append(f"band {band.value} holds an image tagged {img.band.value}")
        if img.cluster_id != obs.cluster_id:
            problems.append(f"cluster_id mismatch in band {band.value}")
        if not np.all(np.isfinite(img.pixels)):
            problems.append(f"non-finite pixel in band {band.value}")
        h, w = img.pixels.shape
        if h != w:
            problems.append(f"band {band.value} is not square ({h}x{w})")
        elif side is not None and h != side:
            problems.append(f"band {band.value} has side {h}, expected {side}")
        shapes.add((h, w))
    if len(shapes) > 1:
        problems.append("bands have differing dimensions")
    if obs.richness is not None and not (np.isfinite(obs.richness) and obs.richness >= 0):
        problems.append(f"richness must be a nonnegative finite number, got {obs.richness}")
    if obs.redshift is not None and not (np.isfinite(obs.redshift) and obs.redshift >= 0):
        problems.append(f"redshift must be nonnegative, got {obs.redshift}")
    return problems


def normalize_pixels(img: BandImage, scheme: str = "per_image_zscore") -> BandImage:
    pixels = img.pixels.astype(np.float64)
    if not np.all(np.isfinite(pixels)):
        raise ValueError(f"non-finite pixel in band {img.band.value}")
    if scheme == "per_image_zscore":
        std = pixels.std()
        if std == 0 or not np.isfinite(std):
            out = np.zeros_like(pixels)
        else:
            out = (pixels - pixels.mean()) / std
    elif scheme == "global_minmax":
        lo, hi = pixels.min(), pixels.max()
        out = np.zeros_like(pixels) if hi == lo else (pixels - lo) / (hi - lo)
    else:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    return img.with_pixels(out)


def normalize_observation(
    obs: ClusterObservation, scheme: str = "per_image_zscore"
) -> ClusterObservation:
    images = {b: normalize_pixels(img, scheme) for b, img in obs.images.items()}
    return ClusterObservation(
        obs.cluster_id, images, obs.richness, obs.redshift, obs.center, obs.truth
    )


def make_observation(
    cluster_id: Hashable,
    stack: np.ndarray | Sequence[np.ndarray],
    richness: float | None = None,
    **kwargs,
) -> ClusterObservation:
    """Build an observation from a (5, H, W) stack in canonical band order."""
    if len(stack) != len(CANONICAL_BANDS):
        raise ValueError(f"expected 5 band images, got {len(stack)}")
    images = {
        band: BandImage(np.asarray(px), band, cluster_id)
        for band, px in zip(CANONICAL_BANDS, stack)
    }
    return ClusterObservation(cluster_id, images, richness, **kwargs)
