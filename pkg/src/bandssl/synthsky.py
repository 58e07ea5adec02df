"""Synthetic five-band cluster fields with exactly known richness.

Member galaxies are elliptical Gaussian blobs scattered around the field
centre; foreground stars are point sources placed uniformly. Every source is
convolved with a band-specific Gaussian PSF and scaled by a band-specific
flux ratio, which is what makes the band of an image recoverable from its
pixels. The stored richness is the number of injected member galaxies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_types import CANONICAL_BANDS, BandLabel, ClusterObservation, SourceTruth, make_observation

# roughly seeing-limited: PSF narrows toward the red
DEFAULT_PSF = {"u": 3.0, "g": 2.2, "r": 1.6, "i": 1.15, "z": 0.8}
# red-sequence members are faint in u and bright in i/z
DEFAULT_GALAXY_FLUX = {"u": 0.25, "g": 0.6, "r": 1.0, "i": 1.3, "z": 1.5}
DEFAULT_STAR_FLUX = {"u": 0.9, "g": 1.1, "r": 1.0, "i": 0.9, "z": 0.8}


@dataclass(frozen=True)
class SynthConfig:
    image_side: int = 224
    richness_range: tuple[float, float] = (1, 50)
    n_foreground_stars: tuple[int, int] = (2, 8)
    psf_sigma_per_band: dict = field(default_factory=lambda: dict(DEFAULT_PSF))
    band_flux_ratios: dict = field(default_factory=lambda: dict(DEFAULT_GALAXY_FLUX))
    star_flux_ratios: dict = field(default_factory=lambda: dict(DEFAULT_STAR_FLUX))
    noise_sigma: float = 1.0
    background: float = 0.0
    seed: int = 0
    galaxy_flux_range: tuple[float, float] = (60.0, 300.0)
    star_flux_range: tuple[float, float] = (80.0, 600.0)
    galaxy_size_range: tuple[float, float] = (0.8, 2.0)
    core_radius_frac: float = 0.12
    max_density: float = 1 / 50  # galaxies per pixel^2
    id_prefix: str = "syn"

    def __post_init__(self):
        for name in ("psf_sigma_per_band", "band_flux_ratios", "star_flux_ratios"):
            table = {BandLabel.coerce(k).value: float(v) for k, v in dict(getattr(self, name)).items()}
            if set(table) != {b.value for b in CANONICAL_BANDS}:
                raise ValueError(f"{name} must have exactly the bands u,g,r,i,z")
            if min(table.values()) <= 0:
                raise ValueError(f"{name} values must be strictly positive")
            object.__setattr__(self, name, table)
        if len(set(self.psf_sigma_per_band.values())) != len(CANONICAL_BANDS):
            raise ValueError("psf_sigma_per_band values must be pairwise distinct")
        lo, hi = self.richness_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad richness_range {self.richness_range}")
        cap = self.max_density * self.image_side**2
        if hi > cap:
            raise ValueError(
                f"richness {hi} exceeds the density cap of {cap:.1f} galaxies "
                f"for a {self.image_side}px field"
            )
        s_lo, s_hi = self.n_foreground_stars
        if not 0 <= s_lo <= s_hi:
            raise ValueError(f"bad n_foreground_stars {self.n_foreground_stars}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _render(side: int, sources: list[tuple], background: float) -> np.ndarray:
    """Sum of normalised 2-D Gaussians given as (x, y, flux, cxx, cxy, cyy)."""
    img = np.full((side, side), background, dtype=np.float64)
    if not sources:
        return img
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for x0, y0, flux, cxx, cxy, cyy in sources:
        det = cxx * cyy - cxy * cxy
        dx, dy = xx - x0, yy - y0
        q = (cyy * dx * dx - 2 * cxy * dx * dy + cxx * dy * dy) / det
        img += flux / (2 * np.pi * np.sqrt(det)) * np.exp(-0.5 * q)
    return img


def _member_positions(rng: np.random.Generator, n: int, side: int, core: float) -> np.ndarray:
    pos = np.empty((n, 2))
    centre = (side - 1) / 2
    filled = 0
    while filled < n:
        cand = rng.normal(centre, core, size=(n - filled, 2))
        cand = cand[np.all((cand >= 1) & (cand <= side - 2), axis=1)]
        pos[filled:filled + len(cand)] = cand
        filled += len(cand)
    return pos


def generate_observation(
    cfg: SynthConfig,
    rng: np.random.Generator | int | None = None,
    cluster_id: str | None = None,
    richness: int | None = None,
) -> ClusterObservation:
    rng = np.random.default_rng(rng)
    side = cfg.image_side
    if richness is None:
        lo, hi = cfg.richness_range
        richness = int(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1))
    n_stars = int(rng.integers(cfg.n_foreground_stars[0], cfg.n_foreground_stars[1] + 1))

    members = _member_positions(rng, richness, side, cfg.core_radius_frac * side)
    g_flux = np.exp(rng.uniform(*np.log(cfg.galaxy_flux_range), size=richness))
    g_size = rng.uniform(*cfg.galaxy_size_range, size=richness)
    g_axis = rng.uniform(0.4, 1.0, size=richness)
    g_angle = rng.uniform(0, np.pi, size=richness)

    stars = rng.uniform(1, side - 2, size=(n_stars, 2))
    s_flux = np.exp(rng.uniform(*np.log(cfg.star_flux_range), size=n_stars))

    # intrinsic galaxy covariances, shared by all bands
    cos, sin = np.cos(g_angle), np.sin(g_angle)
    major, minor = g_size**2, (g_size * g_axis) ** 2
    cxx = major * cos**2 + minor * sin**2
    cyy = major * sin**2 + minor * cos**2
    cxy = (major - minor) * cos * sin

    stack = []
    for band in CANONICAL_BANDS:
        psf2 = cfg.psf_sigma_per_band[band.value] ** 2
        gratio = cfg.band_flux_ratios[band.value]
        sratio = cfg.star_flux_ratios[band.value]
        sources = [
            (x, y, f * gratio, a + psf2, b, c + psf2)
            for (x, y), f, a, b, c in zip(members, g_flux, cxx, cxy, cyy)
        ]
        sources += [(x, y, f * sratio, psf2, 0.0, psf2) for (x, y), f in zip(stars, s_flux)]
        img = _render(side, sources, cfg.background)
        if cfg.noise_sigma > 0:
            img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        stack.append(img.astype(np.float32))

    truth = SourceTruth(
        members=tuple(map(tuple, members.tolist())),
        stars=tuple(map(tuple, stars.tolist())),
    )
    cid = cluster_id if cluster_id is not None else f"{cfg.id_prefix}"
    return make_observation(cid, stack, float(richness), truth=truth)


def cluster_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for cluster ``index``; order-independent."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_dataset(cfg: SynthConfig, n_clusters: int) -> list[ClusterObservation]:
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    return [
        generate_observation(cfg, cluster_rng(cfg.seed, k), f"{cfg.id_prefix}{k:06d}")
        for k in range(n_clusters)
    ]


def write_dataset(dataset: list[ClusterObservation], root: str | Path) -> Path:
    """One directory per cluster: ``<id>_<band>.fits`` for each band plus ``meta.json``."""
    from astropy.io import fits

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for obs in dataset:
        d = root / str(obs.cluster_id)
        d.mkdir(exist_ok=True)
        for band in CANONICAL_BANDS:
            hdu = fits.PrimaryHDU(np.asarray(obs.images[band].pixels, dtype=np.float32))
            hdu.header["BAND"] = band.value
            hdu.header["CLUSTER"] = str(obs.cluster_id)
            hdu.writeto(d / f"{obs.cluster_id}_{band.value}.fits", overwrite=True)
        meta = {
            "cluster_id": str(obs.cluster_id),
            "richness": obs.richness,
            "redshift": obs.redshift,
            "members": [list(p) for p in (obs.truth.members if obs.truth else ())],
            "stars": [list(p) for p in (obs.truth.stars if obs.truth else ())],
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return root


def read_dataset(root: str | Path) -> list[ClusterObservation]:
    from astropy.io import fits

    out = []
    for d in sorted(p for p in Path(root).iterdir() if (p / "meta.json").exists()):
        meta = json.loads((d / "meta.json").read_text())
        cid = meta["cluster_id"]
        stack = []
        for band in CANONICAL_BANDS:
            with fits.open(d / f"{cid}_{band.value}.fits") as hdul:
                stack.append(np.asarray(hdul[0].data, dtype=np.float32))
        truth = SourceTruth(tuple(map(tuple, meta["members"])), tuple(map(tuple, meta["stars"])))
        out.append(make_observation(cid, stack, meta["richness"], redshift=meta["redshift"], truth=truth))
    return out


# ---------------------------------------------------------------------------
# natural-style RGB scenes for the channel-ordering pretext

_SKY = np.array([0.45, 0.65, 0.95])
_GROUND = np.array([[0.30, 0.50, 0.20], [0.55, 0.45, 0.30], [0.40, 0.55, 0.25]])


def generate_rgb_scenes(n: int, side: int = 32, seed: int = 0) -> np.ndarray:
    """Landscape-like RGB images, shape (n, 3, side, side), values in [0, 1].

    Blue-dominant sky above a green/brown ground, with a few coloured
    blobs; the colour statistics are what make channel order predictable.
    """
    out = np.empty((n, 3, side, side), dtype=np.float32)
    yy, xx = np.mgrid[0:side, 0:side] / side
    for k in range(n):
        rng = cluster_rng(seed, k)
        horizon = rng.uniform(0.3, 0.7) + rng.uniform(-0.1, 0.1) * np.sin(
            2 * np.pi * (xx[0] * rng.uniform(0.5, 2) + rng.uniform())
        )
        sky_mask = yy < horizon[None, :]
        sky = _SKY + rng.normal(0, 0.06, 3)
        ground = _GROUND[rng.integers(len(_GROUND))] + rng.normal(0, 0.06, 3)
        shade = 1 - 0.4 * yy  # sky brightens toward horizon, ground darkens
        img = np.where(sky_mask[None], sky[:, None, None] * (0.8 + 0.3 * yy[None]),
                       ground[:, None, None] * shade[None])
        for _ in range(rng.integers(0, 4)):
            cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.04, 0.15)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
            colour = rng.uniform(0, 1, 3)
            img = img * (1 - blob[None]) + colour[:, None, None] * blob[None]
        img = img + rng.normal(0, 0.03, img.shape)
        out[k] = np.clip(img, 0, 1)
    return out
