"""Survey ingestion: cluster catalogs, 1 Mpc cutouts, observation assembly."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

import numpy as np
from scipy import integrate, ndimage

from .core_types import (
    CANONICAL_BANDS,
    DEFAULT_SIDE,
    BandLabel,
    ClusterObservation,
    make_observation,
    validate_observation,
)

log = logging.getLogger(__name__)

SPEED_OF_LIGHT_KMS = 299792.458
ARCSEC_PER_RAD = 180.0 / np.pi * 3600.0
SDSS_PIXEL_SCALE = 0.396  # arcsec / px
MAX_REDSHIFT = 1.5
REQUIRED_COLUMNS = ("id", "ra", "dec", "z", "lambda")


class CatalogError(ValueError):
    pass


class MissingBandError(FileNotFoundError):
    def __init__(self, cluster_id, band: BandLabel, path=None):
        self.band = band
        super().__init__(f"cluster {cluster_id}: missing band {band.value}" + (f" ({path})" if path else ""))


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class CosmologyParams:
    """Flat Lambda-CDM."""

    H0: float = 70.0
    Om0: float = 0.3

    @property
    def hubble_distance(self) -> float:
        return SPEED_OF_LIGHT_KMS / self.H0  # Mpc

    def efunc(self, z):
        return np.sqrt(self.Om0 * (1 + z) ** 3 + (1 - self.Om0))


def comoving_distance(z: float, cosmo: CosmologyParams = CosmologyParams()) -> float:
    val, _ = integrate.quad(lambda x: 1.0 / cosmo.efunc(x), 0.0, z, epsrel=1e-8, epsabs=0)
    return cosmo.hubble_distance * val


def angular_diameter_distance(z: float, cosmo: CosmologyParams = CosmologyParams()) -> float:
    return comoving_distance(z, cosmo) / (1 + z)


def cutout_extent_pixels(
    z: float,
    pixel_scale: float = SDSS_PIXEL_SCALE,
    cosmology: CosmologyParams = CosmologyParams(),
    physical_size_mpc: float = 1.0,
) -> int:
    """Side length in pixels subtending ``physical_size_mpc`` at redshift ``z``."""
    if not z > 0:
        raise ValueError(f"redshift must be > 0, got {z}")
    if z > MAX_REDSHIFT:
        raise ValueError(f"redshift {z} beyond supported range (0, {MAX_REDSHIFT}]")
    theta = physical_size_mpc / angular_diameter_distance(z, cosmology) * ARCSEC_PER_RAD
    return int(round(theta / pixel_scale))


@dataclass(frozen=True)
class CatalogEntry:
    cluster_id: Hashable
    center: tuple[float, float]
    redshift: float
    richness: float
    member_positions: tuple[tuple[float, float], ...] = ()

    def violations(self) -> list[str]:
        ra, dec = self.center
        out = []
        if not 0 <= ra < 360:
            out.append(f"RA {ra} outside [0, 360)")
        if not -90 <= dec <= 90:
            out.append(f"Dec {dec} outside [-90, 90]")
        if not self.redshift >= 0:
            out.append(f"redshift {self.redshift} < 0")
        if not self.richness >= 0:
            out.append(f"richness {self.richness} < 0")
        return out


def _read_rows(path: Path) -> list[dict]:
    if path.suffix.lower() in (".fits", ".fit", ".fz"):
        from astropy.table import Table

        table = Table.read(path)
        cols = [c.lower() for c in table.colnames]
        return [dict(zip(cols, (row[c] for c in table.colnames))) for row in table]
    text = path.read_text()
    if not text.strip():
        return []
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    dialect = csv.Sniffer().sniff(lines[0], delimiters=",\t; ")
    reader = csv.DictReader(lines, dialect=dialect, skipinitialspace=True)
    return [{k.strip().lower(): v for k, v in row.items()} for row in reader]


def load_catalog(path) -> list[CatalogEntry]:
    """Parse a cluster catalog with columns id, ra, dec, z, lambda.

    Rows breaking an entry invariant are skipped with a logged warning.
    """
    path = Path(path)
    try:
        rows = _read_rows(path)
    except OSError as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc
    if not rows:
        log.warning("catalog %s is empty", path)
        return []
    missing = [c for c in REQUIRED_COLUMNS if c not in rows[0]]
    if missing:
        raise CatalogError(f"catalog {path} missing columns: {', '.join(missing)}")
    entries = []
    for lineno, row in enumerate(rows, start=1):
        try:
            entry = CatalogEntry(
                cluster_id=str(row["id"]).strip(),
                center=(float(row["ra"]), float(row["dec"])),
                redshift=float(row["z"]),
                richness=float(row["lambda"]),
            )
        except (TypeError, ValueError) as exc:
            log.warning("catalog row %d skipped: %s", lineno, exc)
            continue
        problems = entry.violations()
        if problems:
            log.warning("catalog row %d (%s) skipped: %s", lineno, entry.cluster_id, "; ".join(problems))
            continue
        entries.append(entry)
    return entries


class FitsImageSource:
    """Band images staged as ``<root>/<cluster_id>_<band>.fits`` with a celestial WCS."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, cluster_id, band: BandLabel) -> Path:
        return self.root / f"{cluster_id}_{band.value}.fits"

    def load(self, cluster_id, band: BandLabel):
        from astropy.io import fits

        p = self.path(cluster_id, band)
        if not p.exists():
            raise MissingBandError(cluster_id, band, p)
        with fits.open(p) as hdul:
            return np.asarray(hdul[0].data, dtype=np.float64), hdul[0].header.copy()


def extract_cutout(data: np.ndarray, cx: float, cy: float, extent: int, side: int) -> np.ndarray:
    """Bilinear resample of the ``extent``-pixel box centred on (cx, cy) to ``side`` pixels.

    Raises CoverageError instead of padding when the box leaves the image.
    """
    half = extent / 2.0
    x0, y0 = cx - half, cy - half
    h, w = data.shape
    # pixel k spans [k-0.5, k+0.5]; the whole box must lie on the image
    if x0 < -0.5 or y0 < -0.5 or cx + half > w - 0.5 or cy + half > h - 0.5:
        raise CoverageError(
            f"insufficient coverage: box of {extent}px at ({cx:.1f}, {cy:.1f}) exceeds {w}x{h} image"
        )
    step = extent / side
    grid = x0 + (np.arange(side) + 0.5) * step
    gy = y0 + (np.arange(side) + 0.5) * step
    yy, xx = np.meshgrid(gy, grid, indexing="ij")
    return ndimage.map_coordinates(data, [yy, xx], order=1, mode="nearest")


def assemble_observation(
    entry: CatalogEntry,
    image_source,
    side: int = DEFAULT_SIDE,
    pixel_scale: float | None = None,
    cosmology: CosmologyParams = CosmologyParams(),
) -> ClusterObservation:
    from astropy.wcs import WCS
    from astropy.wcs.utils import proj_plane_pixel_scales

    if not isinstance(image_source, FitsImageSource):
        image_source = FitsImageSource(image_source)
    # all bands must be present before anything is cut
    for band in CANONICAL_BANDS:
        if not image_source.path(entry.cluster_id, band).exists():
            raise MissingBandError(entry.cluster_id, band, image_source.path(entry.cluster_id, band))
    stack = []
    for band in CANONICAL_BANDS:
        data, header = image_source.load(entry.cluster_id, band)
        wcs = WCS(header, naxis=2)
        scale = pixel_scale
        if scale is None:
            scale = float(np.mean(proj_plane_pixel_scales(wcs))) * 3600.0
        extent = cutout_extent_pixels(entry.redshift, scale, cosmology)
        cx, cy = wcs.all_world2pix([[entry.center[0], entry.center[1]]], 0)[0]
        try:
            stack.append(extract_cutout(data, cx, cy, extent, side))
        except CoverageError as exc:
            raise CoverageError(f"cluster {entry.cluster_id} band {band.value}: {exc}") from None
    obs = make_observation(
        entry.cluster_id, stack, entry.richness, redshift=entry.redshift, center=entry.center
    )
    problems = validate_observation(obs, side)
    if problems:
        raise ValueError(f"cluster {entry.cluster_id}: {'; '.join(problems)}")
    return obs
