"""From survey mosaics to training-ready observations.

    python demos/ingest_fits.py [work_dir]

Fakes one u/g/r/i/z mosaic per cluster with a TAN WCS, writes a two-row
catalog, and cuts a 1 Mpc box around each cluster at its redshift.
A real run swaps in downloaded frames with the same file naming.
"""

import sys
from pathlib import Path

import numpy as np
from astropy.io import fits
from astropy.wcs import WCS

from bandssl.core_types import CANONICAL_BANDS
from bandssl.ingest import FitsImageSource, assemble_observation, cutout_extent_pixels, load_catalog
from bandssl.synthsky import read_dataset, write_dataset

work = Path(sys.argv[1] if len(sys.argv) > 1 else "ingest_demo")
frames = work / "frames"
frames.mkdir(parents=True, exist_ok=True)

catalog = work / "clusters.csv"
catalog.write_text("id,ra,dec,z,lambda\nA,150.10,2.20,0.35,42.0\nB,150.12,2.21,0.60,27.5\n")

rng = np.random.default_rng(0)
for entry in load_catalog(catalog):
    wcs = WCS(naxis=2)
    wcs.wcs.ctype = ["RA---TAN", "DEC--TAN"]
    wcs.wcs.crval = entry.center
    wcs.wcs.crpix = [1000.5, 1000.5]
    wcs.wcs.cdelt = [-0.396 / 3600, 0.396 / 3600]  # 0.396 arcsec pixels
    for band in CANONICAL_BANDS:
        data = rng.normal(0, 1, (2000, 2000)).astype(np.float32)
        fits.PrimaryHDU(data, header=wcs.to_header()).writeto(
            frames / f"{entry.cluster_id}_{band.value}.fits", overwrite=True)

source = FitsImageSource(frames)
observations = []
for entry in load_catalog(catalog):
    px = cutout_extent_pixels(entry.redshift, 0.396)
    obs = assemble_observation(entry, source, side=224)
    observations.append(obs)
    print(f"{entry.cluster_id}: z={entry.redshift}, 1 Mpc = {px} px, stack {obs.stacked().shape}")

root = write_dataset(observations, work / "dataset")
print(f"wrote {len(read_dataset(root))} observations to {root}; point data.path here")
