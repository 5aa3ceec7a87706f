"""Synthetic two-site brain/tumour phantoms.

Each patient is a stack of slices showing an elliptical "brain" on a dark
background with a tumour made of one to three overlapping ellipses. Tumour
radii follow a smooth bump across the stack so that consecutive slices are
coherent and the tumour area is unimodal in the slice index. Patients differ
in tumour size and contrast, and some carry small bright non-tumour spots
that mimic vessels. The two sites differ in tissue intensity, tumour
contrast and noise level.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError
from .dataset import Dataset, Sample, sample_id
from .labels import zscore_normalize

SITE_PARAMS = {
    "A": {"background_mean": 1.0, "tumour_contrast": 0.8, "noise_sigma": 0.10},
    "B": {"background_mean": 1.3, "tumour_contrast": 0.5, "noise_sigma": 0.18},
}

CONTRAST_RANGE = (0.3, 1.4)  # per-patient multiplier on the site contrast
SPOT_PROBABILITY = 0.5


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _patient_slices(rng, n_slices, h, w, params):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # brain
    bcy = h / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    bcx = w / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    bry = h * rng.uniform(0.36, 0.44)
    brx = w * rng.uniform(0.32, 0.40)
    bang = rng.uniform(-0.3, 0.3)
    fy, fx, phase = rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2), rng.uniform(0, 2 * np.pi)
    field = 0.05 * np.sin(fy * yy + fx * xx + phase)

    # tumour: shared profile across blobs
    n_blobs = int(rng.integers(1, 4))
    peak = rng.uniform(2.5, 6.0)
    rad = rng.uniform(0.0, 0.45)
    theta = rng.uniform(0, 2 * np.pi)
    tcy = bcy + rad * bry * np.sin(theta)
    tcx = bcx + rad * brx * np.cos(theta)
    blobs = []
    for _ in range(n_blobs):
        oy, ox = rng.uniform(-1, 1, size=2) * peak * 0.8
        blobs.append((tcy + oy, tcx + ox, peak * rng.uniform(0.6, 1.0), peak * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi)))
    centre = rng.uniform(0.3, 0.7) * (n_slices - 1)
    extent = rng.uniform(0.5, 0.9) * n_slices
    contrast = params["tumour_contrast"] * rng.uniform(*CONTRAST_RANGE)
    texture_phase = rng.uniform(0, 2 * np.pi)

    spots = []
    if rng.uniform() < SPOT_PROBABILITY:
        for _ in range(int(rng.integers(1, 3))):
            ang = rng.uniform(0, 2 * np.pi)
            r = rng.uniform(0.3, 0.8)
            spots.append((bcy + r * bry * np.sin(ang), bcx + r * brx * np.cos(ang), rng.uniform(0.9, 1.5), int(rng.integers(0, n_slices))))

    images, masks = [], []
    for k in range(n_slices):
        shrink = 1.0 - 0.15 * ((k - (n_slices - 1) / 2) / max(n_slices / 2, 1)) ** 2
        brain = _ellipse(yy, xx, bcy, bcx, bry * shrink, brx * shrink, bang)
        scale = np.sqrt(max(0.0, 1.0 - ((k - centre) / extent) ** 2))
        tumour = np.zeros((h, w), dtype=bool)
        if scale > 0:
            for cy, cx, ry, rx, ang in blobs:
                tumour |= _ellipse(yy, xx, cy, cx, ry * scale, rx * scale, ang)
        tumour &= brain
        masks.append(tumour)
        texture = 1.0 + 0.15 * np.sin(0.9 * yy + 0.7 * xx + texture_phase + 0.5 * k)
        img = np.where(brain, params["background_mean"] + field, 0.0)
        img = img + np.where(tumour, contrast * texture, 0.0)
        for sy, sx, sr, sk in spots:
            if abs(k - sk) <= 1:
                img = img + np.where(_ellipse(yy, xx, sy, sx, sr, sr, 0.0) & brain & ~tumour, contrast, 0.0)
        images.append(img)

    if not any(m.any() for m in masks):
        k = int(round(centre))
        iy, ix = int(np.clip(round(tcy), 0, h - 1)), int(np.clip(round(tcx), 0, w - 1))
        masks[k][iy, ix] = True
        images[k][iy, ix] += contrast
    return images, masks


def generate_phantom_dataset(
    seed: int,
    n_patients: int,
    slices_per_patient: int = 8,
    site: str = "A",
    height: int = 32,
    width: int = 32,
    n_test: int = 0,
    normalize: bool = True,
    site_params: dict | None = None,
) -> Dataset:
    """Deterministic phantom cohort.

    The first ``n_patients - n_test`` patients form the train split, the
    rest the test split. With ``normalize`` each slice is z-scored and rounded
    to float32 precision, matching what the dataset file stores.
    """
    if height % 4 or width % 4 or height <= 0 or width <= 0:
        raise DimensionError(f"phantom size {height}x{width} must be positive multiples of 4")
    if n_patients < 1 or slices_per_patient < 1:
        raise DimensionError("need at least one patient and one slice")
    if not 0 <= n_test <= n_patients:
        raise DimensionError("n_test must lie in [0, n_patients]")
    table = dict(SITE_PARAMS if site_params is None else site_params)
    if site not in table:
        raise DimensionError(f"unknown site {site!r}")
    params = table[site]

    samples, split = [], {}
    for p in range(n_patients):
        pid = f"{site}{p:03d}"
        split[pid] = "train" if p < n_patients - n_test else "test"
        # geometry and noise draws do not depend on the site: same seed, same anatomy
        rng = np.random.default_rng([seed, p])
        images, masks = _patient_slices(rng, slices_per_patient, height, width, params)
        noise = rng.standard_normal((slices_per_patient, height, width))
        for k in range(slices_per_patient):
            img = images[k] + params["noise_sigma"] * noise[k]
            if normalize:
                img = zscore_normalize(img).astype(np.float32).astype(np.float64)
            samples.append(Sample(sample_id(pid, k), pid, site, k, img, masks[k].astype(np.uint8)))

    meta = {
        "H": height,
        "W": width,
        "slices_per_patient": slices_per_patient,
        "sites": [site],
        "seed": seed,
        "site_params": {site: dict(params)},
        "normalized": bool(normalize),
    }
    return Dataset(samples, split, meta)
