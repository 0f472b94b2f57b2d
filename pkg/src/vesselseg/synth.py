"""Synthetic tube volumes and noisy probability maps.

Used by the smoke-training profile, the post-processing benchmark, and the
test suite; shapes mimic anisotropic microscopy stacks (z coarse, y-x fine).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def tube_stack(
    shape=(8, 160, 160),
    n_tubes: int = 6,
    radius=(2.5, 5.0),
    z_aniso: float = 4.0,
    contrast: float = 0.75,
    background: float = 0.12,
    peak_counts: float = 80.0,
    seed: int = 0,
):
    """Random bright tubes in a dark volume plus photon-style noise.

    Returns (image float32 in [0, 1], labels uint8 0/1).  Tubes are straight
    cylinders around random lines; the z axis is stretched by ``z_aniso`` so
    tubes stay plausibly in-plane like real coarse-sectioned stacks.
    """
    rng = np.random.default_rng(seed)
    nz, ny, nx = shape
    zz, yy, xx = np.mgrid[0:nz, 0:ny, 0:nx].astype(np.float64)
    zz *= z_aniso
    mask = np.zeros(shape, dtype=bool)
    for _ in range(n_tubes):
        p0 = np.array(
            [rng.uniform(0, nz * z_aniso), rng.uniform(0, ny), rng.uniform(0, nx)]
        )
        v = rng.standard_normal(3)
        v[0] *= 0.15  # mostly in-plane
        v /= np.linalg.norm(v)
        r = rng.uniform(*radius)
        dz, dy, dx = zz - p0[0], yy - p0[1], xx - p0[2]
        t = dz * v[0] + dy * v[1] + dx * v[2]
        d2 = (dz - t * v[0]) ** 2 + (dy - t * v[1]) ** 2 + (dx - t * v[2]) ** 2
        mask |= d2 < r * r
    labels = mask.astype(np.uint8)
    clean = background + contrast * ndimage.gaussian_filter(
        mask.astype(np.float64), sigma=(0.4, 1.0, 1.0)
    )
    noisy = rng.poisson(np.clip(clean, 0, None) * peak_counts) / peak_counts
    return np.clip(noisy, 0.0, 1.0).astype(np.float32), labels


def noisy_prob_map(labels: np.ndarray, rng: np.random.Generator,
                   blur: float = 1.0, noise: float = 0.18, flip_frac: float = 0.03):
    """Corrupt a binary slice into a plausible raw network output.

    Blurred labels + additive noise + a sprinkle of confidently flipped
    pixels, clipped to [0.02, 0.98].
    """
    p = ndimage.gaussian_filter(labels.astype(np.float64), blur)
    p = 0.08 + 0.84 * p
    p += rng.normal(0.0, noise, size=p.shape)
    n_flip = int(flip_frac * p.size)
    if n_flip:
        idx = rng.choice(p.size, size=n_flip, replace=False)
        flat = p.ravel()
        flat[idx] = 1.0 - flat[idx]
    return np.clip(p, 0.02, 0.98)


def banded_slice(shape=(128, 128), freq=(0.0, 0.25), amplitude=0.3, seed=0):
    """A smooth test slice plus a pure sinusoidal banding component.

    ``freq`` is the (fy, fx) banding frequency in cycles/pixel.  Returns
    (slice, clean slice) so tests can measure the injected band.
    """
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.random(shape), 6.0)
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    band = amplitude * np.cos(2 * np.pi * (freq[0] * yy + freq[1] * xx))
    return base + band, base
