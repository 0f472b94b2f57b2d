"""Intensity preprocessing: variance stabilization, de-banding, normalization.

The stabilization wrapper makes Poisson-dominated photon noise approximately
unit-variance Gaussian so any Gaussian-domain denoiser can be plugged in
between the forward and inverse transforms; a separable Gaussian smoother is
bundled as the placeholder denoiser so the pipeline runs standalone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

_SQRT32 = np.sqrt(3.0 / 2.0)


def anscombe(stack: np.ndarray) -> np.ndarray:
    """Variance-stabilizing transform 2*sqrt(x + 3/8) for photon counts."""
    x = np.asarray(stack, dtype=np.float64)
    if x.min() < 0:
        raise ValueError("stabilization needs nonnegative intensities")
    return 2.0 * np.sqrt(x + 0.375)


def inverse_anscombe(stack: np.ndarray, kind: str = "unbiased") -> np.ndarray:
    """Map stabilized values back to the intensity domain.

    ``algebraic`` is the exact inverse of the forward map; ``unbiased``
    (default) is the closed-form approximation of the exact unbiased inverse,
    which removes the bias E[2*sqrt(P+3/8)] != 2*sqrt(lambda+3/8) that the
    algebraic inverse leaves at low counts.
    """
    y = np.asarray(stack, dtype=np.float64)
    if kind == "algebraic":
        if y.min() < 0:
            raise ValueError("algebraic inverse needs nonnegative inputs")
        return (y / 2.0) ** 2 - 0.375
    if kind == "unbiased":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (
                0.25 * y**2
                + 0.25 * _SQRT32 / y
                - 1.375 / y**2
                + 0.625 * _SQRT32 / y**3
                - 0.125
            )
        return np.where(y > 2.0 * np.sqrt(0.375), np.maximum(out, 0.0), 0.0)
    raise ValueError(f"unknown inverse kind {kind!r}")


@dataclass
class NotchSpec:
    """Frequency-domain notches: (fy, fx) in cycles/pixel plus a radius each.

    Each notch attenuates symmetrically at +f and -f with a smooth Gaussian
    dip (no hard zeroing, to avoid ringing).
    """

    notches: list = field(default_factory=list)  # [(fy, fx, radius), ...]

    def __post_init__(self):
        for fy, fx, r in self.notches:
            if not (-0.5 <= fy < 0.5 and -0.5 <= fx < 0.5):
                raise ValueError(f"notch frequency ({fy}, {fx}) outside [-0.5, 0.5)")
            if r <= 0:
                raise ValueError("notch radius must be positive")

    def response(self, shape) -> np.ndarray:
        """Multiplicative filter gain over the 2-d FFT grid of `shape`."""
        fy = np.fft.fftfreq(shape[0])[:, None]
        fx = np.fft.fftfreq(shape[1])[None, :]
        gain = np.ones(shape)
        for (ny, nx, r) in self.notches:
            for sy, sx in ((ny, nx), (-ny, -nx)):
                d2 = (fy - sy) ** 2 + (fx - sx) ** 2
                gain *= 1.0 - np.exp(-d2 / (2.0 * r * r))
        return gain


def notch_filter(stack: np.ndarray, spec: NotchSpec) -> np.ndarray:
    """Remove periodic banding slice by slice with Gaussian frequency notches."""
    x = np.asarray(stack, dtype=np.float64)
    planar = x.ndim == 2
    if planar:
        x = x[None]
    gain = spec.response(x.shape[1:])
    out = np.empty_like(x)
    for z in range(x.shape[0]):
        out[z] = sfft.ifft2(sfft.fft2(x[z]) * gain).real
    return out[0] if planar else out


def normalize(stack: np.ndarray, clip_percentiles=None):
    """Affine map to [0, 1]; optionally clip at (low, high) percentiles first.

    Returns (normalized, (lo, hi)) so the map can be undone.  A constant
    stack maps to all 0.5 with a warning.
    """
    x = np.asarray(stack, dtype=np.float64)
    if clip_percentiles is not None:
        lo, hi = np.percentile(x, clip_percentiles)
    else:
        lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        warnings.warn("constant stack: normalizing to all 0.5", RuntimeWarning)
        return np.full_like(x, 0.5), (lo, hi)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0), (float(lo), float(hi))


def denormalize(stack: np.ndarray, bounds) -> np.ndarray:
    lo, hi = bounds
    return np.asarray(stack, dtype=np.float64) * (hi - lo) + lo


def gaussian_denoiser(sigma=(0.0, 1.0, 1.0)):
    """Bundled placeholder denoiser: separable Gaussian in the stabilized domain."""

    def denoise(stack: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(np.asarray(stack, dtype=np.float64), sigma)

    return denoise


def stabilized_denoise(stack: np.ndarray, denoiser=None, inverse: str = "unbiased"):
    """anscombe -> Gaussian-domain denoiser -> inverse transform."""
    denoiser = denoiser or gaussian_denoiser()
    return inverse_anscombe(denoiser(anscombe(stack)), inverse)
