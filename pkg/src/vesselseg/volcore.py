"""Volumetric tensor primitives: dense convolution, max-filtering, activations.

Conventions
-----------
* A ``Tensor4`` is a numpy array of shape ``(c, z, y, x)``, C-contiguous
  order (x fastest).  All public ops accept any float dtype and accumulate
  in float64.
* Convolution is **cross-correlation** (no kernel flip):
  ``out[o, p] = bias[o] + sum_i sum_t in[i, p + t*d] * w[o, i, t]``.
* Everything is valid-mode (no padding): ``out_dim = in_dim - (k - 1) * d``
  per axis.  Callers pad data, never the engine.
* Max-filter gradient ties break toward the lowest linear input index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from . import engine

AXES = "czyx"
_SPATIAL = ("z", "y", "x")


class ShapeError(ValueError):
    """Raised when an input is too small or mismatched, naming the axis."""


Dilation = tuple[int, int, int]
NO_DILATION: Dilation = (1, 1, 1)


@dataclass
class KernelStack:
    """Convolution filter bank: weights (c_out, c_in, kz, ky, kx) + bias (c_out,)."""

    weights: np.ndarray
    bias: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 5:
            raise ShapeError(
                f"kernel weights must be 5-d (c_out, c_in, kz, ky, kx), got {self.weights.shape}"
            )
        if min(self.weights.shape[2:]) < 1:
            raise ShapeError(f"kernel extents must be >= 1, got {self.weights.shape[2:]}")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[0], dtype=self.weights.dtype)
        self.bias = np.asarray(self.bias)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out {self.weights.shape[0]}"
            )

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def kdims(self) -> tuple[int, int, int]:
        return self.weights.shape[2:]

    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def astype(self, dtype) -> "KernelStack":
        return KernelStack(self.weights.astype(dtype), self.bias.astype(dtype))


def check_tensor4(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (c, z, y, x), got shape {x.shape}")
    return x


def out_dim(in_dim: int, k: int, d: int) -> int:
    return in_dim - (k - 1) * d


def _check_extent(x: np.ndarray, kdims, d: Dilation, what: str):
    for ax, k, dd in zip(_SPATIAL, kdims, d):
        i = AXES.index(ax)
        eff = (k - 1) * dd + 1
        if x.shape[i] < eff:
            raise ShapeError(
                f"axis {ax}: input extent {x.shape[i]} smaller than effective "
                f"{what} extent {eff} (size {k}, dilation {dd})"
            )


def _tap_view(x: np.ndarray, kdims, d: Dilation) -> np.ndarray:
    """Strided view of all kernel taps: (c, z', y', x', kz, ky, kx).  No copy."""
    kz, ky, kx = kdims
    dz, dy, dx = d
    ez, ey, ex = (kz - 1) * dz + 1, (ky - 1) * dy + 1, (kx - 1) * dx + 1
    v = sliding_window_view(x, (ez, ey, ex), axis=(1, 2, 3))
    return v[..., ::dz, ::dy, ::dx]


def conv_direct(x: np.ndarray, k: KernelStack, d: Dilation = NO_DILATION) -> np.ndarray:
    """Valid dilated cross-correlation, direct (tap-gather) path.

    Deterministic mode contracts with a fixed-order einsum; fast mode lowers
    to a BLAS matmul over an im2col copy.
    """
    x = check_tensor4(x)
    if x.shape[0] != k.c_in:
        raise ShapeError(f"axis c: input has {x.shape[0]} channels, kernel expects {k.c_in}")
    _check_extent(x, k.kdims, d, "kernel")
    v = _tap_view(x, k.kdims, d)
    w = k.weights.astype(np.float64, copy=False)
    if engine.deterministic():
        out = np.einsum("izyxabc,oiabc->ozyx", v, w, dtype=np.float64, optimize=False)
    else:
        c, zz, yy, xx = v.shape[:4]
        cols = np.ascontiguousarray(v.transpose(1, 2, 3, 0, 4, 5, 6), dtype=np.float64)
        cols = cols.reshape(zz * yy * xx, -1)
        out = (cols @ w.reshape(k.c_out, -1).T).T.reshape(k.c_out, zz, yy, xx)
    out += k.bias.astype(np.float64)[:, None, None, None]
    return out


def conv_fft(x: np.ndarray, k: KernelStack, d: Dilation = NO_DILATION) -> np.ndarray:
    """Valid dilated cross-correlation via real-to-complex FFT.

    Same contract as :func:`conv_direct`; dilation is realized by
    zero-stuffing kernels before the transform.
    """
    x = check_tensor4(x)
    if x.shape[0] != k.c_in:
        raise ShapeError(f"axis c: input has {x.shape[0]} channels, kernel expects {k.c_in}")
    _check_extent(x, k.kdims, d, "kernel")
    kz, ky, kx = k.kdims
    dz, dy, dx = d
    ez, ey, ex = (kz - 1) * dz + 1, (ky - 1) * dy + 1, (kx - 1) * dx + 1
    c, z, y, xx = x.shape
    stuffed = np.zeros((k.c_out, k.c_in, ez, ey, ex), dtype=np.float64)
    stuffed[:, :, ::dz, ::dy, ::dx] = k.weights
    fx = sfft.rfftn(x.astype(np.float64, copy=False), axes=(1, 2, 3))
    fk = sfft.rfftn(stuffed, s=(z, y, xx), axes=(2, 3, 4))
    prod = np.einsum("izyx,oizyx->ozyx", fx, np.conj(fk))
    full = sfft.irfftn(prod, s=(z, y, xx), axes=(1, 2, 3))
    out = full[:, : z - ez + 1, : y - ey + 1, : xx - ex + 1].copy()
    out += k.bias.astype(np.float64)[:, None, None, None]
    return out


def conv_backward(
    x: np.ndarray, k: KernelStack, d: Dilation, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv_direct: (grad_input, grad_weights, grad_bias)."""
    x = check_tensor4(x)
    grad_out = check_tensor4(grad_out, "grad_out")
    expect = (k.c_out,) + tuple(
        out_dim(n, kk, dd) for n, kk, dd in zip(x.shape[1:], k.kdims, d)
    )
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expect}")
    v = _tap_view(x, k.kdims, d)
    g = grad_out.astype(np.float64, copy=False)
    w = k.weights.astype(np.float64, copy=False)
    grad_bias = g.sum(axis=(1, 2, 3))
    if engine.deterministic():
        grad_w = np.einsum("izyxabc,ozyx->oiabc", v, g, dtype=np.float64, optimize=False)
    else:
        c, zz, yy, xx = v.shape[:4]
        cols = np.ascontiguousarray(v.transpose(1, 2, 3, 0, 4, 5, 6), dtype=np.float64)
        cols = cols.reshape(zz * yy * xx, -1)
        grad_w = (g.reshape(k.c_out, -1) @ cols).reshape(k.weights.shape)
    grad_x = np.zeros(x.shape, dtype=np.float64)
    kz, ky, kx = k.kdims
    dz, dy, dx = d
    zz, yy, xx = g.shape[1:]
    # Fixed tap order keeps the scatter deterministic.
    for a in range(kz):
        for b in range(ky):
            for cc in range(kx):
                contrib = np.tensordot(w[:, :, a, b, cc], g, axes=([0], [0]))
                grad_x[
                    :,
                    a * dz : a * dz + zz,
                    b * dy : b * dy + yy,
                    cc * dx : cc * dx + xx,
                ] += contrib
    return grad_x, grad_w, grad_bias


def max_filter(x: np.ndarray, window, d: Dilation = NO_DILATION) -> np.ndarray:
    """Dense sliding-window maximum per channel (valid mode, dilated taps)."""
    x = check_tensor4(x)
    _check_extent(x, window, d, "window")
    v = _tap_view(x, window, d)
    return v.max(axis=(4, 5, 6))


def max_filter_argmax(x: np.ndarray, window, d: Dilation = NO_DILATION):
    """Forward max plus the flat tap index of each winner (first max wins).

    With C-ordered taps the first maximum is the one at the lowest linear
    input index, which is the documented tie rule.
    """
    x = check_tensor4(x)
    _check_extent(x, window, d, "window")
    v = _tap_view(x, window, d)
    flat = v.reshape(v.shape[:4] + (-1,))
    idx = flat.argmax(axis=4)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    return out, idx


def max_filter_backward(
    x: np.ndarray, window, d: Dilation, grad_out: np.ndarray, idx: np.ndarray | None = None
) -> np.ndarray:
    """Route grad_out to the argmax taps of the forward call."""
    x = check_tensor4(x)
    if idx is None:
        _, idx = max_filter_argmax(x, window, d)
    wz, wy, wx = window
    dz, dy, dx = d
    c, zz, yy, xx = grad_out.shape
    a, rem = np.divmod(idx, wy * wx)
    b, cc = np.divmod(rem, wx)
    ci, zi, yi, xi = np.meshgrid(
        np.arange(c), np.arange(zz), np.arange(yy), np.arange(xx), indexing="ij"
    )
    grad_x = np.zeros(x.shape, dtype=np.float64)
    np.add.at(grad_x, (ci, zi + a * dz, yi + b * dy, xi + cc * dx), grad_out)
    return grad_x


ACTIVATIONS = ("tanh", "relu", "logistic", "linear")


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "logistic":
        # expit in stable two-branch form
        out = np.empty_like(x, dtype=np.float64)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if kind == "linear":
        return np.asarray(x, dtype=np.float64)
    raise ValueError(f"unsupported activation kind {kind!r}")


def activation_backward(kind: str, out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient through an activation, computed from its forward output."""
    if kind == "tanh":
        return grad_out * (1.0 - out * out)
    if kind == "relu":
        return grad_out * (out > 0)
    if kind == "logistic":
        return grad_out * out * (1.0 - out)
    if kind == "linear":
        return grad_out
    raise ValueError(f"unsupported activation kind {kind!r}")
