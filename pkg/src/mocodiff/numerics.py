"""Dense tensor helpers: unitary 2D FFT pair and seeded Gaussian draws.

All arrays are plain ``numpy.ndarray``. Real images are float64; k-space is
complex128. The FFT is unitary (``1/sqrt(H*W)`` in both directions) so that
Parseval holds with equality.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

Rng = np.random.Generator


class InverseResult(NamedTuple):
    image: np.ndarray
    imag_residual: float


def make_rng(seed: int | None) -> Rng:
    """64-bit PCG generator; identical seeds give identical streams."""
    return np.random.default_rng(seed)


def _check_image(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim < 2:
        raise ValueError(f"expected a 2D image (or batch of images), got shape {arr.shape}")
    if arr.size == 0 or 0 in arr.shape[-2:]:
        raise ValueError("empty image")
    return arr


def fft2(img: np.ndarray) -> np.ndarray:
    """Unitary forward 2D DFT over the last two axes.

    Works for any extents (mixed-radix), e.g. 240x180 or 63x65.
    """
    arr = _check_image(img)
    return np.fft.fft2(arr.astype(np.complex128, copy=False), norm="ortho")


def ifft2_full(k: np.ndarray) -> InverseResult:
    """Unitary inverse 2D DFT returning the real part and max |imag|.

    The residual is reported, not raised on: conjugate-asymmetric spectra are
    legal input (e.g. motion-corrupted k-space).
    """
    arr = _check_image(k)
    out = np.fft.ifft2(arr, norm="ortho")
    resid = float(np.max(np.abs(out.imag))) if out.size else 0.0
    return InverseResult(np.ascontiguousarray(out.real), resid)


def ifft2(k: np.ndarray) -> np.ndarray:
    return ifft2_full(k).image


def gaussian(rng: Rng, shape: Sequence[int] | int) -> np.ndarray:
    """I.i.d. standard normal float64 samples of the given shape."""
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    return rng.standard_normal(shape)
