"""Volume normalization, 2D rigid transforms/registration, plane slicing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import minimize

PLANES = ("sagittal", "coronal", "transverse")
_PLANE_AXIS = {"sagittal": 0, "coronal": 1, "transverse": 2}


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidParams2D:
    """In-plane rigid pose.

    ``tx`` shifts content along columns and ``ty`` along rows (pixels);
    ``theta`` rotates about the geometric image center (radians).
    """

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not abs(self.theta) <= math.pi:
            raise ValueError(f"|theta| must be <= pi, got {self.theta}")

    def inverse(self) -> "RigidParams2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        # p -> R(p - c) + c + t  inverts to  q -> R^T(q - c) + c - R^T t
        tx = -(c * self.tx + s * self.ty)
        ty = -(-s * self.tx + c * self.ty)
        return RigidParams2D(tx, ty, -self.theta)

    def is_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.theta == 0

    def as_tuple(self):
        return (self.tx, self.ty, self.theta)


# ---------------------------------------------------------------- normalize


def normalize(volume: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """Clip at the given upper percentile, then min-max scale into [0, 1].

    A constant volume maps to zeros.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty volume")
    hi = float(np.percentile(v, percentile))
    lo = float(v.min())
    if hi <= lo:
        return np.zeros_like(v)
    out = (np.clip(v, lo, hi) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- planes


def _plane_axis(plane: str) -> int:
    try:
        return _PLANE_AXIS[plane]
    except KeyError:
        raise ValueError(f"unknown plane {plane!r}; expected one of {PLANES}") from None


def extract_plane(volume: np.ndarray, plane: str, index: int) -> np.ndarray:
    """2D slice with the plane's storage axis fixed (sagittal x, coronal y,
    transverse z)."""
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    axis = _plane_axis(plane)
    n = v.shape[axis]
    if not 0 <= index < n:
        raise IndexError(f"{plane} index {index} out of range [0, {n})")
    return np.take(v, index, axis=axis)


def n_slices(volume: np.ndarray, plane: str) -> int:
    return np.asarray(volume).shape[_plane_axis(plane)]


def stack_plane(slices, plane: str) -> np.ndarray:
    """Inverse of extracting every index of ``plane``."""
    return np.stack(list(slices), axis=_plane_axis(plane))


# ---------------------------------------------------------------- rigid


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates; outside samples are 0."""
    H, W = img.shape[-2:]
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out = np.zeros(img.shape[:-2] + rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            w = np.where(ok, wr * wc, 0.0)
            vals = img[..., np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)]
            out += w * vals
    return out


def _source_coords(shape, p: RigidParams2D):
    H, W = shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    c, s = math.cos(p.theta), math.sin(p.theta)
    # output pixel q pulls from p = R^T (q - center - t) + center
    dx = cc - cx - p.tx
    dy = rr - cy - p.ty
    src_c = c * dx + s * dy + cx
    src_r = -s * dx + c * dy + cy
    return src_r, src_c


def apply_rigid(img: np.ndarray, p: RigidParams2D) -> np.ndarray:
    """Bilinear rigid resampling over the last two axes, zero fill outside."""
    img = np.asarray(img, dtype=np.float64)
    if p.is_identity():
        return img.copy()
    src_r, src_c = _source_coords(img.shape[-2:], p)
    if p.theta == 0 and float(p.tx).is_integer() and float(p.ty).is_integer():
        # exact index shift; avoids rounding from the center offsets
        src_r = np.rint(src_r)
        src_c = np.rint(src_c)
    return _bilinear(img, src_r, src_c)


def ncc(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Zero-mean normalized cross-correlation of two equally shaped images,
    optionally restricted to the pixels where ``mask`` is true."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a.ravel()
    b = b.ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return 0.0
    return float(a @ b) / den


def _shift_int(img: np.ndarray, tx: int, ty: int) -> np.ndarray:
    """Exact integer translation with zero fill; same result as
    ``apply_rigid(img, RigidParams2D(tx, ty, 0))``."""
    H, W = img.shape
    out = np.zeros_like(img)
    if abs(tx) >= W or abs(ty) >= H:
        return out
    out[max(ty, 0) : H + min(ty, 0), max(tx, 0) : W + min(tx, 0)] = img[
        max(-ty, 0) : H + min(-ty, 0), max(-tx, 0) : W + min(-tx, 0)
    ]
    return out


def register_rigid(
    moving: np.ndarray,
    fixed: np.ndarray,
    max_shift: int = 10,
    max_angle_deg: int = 5,
    smooth: float = 1.0,
) -> RigidParams2D:
    """Find the pose ``p`` maximizing ``ncc(apply_rigid(moving, p), fixed)``.

    Exhaustive grid over integer shifts in +/-``max_shift`` and whole-degree
    rotations in +/-``max_angle_deg``, then a Nelder-Mead polish from the
    best grid point. The identity pose is part of the grid, so the result never scores
    below the starting alignment.

    Both images are Gaussian-smoothed (``smooth`` px) before scoring. On
    noisy inputs bilinear resampling at fractional poses averages the noise
    and inflates the correlation, which biases the optimum toward non-integer
    poses; pre-smoothing removes most of that bias.
    """
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if moving.shape != fixed.shape or moving.ndim != 2:
        raise ValueError(f"need equal 2D shapes, got {moving.shape} and {fixed.shape}")
    if np.ptp(moving) == 0 or np.ptp(fixed) == 0:
        raise RegistrationError("no contrast")
    if smooth > 0:
        moving = gaussian_filter(moving, smooth)
        fixed = gaussian_filter(fixed, smooth)

    # only pixels whose source lies inside the moving image are compared, so
    # content pushed out of the field of view does not bias the optimum
    ones = np.ones_like(moving)

    def score(tx, ty, th):
        p = RigidParams2D(tx, ty, th)
        return ncc(apply_rigid(moving, p), fixed, apply_rigid(ones, p) > 0.999)

    best = (0.0, 0.0, 0.0)
    best_s = score(*best)
    shifts = range(-max_shift, max_shift + 1)
    for deg in range(-max_angle_deg, max_angle_deg + 1):
        th = math.radians(deg)
        if deg == 0:
            rot, rot_ones = moving, ones
        else:
            rot = apply_rigid(moving, RigidParams2D(0.0, 0.0, th))
            rot_ones = apply_rigid(ones, RigidParams2D(0.0, 0.0, th))
        # rotation about the center then shift == the composed pose
        for ty in shifts:
            for tx in shifts:
                s = ncc(_shift_int(rot, tx, ty), fixed, _shift_int(rot_ones, tx, ty) > 0.999)
                if s > best_s:
                    best_s, best = s, (float(tx), float(ty), th)

    # rotation in degrees so all three axes have comparable scale
    x0 = np.array([best[0], best[1], math.degrees(best[2])])
    simplex = np.vstack([x0, x0 + np.eye(3) * 0.75])
    res = minimize(
        lambda v: -score(v[0], v[1], math.radians(v[2])),
        x0,
        method="Nelder-Mead",
        options={"xatol": 1e-3, "fatol": 1e-7, "initial_simplex": simplex},
    )
    if -res.fun > best_s:
        cur = [res.x[0], res.x[1], math.radians(res.x[2])]
    else:
        cur = list(best)
    tx, ty, th = cur
    return RigidParams2D(tx, ty, max(-math.pi, min(math.pi, th)))
