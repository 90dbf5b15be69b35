"""Rigid in-plane motion artifacts assembled line by line in k-space, and
randomized brain-like phantoms to run them on."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import Rng, fft2, ifft2
from .preprocess import RigidParams2D, apply_rigid

# ---------------------------------------------------------------- orders


@dataclass(frozen=True)
class AcquisitionOrder:
    """Maps acquisition time (index into ``permutation``) to the stored
    k-space row (unshifted FFT layout)."""

    kind: str
    permutation: tuple[int, ...]

    def __post_init__(self):
        n = len(self.permutation)
        if sorted(self.permutation) != list(range(n)):
            raise ValueError("acquisition order must be a permutation of 0..H-1")


def acquisition_order(H: int, kind: str = "linear") -> AcquisitionOrder:
    """``linear`` sweeps ky from -H/2 upward; ``centric`` starts at ky = 0 and
    alternates outward (0, -1, +1, -2, +2, ...)."""
    ky = np.arange(H) - H // 2  # centered frequencies, ascending
    if kind == "linear":
        seq = list(ky)
    elif kind == "centric":
        seq = sorted(ky, key=lambda k: (abs(k), k))
    else:
        raise ValueError(f"unknown acquisition order {kind!r}")
    rows = tuple(int(k % H) for k in seq)
    return AcquisitionOrder(kind, rows)


# ---------------------------------------------------------------- trajectory


@dataclass(frozen=True)
class MotionTrajectory:
    """Piecewise-constant pose over acquisition time.

    ``segments`` is a list of ``((start, stop), pose)`` with half-open
    acquisition-index ranges that must tile ``[0, H)`` in order.
    """

    segments: tuple
    n_lines: int
    severity: float = field(init=False)

    def __post_init__(self):
        pos = 0
        for (start, stop), pose in self.segments:
            if start != pos or stop <= start:
                raise ValueError("segments must partition [0, H) in acquisition order")
            if not all(math.isfinite(v) for v in pose.as_tuple()):
                raise ValueError("poses must be finite")
            pos = stop
        if pos != self.n_lines:
            raise ValueError("segments must partition [0, H) in acquisition order")
        sev = 0.0
        for _, p in self.segments:
            sev = max(sev, abs(p.tx), abs(p.ty), abs(p.theta))
        object.__setattr__(self, "severity", sev)

    @classmethod
    def identity(cls, H: int) -> "MotionTrajectory":
        return cls(segments=(((0, H), RigidParams2D()),), n_lines=H)

    @classmethod
    def from_events(cls, H: int, times, poses) -> "MotionTrajectory":
        """Start at the identity pose and switch to ``poses[i]`` at acquisition
        index ``times[i]``."""
        bounds = [0, *times, H]
        all_poses = [RigidParams2D(), *poses]
        segs = []
        for i in range(len(all_poses)):
            if bounds[i + 1] > bounds[i]:
                segs.append(((bounds[i], bounds[i + 1]), all_poses[i]))
        return cls(segments=tuple(segs), n_lines=H)


def random_trajectory(
    rng: Rng,
    H: int,
    severity: float,
    max_events: int = 4,
    order: AcquisitionOrder | None = None,
) -> MotionTrajectory:
    """1 to ``max_events`` motion events at random acquisition times.

    Every segment gets a pose with translations uniform in ``+/-severity``
    px and rotation uniform in ``+/-severity`` degrees, except the segment
    that acquires the k-space center (ky = 0 under ``order``, linear by
    default): that one is the reference pose, the identity. The corrupted
    image therefore stays registered to the clean one, and what remains is
    the ghosting and blurring from the other segments.
    """
    if severity < 0:
        raise ValueError("severity must be >= 0")
    if severity == 0:
        return MotionTrajectory.identity(H)
    order = order if order is not None else acquisition_order(H)
    n_events = int(rng.integers(1, max_events + 1))
    times = [int(t) for t in np.sort(rng.choice(np.arange(1, H), size=n_events, replace=False))]
    bounds = [0, *times, H]
    center = order.permutation.index(0)
    segs = []
    for i in range(n_events + 1):
        tx, ty, deg = rng.uniform(-1.0, 1.0, size=3) * severity
        ref = bounds[i] <= center < bounds[i + 1]
        pose = RigidParams2D() if ref else RigidParams2D(float(tx), float(ty), math.radians(float(deg)))
        segs.append(((bounds[i], bounds[i + 1]), pose))
    return MotionTrajectory(segments=tuple(segs), n_lines=H)


# ---------------------------------------------------------------- simulate


def simulate_motion(
    clean: np.ndarray,
    traj: MotionTrajectory,
    order: AcquisitionOrder | None = None,
    clip: bool = True,
) -> np.ndarray:
    """Composite k-space from per-segment rigidly moved copies of ``clean``.

    For each segment the image is moved by the segment's pose, transformed
    to k-space, and the rows acquired during that segment are copied into
    the composite. The result is the real part of the inverse transform,
    clipped to [0, 1].
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 2:
        raise ValueError("simulate_motion expects a 2D image")
    H = clean.shape[0]
    if order is None:
        order = acquisition_order(H)
    if len(order.permutation) != H or traj.n_lines != H:
        raise ValueError(f"trajectory/order cover {traj.n_lines}/{len(order.permutation)} lines, image has {H}")
    perm = np.asarray(order.permutation)
    composite = np.zeros(clean.shape, dtype=np.complex128)
    filled = np.zeros(H, dtype=bool)
    cache: dict = {}
    for (start, stop), pose in traj.segments:
        key = pose.as_tuple()
        if key not in cache:
            cache[key] = fft2(apply_rigid(clean, pose))
        rows = perm[start:stop]
        composite[rows] = cache[key][rows]
        filled[rows] = True
    if not filled.all():
        raise ValueError("segments do not cover every k-space line")
    out = ifft2(composite)
    return np.clip(out, 0.0, 1.0) if clip else out


# ---------------------------------------------------------------- phantom


def _ellipse(H, W, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    dy = yy - cy
    dx = xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2


def phantom(rng: Rng, H: int = 64, W: int | None = None, noise: float = 0.01, edge_blur: float = 1.0) -> np.ndarray:
    """Randomized brain-like phantom in [0, 1] with an exact-zero background.

    Layout: a bright elliptical skull ring, a dark CSF gap, a soft-tissue
    ellipse and 3 to 8 internal structures (ellipses or thin ribbons) at
    distinct intensities, plus faint smooth texture inside the head. Edges
    are softened with a 1-pixel Gaussian (partial-volume blur); the faint
    tails of that blur are cut so the background stays exactly zero.
    """
    W = H if W is None else W
    if H < 32 or W < 32:
        raise ValueError(f"phantom needs H, W >= 32, got {H}x{W}")
    cy = H / 2 - 0.5 + rng.uniform(-0.04, 0.04) * H
    cx = W / 2 - 0.5 + rng.uniform(-0.04, 0.04) * W
    ry = rng.uniform(0.36, 0.44) * H
    rx = rng.uniform(0.30, 0.38) * W
    ang = rng.uniform(-0.25, 0.25)
    head = _ellipse(H, W, cy, cx, ry, rx, ang)
    thick = rng.uniform(0.12, 0.18)
    img = np.zeros((H, W))
    skull_val = rng.uniform(0.8, 1.0)
    img[head <= 1.0] = skull_val
    img[head <= (1.0 - thick) ** 2] = rng.uniform(0.05, 0.15)  # CSF rim
    brain = _ellipse(H, W, cy, cx, ry * (1 - thick - 0.05), rx * (1 - thick - 0.05), ang)
    inside = brain <= 1.0
    img[inside] = rng.uniform(0.45, 0.6)
    n_struct = int(rng.integers(3, 9))
    levels = rng.permutation(np.linspace(0.15, 0.95, 9))[:n_struct]
    for k in range(n_struct):
        sy = cy + rng.uniform(-0.5, 0.5) * ry * 0.7
        sx = cx + rng.uniform(-0.5, 0.5) * rx * 0.7
        a = rng.uniform(0, math.pi)
        if rng.uniform() < 0.3:
            # ribbon: long thin ellipse
            e = _ellipse(H, W, sy, sx, rng.uniform(0.02, 0.04) * H, rng.uniform(0.12, 0.25) * W, a)
        else:
            e = _ellipse(H, W, sy, sx, rng.uniform(0.05, 0.14) * H, rng.uniform(0.05, 0.14) * W, a)
        img[(e <= 1.0) & inside] = levels[k]
    if noise > 0:
        tex = gaussian_filter(rng.standard_normal((H, W)), 1.5)
        tex /= tex.std() + 1e-12
        img = img + noise * tex * (head <= (1.0 - thick) ** 2)
    img[head > 1.0] = 0.0
    img = gaussian_filter(img, edge_blur) if edge_blur > 0 else img
    img[img < 0.02] = 0.0
    return np.clip(img, 0.0, 1.0)
