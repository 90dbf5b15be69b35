"""Image quality metrics (SSIM, NMSE, PSNR) and mean +/- std aggregation."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

# SSIM constants: 11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, L=1
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 1.0

METHOD_ORDER = ("UNet Real", "UNet Synth", "Diffusion")


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # 'valid' separable filtering: keep only windows fully inside the image
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h = len(g) // 2
    return out[h : img.shape[0] - h, h : img.shape[1] - h]


def _check_pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean local SSIM over all fully-contained 11x11 Gaussian windows.

    Images smaller than the window fall back to a single global window.
    """
    x, y = _check_pair(x, y)
    x = np.squeeze(x)
    y = np.squeeze(y)
    if x.ndim != 2:
        raise ValueError("ssim expects 2D images")
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    if min(x.shape) < WINDOW_SIZE:
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = ((x - mx) * (y - my)).mean()
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx**2 + my**2 + c1) * (vx + vy + c2)
        return float(num / den)
    g = gaussian_window()
    mx = _filter(x, g)
    my = _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def mse(xhat: np.ndarray, x: np.ndarray) -> float:
    xhat, x = _check_pair(xhat, x)
    return float(np.mean((xhat - x) ** 2))


def nmse(xhat: np.ndarray, x: np.ndarray) -> float:
    """||xhat - x||^2 / ||x||^2."""
    xhat, x = _check_pair(xhat, x)
    ref = float(np.sum(x * x))
    if ref == 0.0:
        raise ValueError("nmse undefined for an all-zero reference")
    return float(np.sum((xhat - x) ** 2) / ref)


def psnr(xhat: np.ndarray, x: np.ndarray) -> float:
    """PSNR in dB with peak 1.0. Returns ``inf`` when the images are equal."""
    err = mse(xhat, x)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(DATA_RANGE**2 / err))


@dataclass
class MetricsRecord:
    ssim: float
    nmse: float
    psnr: float
    patient: str = ""
    plane: str = ""
    slice: int = 0
    method: str = ""

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)


def evaluate_pair(xhat, x, **ids) -> MetricsRecord:
    return MetricsRecord(ssim=ssim(xhat, x), nmse=nmse(xhat, x), psnr=psnr(xhat, x), **ids)


RECORD_FIELDS = ("patient", "plane", "slice", "method", "ssim", "nmse", "psnr")


def write_records_csv(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.patient, r.plane, r.slice, r.method, repr(r.ssim), repr(r.nmse), repr(r.psnr)])


def read_records_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                MetricsRecord(
                    ssim=float(row["ssim"]),
                    nmse=float(row["nmse"]),
                    psnr=float(row["psnr"]),
                    patient=row["patient"],
                    plane=row["plane"],
                    slice=int(row["slice"]),
                    method=row["method"],
                )
            )
    return out


@dataclass
class Summary:
    method: str
    plane: str
    n: int
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population (N-divisor) standard deviation."""
    if len(values) == 0:
        raise ValueError("empty group")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def format_pm(mean: float, std: float, decimals: int = 3) -> str:
    return f"{mean:.{decimals}f} ± {std:.{decimals}f}"


DECIMALS = {"ssim": 3, "nmse": 3, "psnr": 1}


def aggregate(records: Sequence[MetricsRecord]) -> list[Summary]:
    """Group by (method, plane) and reduce each metric to mean and std."""
    groups: "OrderedDict[tuple[str, str], list[MetricsRecord]]" = OrderedDict()
    for r in records:
        groups.setdefault((r.method, r.plane), []).append(r)
    out = []
    for (method, plane), rs in groups.items():
        s = Summary(method=method, plane=plane, n=len(rs))
        for name in DECIMALS:
            vals = [getattr(r, name) for r in rs]
            s.mean[name], s.std[name] = mean_std(vals)
        out.append(s)
    return out


def write_summary_csv(path, summaries: Sequence[Summary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "plane", "metric", "mean", "std"])
        for s in summaries:
            for name in DECIMALS:
                w.writerow([s.method, s.plane, name, repr(s.mean[name]), repr(s.std[name])])


def format_table(summaries: Sequence[Summary], plane: str) -> str:
    """Text table for one plane with rows in the canonical method order."""
    rows = {s.method: s for s in summaries if s.plane == plane}
    lines = [f"{plane.capitalize()} view metrics", "Label | SSIM | NMSE | PSNR"]
    order = [m for m in METHOD_ORDER if m in rows] + [m for m in rows if m not in METHOD_ORDER]
    for m in order:
        s = rows[m]
        cells = [format_pm(s.mean[k], s.std[k], DECIMALS[k]) for k in DECIMALS]
        lines.append(" | ".join([m, *cells]))
    return "\n".join(lines)
