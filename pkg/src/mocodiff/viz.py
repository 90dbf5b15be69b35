"""Codec-free outputs: 16-bit PGM previews and a minimal SVG line chart."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary 16-bit PGM (P5, maxval 65535), linear map [0,1] -> [0,65535]."""
    a = np.asarray(img, dtype=np.float64)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ValueError(f"PGM preview needs a 2D image, got {a.shape}")
    H, W = a.shape
    q = np.rint(np.clip(a, 0.0, 1.0) * 65535.0).astype(">u2")
    return f"P5\n{W} {H}\n65535\n".encode("ascii") + q.tobytes()


def write_pgm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(img))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(parts[4][: W * H * np.dtype(dtype).itemsize], dtype=dtype)
    return pix.reshape(H, W).astype(np.float64) / maxval


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def line_chart_svg(x, series: dict, title: str = "", xlabel: str = "", width=480, height=320) -> str:
    """One polyline per series, each rescaled to its own [min, max] so metrics
    with different units share the plot; the legend shows the ranges."""
    x = np.asarray(x, dtype=np.float64)
    ml, mr, mt, mb = 50, 20, 30, 60
    pw, ph = width - ml - mr, height - mt - mb
    xmin, xmax = float(x.min()), float(x.max())
    xspan = xmax - xmin or 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 36}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
    ]
    for xv in x:
        px = ml + (xv - xmin) / xspan * pw
        out.append(f'<text x="{px:.1f}" y="{mt + ph + 14}" text-anchor="middle" font-size="10">{xv:g}</text>')
    for k, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=np.float64)
        lo, hi = float(ys.min()), float(ys.max())
        span = hi - lo or 1.0
        pts = " ".join(
            f"{ml + (xv - xmin) / xspan * pw:.2f},{mt + ph - (yv - lo) / span * ph:.2f}" for xv, yv in zip(x, ys)
        )
        color = _COLORS[k % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        out.append(
            f'<text x="{ml + 4 + 150 * k}" y="{height - 12}" font-size="11" fill="{color}">'
            f"{escape(name)} [{lo:.3g}, {hi:.3g}]</text>"
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
