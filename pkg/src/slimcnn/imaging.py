"""Small raster helpers shared by the data pipeline and Grad-CAM rendering."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D grid (or h x w x c stack).

    Output corners sample the input corners exactly; a 1-pixel axis is
    broadcast.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    src = np.asarray(a, dtype=np.float64)
    h, w = src.shape[:2]

    def axis(n_in, n_out):
        if n_in == 1 or n_out == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    extra = (None,) * (src.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def round_half_up(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def jet(value) -> np.ndarray:
    """Piecewise-linear jet colormap; ``value`` in [0, 1] (scalar or array) -> uint8 RGB."""
    x = np.clip(np.asarray(value, dtype=np.float64), 0.0, 1.0)
    r = np.clip(np.minimum(4 * x - 1.5, -4 * x + 4.5), 0, 1)
    g = np.clip(np.minimum(4 * x - 0.5, -4 * x + 3.5), 0, 1)
    b = np.clip(np.minimum(4 * x + 0.5, -4 * x + 2.5), 0, 1)
    return round_half_up(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def write_png(path, rgb: np.ndarray) -> None:
    # uint8 (h, w) saves as L, (h, w, 3) as RGB
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(Path(path), format="PNG")
