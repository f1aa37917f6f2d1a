"""Bilinear interpolation of cell-centered grids."""

from __future__ import annotations

import numpy as np


def _coords(values: np.ndarray, resolution: float, points: np.ndarray):
    h, w = values.shape
    # continuous index of cell centers; clamped so the outer half-cell extrapolates flat
    cx = np.clip(points[..., 0] / resolution - 0.5, 0.0, w - 1.0)
    cy = np.clip(points[..., 1] / resolution - 0.5, 0.0, h - 1.0)
    inside_x = (points[..., 0] / resolution - 0.5 > 0.0) & (points[..., 0] / resolution - 0.5 < w - 1.0)
    inside_y = (points[..., 1] / resolution - 0.5 > 0.0) & (points[..., 1] / resolution - 0.5 < h - 1.0)
    x0 = np.minimum(np.floor(cx).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(cy).astype(int), max(h - 2, 0))
    return cx - x0, cy - y0, x0, y0, inside_x, inside_y


def bilinear(values: np.ndarray, resolution: float, points) -> np.ndarray:
    """Interpolate ``values[row, col]`` at metric points of shape (..., 2)."""
    points = np.asarray(points, dtype=float)
    fx, fy, x0, y0, _, _ = _coords(values, resolution, points)
    v00 = values[y0, x0]
    v01 = values[y0, x0 + 1]
    v10 = values[y0 + 1, x0]
    v11 = values[y0 + 1, x0 + 1]
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)


def bilinear_with_grad(values: np.ndarray, resolution: float, points):
    """Values and spatial gradient d/d(x, y), zero where the query is clamped."""
    points = np.asarray(points, dtype=float)
    fx, fy, x0, y0, inx, iny = _coords(values, resolution, points)
    v00 = values[y0, x0]
    v01 = values[y0, x0 + 1]
    v10 = values[y0 + 1, x0]
    v11 = values[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    gx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) / resolution * inx
    gy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) / resolution * iny
    return val, np.stack([gx, gy], axis=-1)
