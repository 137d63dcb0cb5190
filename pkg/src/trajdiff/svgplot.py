"""Dependency-free SVG rendering: trajectory polylines and grid heatmaps."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .metrics import grid_density
from .trajdata import GridSpec


def _bbox(point_arrays) -> tuple[float, float, float, float]:
    allp = np.concatenate([np.asarray(p, dtype=np.float64) for p in point_arrays])
    lng_min, lat_min = allp.min(axis=0)
    lng_max, lat_max = allp.max(axis=0)
    if lng_max <= lng_min:
        lng_max = lng_min + 1e-9
    if lat_max <= lat_min:
        lat_max = lat_min + 1e-9
    return float(lng_min), float(lng_max), float(lat_min), float(lat_max)


def plot_lines(point_arrays, size: int = 800, stroke: str = "#1f6feb") -> str:
    """One polyline per trajectory, mapped into a square viewport (north up)."""
    point_arrays = list(point_arrays)
    if not point_arrays:
        raise DataError("nothing to plot: empty trajectory set")
    lng_min, lng_max, lat_min, lat_max = _bbox(point_arrays)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for pts in point_arrays:
        pts = np.asarray(pts, dtype=np.float64)
        x = (pts[:, 0] - lng_min) / (lng_max - lng_min) * size
        y = (1.0 - (pts[:, 1] - lat_min) / (lat_max - lat_min)) * size
        coords = " ".join(f"{xi:.2f},{yi:.2f}" for xi, yi in zip(x, y))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
                     f'stroke-width="1" stroke-opacity="0.35"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def plot_heatmap(point_arrays, grid: GridSpec, size: int = 800) -> str:
    """Grid cells with opacity proportional to point density (1/255 steps);
    empty cells are omitted."""
    point_arrays = list(point_arrays)
    if not point_arrays:
        raise DataError("nothing to plot: empty trajectory set")
    probs = grid_density(point_arrays, grid).probs.reshape(grid.rows, grid.cols)
    peak = probs.max()
    cell_w = size / grid.cols
    cell_h = size / grid.rows
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for r in range(grid.rows):
        for c in range(grid.cols):
            p = probs[r, c]
            if p == 0.0:
                continue
            opacity = round(255.0 * p / peak) / 255.0
            x = c * cell_w
            y = (grid.rows - 1 - r) * cell_h  # row 0 sits at the south edge
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cell_w:.2f}" '
                         f'height="{cell_h:.2f}" fill="#d73027" fill-opacity="{opacity:.6f}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
