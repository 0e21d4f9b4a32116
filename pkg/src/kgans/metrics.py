"""Coverage and precision of generated 2D samples against circular masks, plus SVG export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from kgans.errors import ContractError
from kgans.partition import Tessellation

PALETTE = ("#cfe2f3", "#f4cccc", "#d9ead3", "#fff2cc", "#d9d2e9", "#fce5cd", "#d0e0e3", "#ead1dc")


@dataclass(frozen=True)
class MaskSet:
    centers: tuple[tuple[float, float], ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in c) for c in self.centers))
        if not self.centers or not self.radius > 0:
            raise ContractError("masks need at least one center and a positive radius")

    @classmethod
    def from_spec(cls, spec) -> MaskSet:
        return cls(spec.centers, spec.radius)

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        d = np.linalg.norm(points[:, None, :] - np.asarray(self.centers)[None], axis=2)
        return np.any(d <= self.radius, axis=1)


@dataclass(frozen=True)
class GridSpec:
    bins: int = 50
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.bins < 1:
            raise ContractError("grid needs at least one bin per axis")
        if not self.high > self.low:
            raise ContractError("grid bounds are empty")

    @property
    def width(self) -> float:
        return (self.high - self.low) / self.bins

    def centers(self) -> np.ndarray:
        """(bins*bins, 2) bin centers, x varying fastest."""
        c = self.low + (np.arange(self.bins) + 0.5) * self.width
        gx, gy = np.meshgrid(c, c)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def bin_index(self, points) -> np.ndarray:
        """Flat bin index per point, -1 outside the grid; the top/right edges belong to the last bin."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ij = np.floor((points - self.low) / self.width).astype(np.int64)
        at_edge = points == self.high
        ij[at_edge] = self.bins - 1
        inside = np.all((ij >= 0) & (ij < self.bins), axis=1)
        flat = ij[:, 1] * self.bins + ij[:, 0]
        return np.where(inside, flat, -1)


def coverage(samples, masks: MaskSet, grid: GridSpec = GridSpec()) -> float:
    """Fraction of in-mask bins (by bin center) holding at least one sample."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(samples) == 0:
        raise ContractError("coverage needs at least one sample")
    in_mask = masks.contains(grid.centers())
    if not in_mask.any():
        raise ContractError("no grid bin center lies inside the masks; refine the grid")
    hit = np.zeros(grid.bins * grid.bins, dtype=bool)
    idx = grid.bin_index(samples)
    hit[idx[idx >= 0]] = True
    return float(np.sum(hit & in_mask) / np.sum(in_mask))


def precision(samples, masks: MaskSet) -> float:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(samples) == 0:
        raise ContractError("precision needs at least one sample")
    return float(np.mean(masks.contains(samples)))


def assignment_raster(tess: Tessellation, resolution: int, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Cell index at every pixel center; row 0 is the bottom of the plot."""
    c = low + (np.arange(resolution) + 0.5) * (high - low) / resolution
    gx, gy = np.meshgrid(c, c)
    return tess.assign(np.column_stack([gx.ravel(), gy.ravel()])).reshape(resolution, resolution)


def boundary_segments(raster: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Pixel edges separating different cells, as (x0, y0, x1, y1) in pixel units."""
    segs = []
    rows, cols = raster.shape
    for r, c in zip(*np.nonzero(raster[:, 1:] != raster[:, :-1])):
        segs.append((c + 1, r, c + 1, r + 1))
    for r, c in zip(*np.nonzero(raster[1:, :] != raster[:-1, :])):
        segs.append((c, r + 1, c + 1, r + 1))
    return segs


def export_figure(
    path,
    samples=None,
    tessellation: Tessellation | None = None,
    masks: MaskSet | None = None,
    real=None,
    resolution: int = 100,
    size: int = 480,
    max_points: int = 2000,
) -> Path:
    """Write an SVG: cell coloring, cell boundaries, masks, real and generated points, prototypes.

    Output depends only on the inputs, so identical runs give identical files.
    """
    for name, arr in (("samples", samples), ("real", real)):
        if arr is not None and np.asarray(arr).ndim == 2 and np.asarray(arr).shape[1] != 2:
            raise ContractError(f"{name}: figures are only drawn for 2D data")
    if tessellation is not None and tessellation.dim != 2:
        raise ContractError("figures are only drawn for 2D data")
    path = Path(path)
    scale = size / 2.0

    def px(x, y):
        return (x + 1.0) * scale, (1.0 - y) * scale

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]
    if tessellation is not None:
        raster = assignment_raster(tessellation, resolution)
        cell = size / resolution
        out.append('<g class="cells" shape-rendering="crispEdges">')
        for r in range(resolution):
            row = raster[r]
            start = 0
            for c in range(1, resolution + 1):
                if c == resolution or row[c] != row[start]:
                    y = size - (r + 1) * cell
                    out.append(
                        f'<rect x="{start * cell:.3f}" y="{y:.3f}" width="{(c - start) * cell:.3f}" '
                        f'height="{cell:.3f}" fill="{PALETTE[row[start] % len(PALETTE)]}"/>'
                    )
                    start = c
        out.append("</g>")
        segs = boundary_segments(raster)
        if segs:
            d = " ".join(
                f"M{x0 * cell:.3f},{size - y0 * cell:.3f}L{x1 * cell:.3f},{size - y1 * cell:.3f}" for x0, y0, x1, y1 in segs
            )
            out.append(f'<path class="boundary" d="{d}" stroke="black" stroke-width="1" fill="none"/>')
    if masks is not None:
        for cx, cy in masks.centers:
            x, y = px(cx, cy)
            out.append(
                f'<circle class="mask" cx="{x:.3f}" cy="{y:.3f}" r="{masks.radius * scale:.3f}" '
                'fill="none" stroke="#666666" stroke-dasharray="4 3"/>'
            )
    for cls_name, pts, color in (("real", real, "#999999"), ("generated", samples, "#1f4e9c")):
        if pts is None:
            continue
        pts = np.asarray(pts, dtype=np.float64)[:max_points]
        out.append(f'<g class="{cls_name}" fill="{color}" fill-opacity="0.6">')
        out.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5"/>' for x, y in (px(*p) for p in pts))
        out.append("</g>")
    if tessellation is not None:
        out.append('<g class="prototypes" fill="black">')
        for j, p in enumerate(tessellation.prototypes):
            x, y = px(*p)
            out.append(f'<path d="M{x - 6:.2f},{y:.2f}L{x + 6:.2f},{y:.2f}M{x:.2f},{y - 6:.2f}L{x:.2f},{y + 6:.2f}" stroke="black" stroke-width="2"/>')
            out.append(f'<text x="{x + 7:.2f}" y="{y - 7:.2f}" font-size="12">{escape(str(j))}</text>')
        out.append("</g>")
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path
