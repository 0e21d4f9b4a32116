"""Toy datasets of disk-shaped clusters and their CSV persistence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from kgans.errors import ContractError, ParseError

DEFAULT_N = 10_000

PRESETS: dict[str, dict] = {
    "td1": {"centers": [(-0.5, 0.0), (0.5, 0.0)], "radius": 0.25},
    "td2": {"centers": [(-0.5, -0.5), (0.5, -0.5), (0.0, 0.5)], "radius": 0.25},
    "td3": {"centers": [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)], "radius": 0.25},
}


@dataclass(frozen=True)
class ToySpec:
    centers: tuple[tuple[float, float], ...]
    radius: float
    n: int = DEFAULT_N
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in c) for c in self.centers))
        if not self.centers:
            raise ContractError("centers: at least one center is required")
        for c in self.centers:
            if len(c) != 2 or not all(-1.0 <= v <= 1.0 for v in c):
                raise ContractError(f"centers: {c} must be a 2D point inside [-1, 1]^2")
        if not self.radius > 0:
            raise ContractError(f"radius: must be positive, got {self.radius}")
        if self.n < 1:
            raise ContractError(f"n: must be at least 1, got {self.n}")

    @classmethod
    def preset(cls, name: str, n: int = DEFAULT_N, seed: int = 0) -> ToySpec:
        try:
            geometry = PRESETS[name.lower()]
        except KeyError:
            raise ContractError(f"preset: unknown preset {name!r}, choose from {sorted(PRESETS)}") from None
        return cls(tuple(geometry["centers"]), geometry["radius"], n, seed)


@dataclass
class Dataset:
    points: np.ndarray
    labels: list[str | None] | None = None
    provenance: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ContractError("points must be an (N, d) array")
        if not np.all(np.isfinite(self.points)):
            raise ContractError("points must be finite")
        if self.labels is not None:
            self.labels = list(self.labels)
            if len(self.labels) != len(self.points):
                raise ContractError("labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def make_toy(spec: ToySpec) -> Dataset:
    """Uniform points on [-1, 1]^2 kept only if they fall inside one of the disks.

    The label of a point is the index (as a string) of the disk it fell in.
    """
    rng = np.random.default_rng(spec.seed)
    centers = np.asarray(spec.centers)
    kept, labels = [], []
    total = 0
    while total < spec.n:
        cand = rng.uniform(-1.0, 1.0, size=(max(2 * (spec.n - total), 64), 2))
        d = np.linalg.norm(cand[:, None, :] - centers[None], axis=2)
        nearest = np.argmin(d, axis=1)
        inside = d[np.arange(len(cand)), nearest] <= spec.radius
        kept.append(cand[inside])
        labels.append(nearest[inside])
        total += int(inside.sum())
    points = np.concatenate(kept)[: spec.n]
    lab = np.concatenate(labels)[: spec.n]
    return Dataset(points, [str(v) for v in lab], provenance=f"toy:{spec}")


def save_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    header = [f"x{i}" for i in range(ds.dim)] + ["label"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, row in enumerate(ds.points):
            label = "" if ds.labels is None or ds.labels[i] is None else ds.labels[i]
            writer.writerow([f"{v:.17g}" for v in row] + [label])


def load_csv(path: str | Path) -> Dataset:
    """Inverse of :func:`save_csv`; an empty label column means unlabeled."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", line=1) from None
        has_label = bool(header) and header[-1] == "label"
        dim = len(header) - int(has_label)
        if dim < 1 or any(h != f"x{i}" for i, h in enumerate(header[:dim])):
            raise ParseError(f"unexpected header {header}", line=1)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                rows.append([float(v) for v in row[:dim]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise ParseError("non-finite coordinate", line=lineno)
            labels.append(row[dim] if has_label and row[dim] != "" else None)
    if not rows:
        raise ContractError(f"{path}: dataset has no rows")
    keep_labels = has_label and any(l is not None for l in labels)
    return Dataset(np.array(rows), labels if keep_labels else None, provenance=str(path))


def subsample_labels(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep labels on exactly ``round(fraction * N)`` random points and drop the rest."""
    if ds.labels is None:
        raise ContractError("dataset has no labels to subsample")
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must lie in [0, 1], got {fraction}")
    n = len(ds)
    keep = np.random.default_rng(seed).permutation(n)[: round(fraction * n)]
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    labels = [l if m else None for l, m in zip(ds.labels, mask)]
    return Dataset(ds.points.copy(), labels, ds.provenance)

