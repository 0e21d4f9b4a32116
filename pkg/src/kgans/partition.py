"""Voronoi assignment of points to prototypes and the per-cell batch filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kgans.errors import ContractError, ShapeError
from kgans.transport import CostFunction, EmpiricalMeasure, lp_cost


@dataclass(frozen=True)
class Tessellation:
    """Cells induced by prototypes under a cost.

    Without dual weights the cells are Voronoi cells; with them they are
    Laguerre cells.  Ties go to the lowest prototype index.
    """

    prototypes: np.ndarray
    cost: CostFunction = lp_cost(2)
    dual_weights: np.ndarray | None = None

    def __post_init__(self):
        protos = np.array(self.prototypes, dtype=np.float64, ndmin=2)
        if protos.shape[0] < 1:
            raise ContractError("a tessellation needs at least one prototype")
        if not np.all(np.isfinite(protos)):
            raise ContractError("prototypes must be finite")
        protos.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        if self.dual_weights is not None:
            g = np.array(self.dual_weights, dtype=np.float64)
            if g.shape != (protos.shape[0],):
                raise ShapeError("one dual weight per prototype")
            g.setflags(write=False)
            object.__setattr__(self, "dual_weights", g)

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def with_prototype(self, j: int, y) -> Tessellation:
        protos = self.prototypes.copy()
        protos[j] = y
        return Tessellation(protos, self.cost, self.dual_weights)

    def assign(self, X) -> np.ndarray:
        """Cell index for every row of X."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ShapeError(f"points of shape {X.shape} do not match prototype dimension {self.dim}")
        if self.k == 1:
            return np.zeros(len(X), dtype=np.intp)
        C = self.cost.pairwise(X, self.prototypes)
        if self.dual_weights is not None:
            C = C - self.dual_weights
        return np.argmin(C, axis=1)


def voronoi_assign(x, t: Tessellation) -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("voronoi_assign takes a single point")
    return int(t.assign(x[None])[0])


def filter_batch(batch, t: Tessellation, j: int) -> np.ndarray:
    """Rows of ``batch`` falling in cell ``j``, original order kept."""
    if not 0 <= j < t.k:
        raise ContractError(f"cell index {j} out of range for k={t.k}")
    batch = np.asarray(batch, dtype=np.float64)
    return batch[t.assign(batch) == j]


def cell_masses(data: EmpiricalMeasure | np.ndarray, t: Tessellation) -> np.ndarray:
    points = data.points if isinstance(data, EmpiricalMeasure) else np.asarray(data, dtype=np.float64)
    if len(points) == 0:
        raise ContractError("cell masses of an empty dataset are undefined")
    return np.bincount(t.assign(points), minlength=t.k) / len(points)
