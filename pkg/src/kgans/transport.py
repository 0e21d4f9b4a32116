"""Transport costs, c-transforms, Laguerre cells and a dual solver for semi-discrete OT.

The continuous side is always an empirical measure (uniform mass on N
points), so cells are never built as polytopes: a point belongs to the cell
of whichever atom minimises ``c(x, y_j) - g_j``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from kgans.errors import ContractError, EvaluationError, ShapeError

Label = Hashable | None
Labeler = Callable[[np.ndarray], Label]


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _lp_power(diff: np.ndarray, p: float) -> np.ndarray:
    a = np.abs(diff)
    if p == 2:
        return np.sum(a * a, axis=-1)
    if p == 1:
        return np.sum(a, axis=-1)
    return np.sum(a**p, axis=-1)


def _lp_power_grad(diff: np.ndarray, p: float) -> np.ndarray:
    """d/d(diff) of sum |diff|^p, with the kink at 0 mapped to 0."""
    if p == 2:
        return 2.0 * diff
    a = np.abs(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = p * np.sign(diff) * np.where(a > 0, a ** (p - 1), 0.0)
    return g


@dataclass(frozen=True)
class CostFunction:
    """Transport cost ``c(x, y)``.

    Build instances with :func:`lp_cost`, :func:`feature_cost` or
    :func:`semi_supervised_cost` rather than calling the constructor.
    """

    kind: str
    p: float = 2.0
    feature_map: Callable[[np.ndarray], np.ndarray] | None = None
    base: CostFunction | None = None
    labeler: Labeler | None = None
    theta_same: float = 0.1
    theta_diff: float = 10.0
    theta_unlabeled: float = 1.0

    def __post_init__(self):
        if self.kind not in ("lp", "feature_lp", "semi_supervised"):
            raise ContractError(f"unknown cost kind {self.kind!r}")
        if self.kind in ("lp", "feature_lp") and not self.p > 0:
            raise ContractError(f"p must be positive, got {self.p}")
        if self.kind == "feature_lp" and self.feature_map is None:
            raise ContractError("feature_lp cost needs a feature map")
        if self.kind == "semi_supervised":
            if self.base is None or self.labeler is None:
                raise ContractError("semi_supervised cost needs a base cost and a labeler")
            for name in ("theta_same", "theta_diff", "theta_unlabeled"):
                if not getattr(self, name) > 0:
                    raise ContractError(f"{name} must be positive")

    def __call__(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1:
            raise ShapeError(f"points must share one dimension, got {x.shape} and {y.shape}")
        return float(self.pairwise(x[None], y[None])[0, 0])

    def pairwise(self, X, Y) -> np.ndarray:
        """(n, k) matrix of costs between every row of X and every row of Y."""
        X, Y = _as_points(X), _as_points(Y)
        if X.shape[1] != Y.shape[1]:
            raise ShapeError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        if self.kind == "lp":
            C = _lp_power(X[:, None, :] - Y[None, :, :], self.p)
        elif self.kind == "feature_lp":
            FX, FY = _as_points(self._features(X)), _as_points(self._features(Y))
            C = _lp_power(FX[:, None, :] - FY[None, :, :], self.p)
        else:
            C = self.base.pairwise(X, Y) * self._theta(X, Y)
        if not np.all(np.isfinite(C)):
            raise EvaluationError("cost evaluated to a non-finite value")
        return C

    def grad_y(self, X, y) -> np.ndarray:
        """Gradient in ``y`` of ``mean_i c(X_i, y)``."""
        X = _as_points(X)
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "lp":
            return -_lp_power_grad(X - y, self.p).mean(axis=0)
        if self.kind == "semi_supervised":
            # labels are held fixed; only the base cost moves with y
            theta = self._theta(X, y[None])[:, 0]
            per_point = np.stack([self.base.grad_y(x[None], y) for x in X])
            return (theta[:, None] * per_point).mean(axis=0)
        FX = _as_points(self._features(X))
        fy = self._features(y[None])[0]
        dfeat = -_lp_power_grad(FX - fy, self.p).mean(axis=0)
        return dfeat @ self._feature_jacobian(y)

    def _features(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.feature_map(X), dtype=np.float64)

    def _feature_jacobian(self, y: np.ndarray, h: float = 1e-6) -> np.ndarray:
        # central differences; the feature map is an opaque callable
        cols = []
        for i in range(y.size):
            e = np.zeros_like(y)
            e[i] = h
            cols.append((self._features((y + e)[None])[0] - self._features((y - e)[None])[0]) / (2 * h))
        return np.stack(cols, axis=1)

    def _theta(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        lx = [self.labeler(x) for x in X]
        ly = [self.labeler(y) for y in Y]
        out = np.empty((len(lx), len(ly)))
        for i, a in enumerate(lx):
            for j, b in enumerate(ly):
                if a is None or b is None:
                    out[i, j] = self.theta_unlabeled
                elif a == b:
                    out[i, j] = self.theta_same
                else:
                    out[i, j] = self.theta_diff
        return out


def lp_cost(p: float = 2.0) -> CostFunction:
    """``||x - y||_p ** p``."""
    return CostFunction("lp", p=float(p))


def feature_cost(feature_map: Callable[[np.ndarray], np.ndarray], p: float = 2.0) -> CostFunction:
    """``||f(x) - f(y)||_p ** p`` for a feature map acting row-wise on (n, d) arrays."""
    return CostFunction("feature_lp", p=float(p), feature_map=feature_map)


def semi_supervised_cost(
    base: CostFunction,
    labeler: Labeler,
    theta_same: float = 0.1,
    theta_diff: float = 10.0,
    theta_unlabeled: float = 1.0,
) -> CostFunction:
    """Scale ``base`` by a factor chosen from the labels of the two points."""
    return CostFunction(
        "semi_supervised",
        base=base,
        labeler=labeler,
        theta_same=theta_same,
        theta_diff=theta_diff,
        theta_unlabeled=theta_unlabeled,
    )


class NearestLabelLabeler:
    """Label lookup for the semi-supervised cost.

    Points that are exactly one of the dataset's points get that point's own
    label (possibly ``None``).  Any other point, such as a prototype or a
    generated sample, inherits the label of the closest labeled data point.
    """

    def __init__(self, points, labels: Sequence[Label]):
        self.points = np.asarray(points, dtype=np.float64)
        self.labels = list(labels)
        if len(self.labels) != len(self.points):
            raise ShapeError("need one label entry per point")
        self._exact = {p.tobytes(): l for p, l in zip(self.points, self.labels)}
        keep = [i for i, l in enumerate(self.labels) if l is not None]
        self._labeled = self.points[keep]
        self._labeled_values = [self.labels[i] for i in keep]

    def __call__(self, x) -> Label:
        x = np.asarray(x, dtype=np.float64)
        key = x.tobytes()
        if key in self._exact:
            return self._exact[key]
        if not self._labeled_values:
            return None
        d = np.sum((self._labeled - x) ** 2, axis=1)
        return self._labeled_values[int(np.argmin(d))]


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray
    dual_weights: np.ndarray = None

    def __post_init__(self):
        self.atoms = _as_points(self.atoms)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.dual_weights is None:
            self.dual_weights = np.zeros(len(self.atoms))
        self.dual_weights = np.asarray(self.dual_weights, dtype=np.float64)
        k = len(self.atoms)
        if k == 0:
            raise ContractError("a discrete measure needs at least one atom")
        if self.weights.shape != (k,) or self.dual_weights.shape != (k,):
            raise ShapeError("atoms, weights and dual weights must have matching length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError("weights must be a probability vector")

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass
class EmpiricalMeasure:
    points: np.ndarray
    labels: list | None = None

    def __post_init__(self):
        self.points = _as_points(self.points)
        if len(self.points) == 0:
            raise ContractError("empirical measure needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ContractError("empirical measure has non-finite coordinates")
        if self.labels is not None and len(self.labels) != len(self.points):
            raise ShapeError("labels must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)


def _check_duals(g, mu: DiscreteMeasure) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (len(mu.atoms),):
        raise ShapeError(f"expected {len(mu.atoms)} dual weights, got shape {g.shape}")
    return g


def c_transform(g, x, mu: DiscreteMeasure, c: CostFunction) -> float:
    """``min_j c(x, y_j) - g_j``."""
    g = _check_duals(g, mu)
    return float(np.min(c.pairwise(x, mu.atoms)[0] - g))


def laguerre_assign(x, mu: DiscreteMeasure, c: CostFunction) -> int:
    """Index of the Laguerre cell containing ``x`` (lowest index wins ties)."""
    return int(np.argmin(c.pairwise(x, mu.atoms)[0] - mu.dual_weights))


def laguerre_assign_batch(X, atoms, c: CostFunction, g=None, costs: np.ndarray | None = None) -> np.ndarray:
    C = c.pairwise(X, atoms) if costs is None else costs
    if g is not None:
        C = C - np.asarray(g, dtype=np.float64)
    return np.argmin(C, axis=1)


def dual_objective(g, nu: EmpiricalMeasure, mu: DiscreteMeasure, c: CostFunction, costs=None) -> float:
    """Mean c-transform over the data plus ``sum_j g_j w_j``."""
    g = _check_duals(g, mu)
    C = c.pairwise(nu.points, mu.atoms) if costs is None else costs
    return float(np.mean(np.min(C - g, axis=1)) + g @ mu.weights)


def cell_mass(g, nu: EmpiricalMeasure, mu: DiscreteMeasure, c: CostFunction, costs=None) -> np.ndarray:
    idx = laguerre_assign_batch(nu.points, mu.atoms, c, g, costs)
    return np.bincount(idx, minlength=len(mu.atoms)) / len(nu.points)


def dual_gradient(g, nu: EmpiricalMeasure, mu: DiscreteMeasure, c: CostFunction, costs=None) -> np.ndarray:
    """``w_j`` minus the data mass of Laguerre cell j."""
    g = _check_duals(g, mu)
    return mu.weights - cell_mass(g, nu, mu, c, costs)


class OTConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class DualSolution:
    dual_weights: np.ndarray
    value: float
    cell_masses: np.ndarray
    residual: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)


def solve_dual(
    nu: EmpiricalMeasure,
    mu: DiscreteMeasure,
    c: CostFunction,
    lr: float = 0.5,
    max_iters: int = 10_000,
    tol: float = 0.01,
    g0=None,
    patience: int = 50,
) -> DualSolution:
    """Gradient ascent on the dual weights until every cell holds its target mass.

    The step is ``lr`` to begin with and is halved whenever the cell masses
    keep changing for ``patience`` iterations without the residual
    improving; for an empirical measure the objective is piecewise linear,
    so a fixed step can cycle around the optimal region forever.  Steps that
    leave the masses unchanged are walking across one linear piece and do
    not count against the patience.  The iterate with the smallest
    residual is returned, gauge-fixed so that its first component is 0.
    """
    if np.any(mu.weights <= 0):
        raise ContractError("solve_dual needs strictly positive target weights")
    C = c.pairwise(nu.points, mu.atoms)
    g = np.zeros(len(mu.atoms)) if g0 is None else _check_duals(g0, mu).copy()
    g = g - g[0]
    best_g, best_res = g.copy(), math.inf
    step, stale, it = lr, 0, 0
    history = []
    prev = None
    for it in range(1, max_iters + 1):
        grad = mu.weights - cell_mass(g, nu, mu, c, C)
        res = float(np.max(np.abs(grad)))
        history.append(res)
        if res < best_res - 1e-15:
            best_g, best_res, stale = g.copy(), res, 0
        elif prev is not None and np.array_equal(grad, prev):
            pass  # same cells as last step: still walking across one linear piece
        else:
            stale += 1
            if stale >= patience:
                step *= 0.5
                stale = 0
                g, prev = best_g.copy(), None
                continue
        if res <= tol:
            break
        prev = grad
        g = g + step * grad
        g -= g[0]
    converged = best_res <= tol
    if not converged:
        warnings.warn(
            f"dual ascent stopped after {it} iterations with mass residual {best_res:.4g} > tol {tol:g}",
            OTConvergenceWarning,
            stacklevel=2,
        )
    return DualSolution(
        dual_weights=best_g,
        value=dual_objective(best_g, nu, mu, c, C),
        cell_masses=cell_mass(best_g, nu, mu, c, C),
        residual=best_res,
        iterations=it,
        converged=converged,
        history=history,
    )


def ot_exact_small(nu: EmpiricalMeasure, mu: DiscreteMeasure, c: CostFunction) -> float:
    """Exact semi-discrete OT cost by enumerating every admissible assignment.

    Each atom j must receive exactly ``N * w_j`` of the N data points, so the
    weights have to be multiples of ``1/N``.  Only meant for tiny inputs.
    """
    n, k = len(nu.points), len(mu.atoms)
    if n > 10:
        raise ContractError(f"exhaustive OT is limited to N <= 10 points, got {n}")
    counts = mu.weights * n
    rounded = np.rint(counts)
    if np.any(np.abs(counts - rounded) > 1e-9):
        raise ContractError(f"weights {mu.weights.tolist()} are not multiples of 1/N = 1/{n}")
    counts = rounded.astype(int)
    C = c.pairwise(nu.points, mu.atoms)
    remaining = counts.copy()
    best = math.inf

    # depth-first over multiset assignments; partial sums only grow since c >= 0
    def visit(i: int, partial: float) -> None:
        nonlocal best
        if partial >= best:
            return
        if i == n:
            best = partial
            return
        for j in range(k):
            if remaining[j]:
                remaining[j] -= 1
                visit(i + 1, partial + C[i, j])
                remaining[j] += 1

    visit(0, 0.0)
    return best / n
