"""k-GANs training: prototypes, one Wasserstein GAN per Voronoi cell, mixture sampling.

Also holds the nonparametric k-generators variant, where each cell's
"generator" just resamples the training points of that cell; with the mean
update it is Lloyd's k-means, with the medoid update it is k-medoids.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from kgans.autodiff import AdamState, adam_step
from kgans.errors import ContractError
from kgans.gan import Gan, GanConfig, generator_sample, train_iteration
from kgans.partition import Tessellation, cell_masses, filter_batch
from kgans.transport import CostFunction, lp_cost

HISTORY_FIELDS = (
    "epoch",
    "iteration",
    "cell",
    "batch_size",
    "critic_loss",
    "wasserstein",
    "penalty",
    "generator_loss",
)


@dataclass
class TrainConfig:
    epochs: int = 10
    iterations: int = 1000
    batch_size: int = 100
    lr_prototype: float = 1e-3
    burn_in: int = 600
    init: str = "kmeans"
    seed: int = 0
    patience: int = 50
    parallel_epochs: bool = False

    def __post_init__(self):
        for name in ("epochs", "iterations", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.burn_in < 0 or self.burn_in >= self.epochs * self.iterations:
            raise ContractError("burn_in must be non-negative and below the total iteration count")
        if self.lr_prototype < 0:
            raise ContractError("lr_prototype must be non-negative")
        if self.init not in ("kmeans", "uniform"):
            raise ContractError(f"init must be 'kmeans' or 'uniform', got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lloyd(data: np.ndarray, centers: np.ndarray, tol: float = 1e-6, max_iter: int = 300, rng=None) -> np.ndarray:
    """Squared-Euclidean k-means from the given centers; empty clusters jump to a random point."""
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = np.array(centers, dtype=np.float64)
    for _ in range(max_iter):
        d = ((data[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = np.argmin(d, axis=1)
        new = centers.copy()
        for j in range(len(centers)):
            members = data[assign == j]
            new[j] = members.mean(axis=0) if len(members) else data[rng.integers(len(data))]
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift <= tol:
            break
    return centers


def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d = np.min(((data[:, None, :] - np.asarray(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d.sum()
        idx = rng.integers(len(data)) if total == 0 else rng.choice(len(data), p=d / total)
        centers.append(data[idx])
    return np.asarray(centers)


def init_prototypes(data, k: int, strategy: str = "kmeans", seed=0) -> np.ndarray:
    """Starting prototypes: k-means (k-means++ seeding, then Lloyd) or uniform on [-1, 1]^d."""
    data = np.asarray(data, dtype=np.float64)
    if k < 1 or k > len(data):
        raise ContractError(f"need 1 <= k <= N, got k={k}, N={len(data)}")
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        return rng.uniform(-1.0, 1.0, size=(k, data.shape[1]))
    if strategy == "kmeans":
        return lloyd(data, _kmeans_pp(data, k, rng), rng=rng)
    raise ContractError(f"unknown prototype init strategy {strategy!r}")


@dataclass
class Ensemble:
    prototypes: np.ndarray
    gans: list[Gan]
    cost: CostFunction
    weights: np.ndarray
    proto_opts: list[AdamState]

    def __post_init__(self):
        k = len(self.prototypes)
        if k < 1 or len(self.gans) != k or len(self.weights) != k or len(self.proto_opts) != k:
            raise ContractError("prototypes, GANs, weights and optimizer states must all have length k")

    @property
    def k(self) -> int:
        return len(self.prototypes)

    def tessellation(self) -> Tessellation:
        return Tessellation(self.prototypes, self.cost)


def prototype_step(ensemble: Ensemble, j: int, n_samples: int, seed=None) -> np.ndarray:
    """One Adam step on prototype j against samples of generator j (generator frozen)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    samples = generator_sample(ensemble.gans[j].generator, n_samples, rng)
    grad = ensemble.cost.grad_y(samples, ensemble.prototypes[j])
    y = ensemble.prototypes[j].copy()
    adam_step({"y": y}, {"y": grad}, ensemble.proto_opts[j])
    ensemble.prototypes[j] = y
    return y


def cell_seed_sequences(seed: int, prototypes: np.ndarray) -> list[np.random.SeedSequence]:
    """One random stream per cell, keyed by the cell's starting prototype.

    Tying the stream to the prototype coordinates rather than the cell index
    makes the whole run equivariant under a permutation of the initial
    prototypes.
    """
    seen: Counter = Counter()
    out = []
    for y in np.asarray(prototypes, dtype=np.float64):
        digest = hashlib.sha256(y.tobytes()).digest()
        key = int.from_bytes(digest[:8], "little")
        out.append(np.random.SeedSequence([int(seed), key, seen[key]]))
        seen[key] += 1
    return out


@dataclass
class KGansTrainer:
    """Resumable state of a k-GANs run; :func:`run_kgans` drives it to completion."""

    data: np.ndarray
    config: TrainConfig
    gan_config: GanConfig
    ensemble: Ensemble
    rngs: list[np.random.Generator]
    epoch: int = 0
    steps: list[int] = field(default_factory=list)
    empty_streak: list[int] = field(default_factory=list)
    reseeds: list[int] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    trajectory: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        data,
        config: TrainConfig,
        gan_config: GanConfig,
        cost: CostFunction | None = None,
        k: int = 1,
        prototypes=None,
    ) -> KGansTrainer:
        data = np.asarray(data, dtype=np.float64)
        if prototypes is None:
            prototypes = init_prototypes(data, k, config.init, config.seed)
        prototypes = np.array(prototypes, dtype=np.float64, ndmin=2)
        k = len(prototypes)
        if prototypes.shape[1] != data.shape[1] or gan_config.data_dim != data.shape[1]:
            raise ContractError("data, prototype and generator dimensions must agree")
        seqs = cell_seed_sequences(config.seed, prototypes)
        rngs = [np.random.default_rng(s) for s in seqs]
        gans = [Gan.init(gan_config, r) for r in rngs]
        cost = cost if cost is not None else lp_cost(2)
        ens = Ensemble(
            prototypes.copy(),
            gans,
            cost,
            cell_masses(data, Tessellation(prototypes, cost)),
            [AdamState(lr=config.lr_prototype) for _ in range(k)],
        )
        return cls(data, config, gan_config, ens, rngs, 0, [0] * k, [0] * k, [0] * k, [], [prototypes.copy()])

    @property
    def done(self) -> bool:
        return self.epoch >= self.config.epochs

    def _train_cell(self, j: int, tess: Tessellation, prototype_updates: bool) -> list[dict]:
        cfg = self.config
        ens = self.ensemble
        rng = self.rngs[j]
        gan = ens.gans[j]
        n = len(self.data)
        rows = []
        for _ in range(cfg.iterations):
            batch = self.data[rng.integers(n, size=cfg.batch_size)]
            sub = batch if ens.k == 1 else filter_batch(batch, tess, j)
            self.steps[j] += 1
            row = {"epoch": self.epoch, "iteration": self.steps[j], "cell": j, "batch_size": len(sub)}
            if len(sub) == 0:
                self.empty_streak[j] += 1
                if self.empty_streak[j] >= cfg.patience:
                    self._reseed(j, rng)
                    tess = ens.tessellation() if prototype_updates else tess
                row.update(critic_loss=math.nan, wasserstein=math.nan, penalty=math.nan, generator_loss=math.nan)
            else:
                self.empty_streak[j] = 0
                row.update(train_iteration(gan, sub, rng))
                if prototype_updates and self.steps[j] > cfg.burn_in:
                    prototype_step(ens, j, cfg.batch_size, rng)
                    tess = ens.tessellation()
            for d, v in enumerate(ens.prototypes[j]):
                row[f"y{d}"] = float(v)
            rows.append(row)
        return rows

    def _reseed(self, j: int, rng: np.random.Generator) -> None:
        self.ensemble.prototypes[j] = self.data[rng.integers(len(self.data))]
        self.ensemble.proto_opts[j].reset()
        self.empty_streak[j] = 0
        self.reseeds[j] += 1

    def run_epoch(self) -> None:
        ens = self.ensemble
        if not self.config.parallel_epochs:
            for j in range(ens.k):
                self.history.extend(self._train_cell(j, ens.tessellation(), True))
        else:
            frozen = ens.tessellation()
            start = list(self.steps)
            with ThreadPoolExecutor(max_workers=ens.k) as pool:
                results = list(pool.map(lambda j: self._train_cell(j, frozen, False), range(ens.k)))
            for j, rows in enumerate(results):
                eligible = max(0, self.steps[j] - max(start[j], self.config.burn_in))
                for _ in range(eligible):
                    prototype_step(ens, j, self.config.batch_size, self.rngs[j])
                self.history.extend(rows)
        self.epoch += 1
        ens.weights = cell_masses(self.data, ens.tessellation())
        self.trajectory.append(ens.prototypes.copy())

    def run(self) -> Ensemble:
        while not self.done:
            self.run_epoch()
        return self.ensemble

    def state_dict(self) -> dict:
        ens = self.ensemble
        return {
            "config": self.config.to_dict(),
            "gan_config": self.gan_config.to_dict(),
            "epoch": self.epoch,
            "steps": list(self.steps),
            "empty_streak": list(self.empty_streak),
            "reseeds": list(self.reseeds),
            "prototypes": ens.prototypes.tolist(),
            "weights": ens.weights.tolist(),
            "proto_opts": [o.state_dict() for o in ens.proto_opts],
            "gans": [g.state_dict() for g in ens.gans],
            "rngs": [r.bit_generator.state for r in self.rngs],
            "trajectory": [t.tolist() for t in self.trajectory],
        }

    @classmethod
    def from_state_dict(cls, state: dict, data, cost: CostFunction | None = None, history=None) -> KGansTrainer:
        rngs = []
        for s in state["rngs"]:
            r = np.random.default_rng()
            r.bit_generator.state = s
            rngs.append(r)
        ens = Ensemble(
            np.asarray(state["prototypes"], dtype=np.float64),
            [Gan.from_state_dict(g) for g in state["gans"]],
            cost if cost is not None else lp_cost(2),
            np.asarray(state["weights"], dtype=np.float64),
            [AdamState.from_state_dict(o) for o in state["proto_opts"]],
        )
        return cls(
            np.asarray(data, dtype=np.float64),
            TrainConfig(**state["config"]),
            GanConfig(**state["gan_config"]),
            ens,
            rngs,
            state["epoch"],
            list(state["steps"]),
            list(state["empty_streak"]),
            list(state["reseeds"]),
            list(history or []),
            [np.asarray(t) for t in state["trajectory"]],
        )


def run_kgans(
    data,
    config: TrainConfig,
    gan_config: GanConfig,
    cost: CostFunction | None = None,
    k: int = 1,
    prototypes=None,
) -> tuple[Ensemble, KGansTrainer]:
    """Train k GANs jointly with their prototypes; returns the ensemble and the finished trainer.

    The trainer carries the per-iteration ``history`` rows and the prototype
    ``trajectory`` (one snapshot per epoch, starting with the initial one).
    """
    trainer = KGansTrainer.create(data, config, gan_config, cost, k, prototypes)
    return trainer.run(), trainer


def sample_ensemble(ensemble: Ensemble, n: int, seed=None, return_cells: bool = False):
    """Mixture draw: pick cell j with probability w_j, then sample generator j."""
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if ensemble.k == 1:
        out = generator_sample(ensemble.gans[0].generator, n, rng)
        cells = np.zeros(n, dtype=np.intp)
    else:
        w = np.asarray(ensemble.weights, dtype=np.float64)
        cells = rng.choice(ensemble.k, size=n, p=w / w.sum())
        out = np.empty((n, ensemble.prototypes.shape[1]))
        for j in range(ensemble.k):
            idx = np.flatnonzero(cells == j)
            if len(idx):
                out[idx] = generator_sample(ensemble.gans[j].generator, len(idx), rng)
    return (out, cells) if return_cells else out


@dataclass
class CellSampler:
    """Uniform resampling of the training points that fell in one cell."""

    points: np.ndarray

    def sample(self, n: int, seed=None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self.points[rng.integers(len(self.points), size=n)]


@dataclass
class KGeneratorsResult:
    prototypes: np.ndarray
    assignment: np.ndarray
    samplers: list[CellSampler]
    trajectory: list[np.ndarray]
    objective: list[float]


def _medoid(members: np.ndarray, cost: CostFunction, chunk: int = 512) -> np.ndarray:
    # exact argmin over members; lowest index wins ties
    totals = np.concatenate(
        [cost.pairwise(members, members[s : s + chunk]).sum(axis=0) for s in range(0, len(members), chunk)]
    )
    return members[int(np.argmin(totals))]


def quantization_cost(data: np.ndarray, prototypes: np.ndarray, cost: CostFunction) -> float:
    """Mean cost from each point to its nearest prototype."""
    return float(np.mean(np.min(cost.pairwise(data, prototypes), axis=1)))


def run_kgenerators(
    data,
    k: int,
    cost: CostFunction | None = None,
    iters: int = 100,
    seed=0,
    rule: str = "medoid",
    prototypes=None,
) -> KGeneratorsResult:
    """Alternate nearest-prototype assignment with a per-cell prototype update.

    ``rule="medoid"`` moves each prototype to the cell member with the least
    summed cost to the others; ``rule="mean"`` moves it to the cell mean
    (the right update for squared Euclidean cost).  Stops early once the
    prototypes stop moving.  Starting prototypes default to k distinct data
    points chosen at random.
    """
    data = np.asarray(data, dtype=np.float64)
    cost = cost if cost is not None else lp_cost(2)
    if not 1 <= k <= len(data):
        raise ContractError(f"need 1 <= k <= N, got k={k}, N={len(data)}")
    if rule not in ("medoid", "mean"):
        raise ContractError(f"rule must be 'medoid' or 'mean', got {rule!r}")
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = data[rng.choice(len(data), size=k, replace=False)]
    protos = np.array(prototypes, dtype=np.float64, ndmin=2)
    trajectory = [protos.copy()]
    objective = [quantization_cost(data, protos, cost)]
    assign = Tessellation(protos, cost).assign(data)
    for _ in range(iters):
        new = protos.copy()
        for j in range(len(protos)):
            members = data[assign == j]
            if len(members) == 0:
                new[j] = data[rng.integers(len(data))]
            elif rule == "mean":
                new[j] = members.mean(axis=0)
            else:
                new[j] = _medoid(members, cost)
        moved = not np.array_equal(new, protos)
        protos = new
        if not moved:
            break
        trajectory.append(protos.copy())
        assign = Tessellation(protos, cost).assign(data)
        objective.append(quantization_cost(data, protos, cost))
    samplers = [CellSampler(data[assign == j]) for j in range(len(protos))]
    return KGeneratorsResult(protos, assign, samplers, trajectory, objective)
