"""A single Wasserstein GAN: generator, critic and their training steps.

Sign convention: the critic estimate of the transport distance is
``E f(fake) - E f(real)``.  The critic maximises it minus the Lipschitz
penalty and the generator minimises ``E f(G(z))``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from kgans.autodiff import (
    LEAKY_SLOPE,
    AdamState,
    MlpParams,
    Tape,
    Tensor,
    adam_step,
    backward,
    forward,
)
from kgans.errors import ContractError

PAIR_RESAMPLE_CAP = 10


@dataclass
class GanConfig:
    latent_dim: int = 10
    data_dim: int = 2
    generator_hidden: tuple[int, ...] = (32, 16, 8)
    generator_batch_norm: tuple[bool, ...] = (True, True, False)
    critic_hidden: tuple[int, ...] = (16, 8)
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    critic_steps: int = 5
    penalty_coef: float = 10.0
    penalty: str = "ratio"
    batch_size: int = 100
    output_low: float = -1.0
    output_high: float = 1.0
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        self.generator_hidden = tuple(int(v) for v in self.generator_hidden)
        self.generator_batch_norm = tuple(bool(v) for v in self.generator_batch_norm)
        self.critic_hidden = tuple(int(v) for v in self.critic_hidden)
        for name in ("latent_dim", "data_dim", "critic_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("lr_generator", "lr_critic", "penalty_coef"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if any(h < 1 for h in self.generator_hidden + self.critic_hidden):
            raise ContractError("layer sizes must be positive")
        if len(self.generator_batch_norm) != len(self.generator_hidden):
            raise ContractError("generator_batch_norm needs one flag per hidden layer")
        if self.penalty not in ("ratio", "literal"):
            raise ContractError(f"penalty must be 'ratio' or 'literal', got {self.penalty!r}")
        if not self.output_high > self.output_low:
            raise ContractError("output_high must exceed output_low")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Generator:
    """Pushes standard-normal latents through an MLP with a sigmoid head rescaled to a box."""

    latent_dim: int
    params: MlpParams
    low: float = -1.0
    high: float = 1.0

    @classmethod
    def init(cls, config: GanConfig, rng: np.random.Generator) -> Generator:
        sizes = [config.latent_dim, *config.generator_hidden, config.data_dim]
        acts = ["leaky_relu"] * len(config.generator_hidden) + ["sigmoid"]
        bn = [*config.generator_batch_norm, False]
        params = MlpParams.init(sizes, acts, bn, rng, leaky_slope=config.leaky_slope)
        return cls(config.latent_dim, params, config.output_low, config.output_high)

    @property
    def data_dim(self) -> int:
        return self.params.output_dim

    def latents(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim))

    def decode(self, z, mode: str = "eval", tape: Tape | None = None, update_stats: bool = False, prefix=""):
        out = forward(self.params, z, mode, tape, update_stats=update_stats, prefix=prefix)
        return out * (self.high - self.low) + self.low


@dataclass
class Critic:
    params: MlpParams

    @classmethod
    def init(cls, config: GanConfig, rng: np.random.Generator) -> Critic:
        sizes = [config.data_dim, *config.critic_hidden, 1]
        acts = ["leaky_relu"] * len(config.critic_hidden) + ["linear"]
        return cls(MlpParams.init(sizes, acts, None, rng, leaky_slope=config.leaky_slope))

    def __call__(self, x, tape: Tape | None = None, prefix: str | None = None):
        """Scores of shape (B, 1). On a tape the weights are constants unless ``prefix`` is set."""
        if isinstance(x, Tensor):
            tape = x.tape
        return forward(self.params, x, "eval", tape, prefix=prefix)


@dataclass
class Gan:
    config: GanConfig
    generator: Generator
    critic: Critic
    gen_opt: AdamState = field(default_factory=AdamState)
    critic_opt: AdamState = field(default_factory=AdamState)

    @classmethod
    def init(cls, config: GanConfig, rng: np.random.Generator) -> Gan:
        return cls(
            config,
            Generator.init(config, rng),
            Critic.init(config, rng),
            AdamState(lr=config.lr_generator),
            AdamState(lr=config.lr_critic),
        )

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "generator": self.generator.params.state_dict(),
            "critic": self.critic.params.state_dict(),
            "gen_opt": self.gen_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> Gan:
        config = GanConfig(**state["config"])
        return cls(
            config,
            Generator(config.latent_dim, MlpParams.from_state_dict(state["generator"]), config.output_low, config.output_high),
            Critic(MlpParams.from_state_dict(state["critic"])),
            AdamState.from_state_dict(state["gen_opt"]),
            AdamState.from_state_dict(state["critic_opt"]),
        )


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generator_sample(gen: Generator, n: int, seed=None, mode: str = "eval") -> np.ndarray:
    """Draw ``n`` points. Eval mode reads batch-norm running statistics."""
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    rng = _rng(seed)
    return gen.decode(gen.latents(n, rng), mode=mode)


def critic_wasserstein_loss(critic: Critic, real_batch, fake_batch, tape: Tape | None = None):
    """``mean f(fake) - mean f(real)``; a float, or a Tensor when a tape is given."""
    real_n = len(real_batch.value if isinstance(real_batch, Tensor) else real_batch)
    fake_n = len(fake_batch.value if isinstance(fake_batch, Tensor) else fake_batch)
    if real_n == 0 or fake_n == 0:
        raise ContractError("both batches must be nonempty")
    if tape is None:
        return float(np.mean(critic(np.asarray(fake_batch))) - np.mean(critic(np.asarray(real_batch))))
    return critic(fake_batch, tape).mean() - critic(real_batch, tape).mean()


def sample_pairs(real_batch: np.ndarray, rng: np.random.Generator, n_pairs: int | None = None):
    """I.i.d. pairs from the batch; coincident pairs are redrawn a few times, then dropped."""
    real_batch = np.asarray(real_batch, dtype=np.float64)
    n = len(real_batch)
    n_pairs = n if n_pairs is None else n_pairs
    i = rng.integers(n, size=n_pairs)
    j = rng.integers(n, size=n_pairs)
    for _ in range(PAIR_RESAMPLE_CAP):
        bad = np.all(real_batch[i] == real_batch[j], axis=1)
        if not bad.any():
            break
        j[bad] = rng.integers(n, size=int(bad.sum()))
    keep = ~np.all(real_batch[i] == real_batch[j], axis=1)
    return real_batch[i[keep]], real_batch[j[keep]]


def _penalty_terms(fx: Tensor, fy: Tensor, x: np.ndarray, y: np.ndarray, coef: float, mode: str) -> Tensor:
    gap = (fx - fy).abs()
    if mode == "ratio":
        gap = gap * (1.0 / np.linalg.norm(x - y, axis=1, keepdims=True))
    return (gap - 1.0).relu().mean() * coef


def lipschitz_penalty(
    critic: Critic,
    pair_batch,
    penalty_coef: float,
    mode: str = "ratio",
    rng=None,
    tape: Tape | None = None,
    prefix: str | None = None,
):
    """Soft Lipschitz penalty ``coef * mean relu(|f(x) - f(y)| / |x - y| - 1)``.

    ``pair_batch`` is either an ``(xs, ys)`` tuple of matched rows or a plain
    batch of real points from which pairs are drawn with ``rng``.  The
    ``literal`` mode drops the division by the distance.  Returns a float, or
    a Tensor on ``tape``; pass ``prefix`` to make the critic weights
    differentiable leaves on that tape.
    """
    if isinstance(pair_batch, tuple):
        xs, ys = (np.asarray(a, dtype=np.float64) for a in pair_batch)
        keep = ~np.all(xs == ys, axis=1)
        xs, ys = xs[keep], ys[keep]
    else:
        xs, ys = sample_pairs(pair_batch, _rng(rng))
    if len(xs) == 0:
        return 0.0 if tape is None else tape.constant(0.0)
    own = tape is None
    t = Tape() if own else tape
    f = critic(np.concatenate([xs, ys]), t, prefix=prefix)
    n = len(xs)
    out = _penalty_terms(f.rows(0, n), f.rows(n, 2 * n), xs, ys, penalty_coef, mode)
    return float(out.value) if own else out


def train_critic_step(gan: Gan, real_batch, seed=None) -> dict[str, float]:
    """One Adam step of the critic on ``W - penalty`` (ascent), generator held fixed."""
    real = np.asarray(real_batch, dtype=np.float64)
    if len(real) == 0:
        raise ContractError("real batch is empty")
    rng = _rng(seed)
    cfg = gan.config
    gen = gan.generator
    fake = gen.decode(gen.latents(cfg.batch_size, rng), mode="train", update_stats=False)
    xs, ys = sample_pairs(real, rng)

    tape = Tape()
    stacked = np.concatenate([real, fake, xs, ys])
    f = gan.critic(stacked, tape, prefix="")
    nr, nf, npair = len(real), len(fake), len(xs)
    f_real = f.rows(0, nr)
    f_fake = f.rows(nr, nr + nf)
    w = f_fake.mean() - f_real.mean()
    if npair:
        o = nr + nf
        pen = _penalty_terms(f.rows(o, o + npair), f.rows(o + npair, o + 2 * npair), xs, ys, cfg.penalty_coef, cfg.penalty)
        loss = pen - w
        pen_value = float(pen.value)
    else:
        loss = -w
        pen_value = 0.0
    grads = backward(tape, loss)
    adam_step(gan.critic.params.named_parameters(), grads, gan.critic_opt)
    return {"critic_loss": float(loss.value), "wasserstein": float(w.value), "penalty": pen_value}


def train_generator_step(gan: Gan, seed=None) -> dict[str, float]:
    """One Adam step of the generator on ``E f(G(z))``; the critic is read, never written."""
    rng = _rng(seed)
    gen = gan.generator
    tape = Tape()
    x = gen.decode(gen.latents(gan.config.batch_size, rng), mode="train", tape=tape, update_stats=True)
    loss = gan.critic(x, prefix=None).mean()
    grads = backward(tape, loss)
    adam_step(gen.params.named_parameters(), grads, gan.gen_opt)
    return {"generator_loss": float(loss.value)}


def train_iteration(gan: Gan, real_batch, rng: np.random.Generator) -> dict[str, float]:
    """``critic_steps`` critic updates on one real batch, then one generator update."""
    report = {}
    for _ in range(gan.config.critic_steps):
        report = train_critic_step(gan, real_batch, rng)
    report.update(train_generator_step(gan, rng))
    return report
