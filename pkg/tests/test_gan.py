import numpy as np
import pytest

from kgans.autodiff import AdamState, Layer, MlpParams, Tape, adam_step, backward
from kgans.errors import ContractError
from kgans.gan import (
    Critic,
    Gan,
    GanConfig,
    Generator,
    critic_wasserstein_loss,
    generator_sample,
    lipschitz_penalty,
    train_critic_step,
    train_generator_step,
    train_iteration,
)


def linear_critic(weights, bias=0.0):
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return Critic(MlpParams([Layer(w, np.array([float(bias)]), "linear")]))


def snapshot(params):
    return {k: v.tobytes() for k, v in {**params.named_parameters(), **params.buffers()}.items()}


def zero_generator(cfg):
    gen = Generator.init(cfg, np.random.default_rng(0))
    for layer in gen.params.layers:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    return gen


def test_zero_generator_outputs_sigmoid_midpoint():
    gen = zero_generator(GanConfig(output_low=0.0, output_high=1.0))
    assert np.all(generator_sample(gen, 8, seed=1) == 0.5)
    gen = zero_generator(GanConfig())
    assert np.all(generator_sample(gen, 8, seed=1) == 0.0)


def test_sampling_is_seed_deterministic():
    gen = Generator.init(GanConfig(), np.random.default_rng(3))
    a, b = generator_sample(gen, 50, seed=7), generator_sample(gen, 50, seed=7)
    assert a.tobytes() == b.tobytes() and a.shape == (50, 2)


def test_sample_count_checked():
    with pytest.raises(ContractError):
        generator_sample(Generator.init(GanConfig(), np.random.default_rng(0)), 0)


def test_generator_architecture():
    gen = Generator.init(GanConfig(), np.random.default_rng(0))
    shapes = [l.weight.shape for l in gen.params.layers]
    assert shapes == [(10, 32), (32, 16), (16, 8), (8, 2)]
    assert [l.batch_norm for l in gen.params.layers] == [True, True, False, False]
    assert [l.activation for l in gen.params.layers] == ["leaky_relu"] * 3 + ["sigmoid"]
    critic = Critic.init(GanConfig(), np.random.default_rng(0))
    assert [l.weight.shape for l in critic.params.layers] == [(2, 16), (16, 8), (8, 1)]
    assert critic.params.layers[-1].activation == "linear"


class TestWassersteinLoss:
    def test_identical_batches(self):
        critic = Critic.init(GanConfig(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(20, 2))
        assert critic_wasserstein_loss(critic, x, x) == 0.0

    def test_constant_critic(self):
        critic = linear_critic([0.0, 0.0], bias=3.0)
        rng = np.random.default_rng(2)
        assert critic_wasserstein_loss(critic, rng.normal(size=(5, 2)), rng.normal(size=(9, 2))) == 0.0

    def test_identity_critic_reads_mean_gap(self):
        critic = linear_critic([1.0])
        real = np.array([[-1.0], [1.0]])
        fake = np.array([[1.0], [3.0]])
        assert critic_wasserstein_loss(critic, real, fake) == pytest.approx(2.0)
        t = Tape()
        assert float(critic_wasserstein_loss(critic, real, fake, tape=t).value) == pytest.approx(2.0)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(4)
        critic = Critic.init(GanConfig(), rng)
        real, fake = rng.normal(size=(13, 2)), rng.normal(size=(21, 2))
        before = critic_wasserstein_loss(critic, real, fake)
        critic.params.layers[-1].bias += 17.25
        assert critic_wasserstein_loss(critic, real, fake) == pytest.approx(before, abs=1e-9)

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            critic_wasserstein_loss(linear_critic([1.0]), np.zeros((0, 1)), np.ones((2, 1)))


class TestPenalty:
    def pairs(self, dim=1, n=30, seed=0):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(n, dim)), rng.normal(size=(n, dim))

    def test_constant_critic(self):
        assert lipschitz_penalty(linear_critic([0.0], 5.0), self.pairs(), 10.0) == 0.0

    def test_one_lipschitz(self):
        assert lipschitz_penalty(linear_critic([1.0]), self.pairs(), 10.0) == pytest.approx(0.0, abs=1e-12)

    def test_three_x(self):
        assert lipschitz_penalty(linear_critic([3.0]), self.pairs(), 10.0) == pytest.approx(20.0, abs=1e-9)

    def test_affine_2d_below_one(self):
        w = np.array([0.6, -0.8])
        assert lipschitz_penalty(linear_critic(w, 2.0), self.pairs(dim=2), 4.0) == pytest.approx(0.0, abs=1e-12)

    def test_literal_mode_ignores_distance(self):
        xs, ys = np.array([[0.0], [0.0]]), np.array([[2.0], [0.25]])
        # |f(x)-f(y)| = 6 and 0.75 for f = 3x
        assert lipschitz_penalty(linear_critic([3.0]), (xs, ys), 1.0, mode="literal") == pytest.approx(2.5)

    def test_coincident_pairs_are_skipped(self):
        x = np.ones((4, 1))
        assert lipschitz_penalty(linear_critic([3.0]), (x, x), 10.0) == 0.0
        assert lipschitz_penalty(linear_critic([3.0]), x, 10.0, rng=np.random.default_rng(0)) == 0.0

    def test_pairs_from_batch(self):
        batch = np.random.default_rng(3).normal(size=(25, 1))
        got = lipschitz_penalty(linear_critic([3.0]), batch, 10.0, rng=np.random.default_rng(1))
        assert got == pytest.approx(20.0)

    def test_penalty_descent_flattens_steep_critic(self):
        rng = np.random.default_rng(0)
        critic = Critic.init(GanConfig(data_dim=1), rng)
        for layer in critic.params.layers:
            layer.weight *= 4.0
        probe = np.linspace(-2, 2, 401).reshape(-1, 1)

        def steepest():
            return float(np.max(np.abs(np.diff(critic(probe)[:, 0])) / 0.01))

        opt = AdamState(lr=1e-2)
        start = steepest()
        for _ in range(200):
            t = Tape()
            pen = lipschitz_penalty(critic, rng.normal(size=(64, 1)), 10.0, rng=rng, tape=t, prefix="")
            adam_step(critic.params.named_parameters(), backward(t, pen), opt)
        assert start > 2.0
        assert steepest() < 0.5 * start
        assert lipschitz_penalty(critic, rng.normal(size=(64, 1)), 10.0, rng=rng) < 1e-2


def small_gan(seed=0, **kw):
    cfg = GanConfig(**{"data_dim": 1, "batch_size": 32, **kw})
    return Gan.init(cfg, np.random.default_rng(seed))


def test_critic_step_leaves_generator_untouched():
    gan = small_gan()
    before = snapshot(gan.generator.params)
    train_critic_step(gan, np.random.default_rng(1).normal(size=(20, 1)), seed=2)
    assert snapshot(gan.generator.params) == before


def test_generator_step_leaves_critic_untouched():
    gan = small_gan()
    before = snapshot(gan.critic.params)
    train_generator_step(gan, seed=2)
    assert snapshot(gan.critic.params) == before


def test_zero_learning_rates_freeze_parameters():
    gan = small_gan(lr_generator=0.0, lr_critic=0.0)
    g_before = {k: v.tobytes() for k, v in gan.generator.params.named_parameters().items()}
    c_before = snapshot(gan.critic.params)
    rng = np.random.default_rng(0)
    for _ in range(3):
        train_iteration(gan, rng.normal(size=(20, 1)), rng)
    assert {k: v.tobytes() for k, v in gan.generator.params.named_parameters().items()} == g_before
    assert snapshot(gan.critic.params) == c_before


def test_critic_gap_grows_with_frozen_generator():
    gan = small_gan(seed=1, lr_generator=0.0, lr_critic=1e-3)
    rng = np.random.default_rng(5)
    gaps = []
    for _ in range(500):
        real = rng.normal(-0.8, 0.05, size=(32, 1))
        gaps.append(train_critic_step(gan, real, rng)["wasserstein"])
    smooth = np.convolve(gaps, np.ones(50) / 50, mode="valid")
    assert smooth[-1] > smooth[0]
    assert np.mean(np.diff(smooth[::50]) > 0) >= 0.7


def test_generator_learns_tight_cluster():
    cfg = GanConfig(critic_steps=5)
    gan = Gan.init(cfg, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    center = np.array([0.3, -0.2])
    for _ in range(1500):
        real = center + rng.uniform(-0.05, 0.05, size=(50, 2))
        train_iteration(gan, real, rng)
    samples = generator_sample(gan.generator, 1000, seed=4)
    assert np.linalg.norm(samples.mean(axis=0) - center) < 0.1


def test_gan_state_round_trip():
    gan = small_gan()
    train_iteration(gan, np.random.default_rng(0).normal(size=(10, 1)), np.random.default_rng(1))
    back = Gan.from_state_dict(gan.state_dict())
    assert snapshot(back.generator.params) == snapshot(gan.generator.params)
    assert back.critic_opt.step == gan.critic_opt.step == gan.config.critic_steps


def test_config_validation():
    with pytest.raises(ContractError):
        GanConfig(penalty="strict")
    with pytest.raises(ContractError):
        GanConfig(latent_dim=0)
