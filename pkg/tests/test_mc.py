import math

import numpy as np
import pytest

from ppltape.autodiff import Parameter
from ppltape.data import make_logreg
from ppltape.dists import Bernoulli, Empirical, Normal
from ppltape.errors import ConfigError, StoreFullError
from ppltape.infer import FeedSlot, InferenceProblem
from ppltape.mc import HMC, SGLD, MetropolisHastings, leapfrog
from ppltape.models import gmm, logreg, normal_normal, normal_normal_posterior


def store(name, rows, shape=(), init=0.0):
    return Empirical(Parameter(name, np.full((rows,) + shape, init), trainable=False))


def standard_normal_problem(rows, name="z"):
    def model(t):
        t.rv("z", Normal(0.0, 1.0))

    q = store(name, rows)
    return InferenceProblem(model, {"z": q}), q


def mcse(x, n_batches=50):
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    means = x[: len(x) // n_batches * n_batches].reshape(n_batches, -1).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batches)


def quadratic(q):
    return -0.5 * float(np.sum(q * q)), -q


class TestLeapfrog:
    def test_zero_steps_forbidden(self):
        with pytest.raises(ConfigError):
            leapfrog(np.zeros(1), np.ones(1), 0.1, 0, quadratic)
        problem, _ = standard_normal_problem(5)
        with pytest.raises(ConfigError):
            HMC(problem, n_steps=0)

    def test_reversible(self):
        q0, p0 = np.array([0.3, -1.2]), np.array([0.8, 0.5])
        q1, p1 = leapfrog(q0, p0, 0.1, 25, quadratic)
        q2, p2 = leapfrog(q1, -p1, 0.1, 25, quadratic)
        np.testing.assert_allclose(q2, q0, atol=1e-10)
        np.testing.assert_allclose(-p2, p0, atol=1e-10)

    def test_unit_jacobian(self):
        # central finite differences of the phase-space map (q, p) -> (q', p')
        x0 = np.array([0.4, -0.7])
        h = 1e-6
        J = np.zeros((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            plus = np.concatenate(leapfrog(x0[:1] + e[:1], x0[1:] + e[1:], 0.3, 7, quadratic))
            minus = np.concatenate(leapfrog(x0[:1] - e[:1], x0[1:] - e[1:], 0.3, 7, quadratic))
            J[:, j] = (plus - minus) / (2 * h)
        assert abs(np.linalg.det(J) - 1.0) <= 1e-8

    def test_dict_positions(self):
        q, p = leapfrog({"a": np.ones(2)}, {"a": np.zeros(2)}, 0.1, 3,
                        lambda d: (0.0, {"a": -d["a"]}))
        assert set(q) == {"a"} and q["a"].shape == (2,)


class TestHMC:
    def test_standard_normal_moments(self):
        # trajectories of length 0.5 leave successive draws correlated (about
        # cos 0.5), so the error is judged against the chain's own standard error
        problem, q = standard_normal_problem(5500)
        inf = HMC(problem, step_size=0.05, n_steps=10, seed=0)
        inf.run(5500)
        draws = q.samples()[500:]
        assert abs(draws.mean()) <= 3 * mcse(draws)
        assert abs(draws.var() - 1.0) <= 3 * mcse(draws ** 2)
        assert mcse(draws) < 0.1

    def test_tiny_step_accepts_everything(self):
        problem, _ = standard_normal_problem(1000)
        inf = HMC(problem, step_size=1e-4, n_steps=2, seed=1)
        inf.run(1000)
        assert inf.acceptance_rate >= 0.999

    def test_cursor_semantics(self):
        problem, q = standard_normal_problem(10, name="s")
        inf = HMC(problem, seed=2)
        inf.run(4)
        assert q.t == 4
        assert q.samples().shape == (4,)
        np.testing.assert_array_equal(q.params.value[4:], 0.0)

    def test_store_full(self):
        problem, _ = standard_normal_problem(3)
        inf = HMC(problem, seed=3)
        inf.run(3)
        with pytest.raises(StoreFullError):
            inf.update()

    def test_discrete_latent_rejected(self):
        problem = InferenceProblem(gmm(4, 2, 1), {"z": store("z", 5, (4,))},
                                   {"x": np.zeros((4, 1)), "beta": np.zeros((2, 1))})
        with pytest.raises(ConfigError, match="continuous latents only"):
            HMC(problem).initialize()

    def test_store_shape_checked(self):
        problem = InferenceProblem(normal_normal(1), {"z": store("z", 5, (3,))},
                                   {"x": np.ones(1)})
        with pytest.raises(ConfigError, match="event shape"):
            HMC(problem).initialize()


class TestSGLD:
    def test_zero_step_keeps_position(self):
        problem, q = standard_normal_problem(5)
        q.params.assign(np.full(5, 0.7))
        inf = SGLD(problem, step_size=0.0, seed=0)
        inf.run(5)
        np.testing.assert_array_equal(q.samples(), 0.7)

    def test_normal_posterior_mean(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0.8, 1.0, size=20)
        mean, _ = normal_normal_posterior(x)
        q = store("z", 20_000)
        inf = SGLD(InferenceProblem(normal_normal(20), {"z": q}, {"x": x}), step_size=1e-3,
                   seed=1)
        inf.run(20_000)
        assert abs(q.samples(burn_in=0.1).mean() - mean) <= 0.05

    def test_decay_validation_and_schedule(self):
        problem, _ = standard_normal_problem(5)
        with pytest.raises(ConfigError):
            SGLD(problem, decay=(0.1, 1.0, 0.4))
        inf = SGLD(problem, decay=(0.1, 1.0, 1.0))
        inf.initialize()
        assert inf.current_step_size() == pytest.approx(0.1)
        inf.update()
        assert inf.current_step_size() == pytest.approx(0.05)

    def test_scale_makes_minibatch_gradients_unbiased(self):
        N, M, D = 1000, 100, 2
        data = make_logreg(N, D, seed=4)
        X, y = data["X"], data["y"]

        # full-batch HMC oracle
        full = store("beta/hmc", 1500, (D,))
        hmc = HMC(InferenceProblem(logreg(X, prior_sd=0.3), {"beta": full}, {"y": y}),
                  step_size=0.03, n_steps=10, seed=5)
        hmc.run(1500)
        oracle = full.samples(burn_in=0.2).mean(axis=0)

        def sgld_mean(scaled):
            xs, ys = FeedSlot("X", (M, D)), FeedSlot("y", (M,))
            q = store("beta/sgld", 6000, (D,))
            problem = InferenceProblem(logreg(xs, prior_sd=0.3), {"beta": q}, {"y": ys},
                                       scale={"y": N / M} if scaled else None, slots=[xs])
            rng = np.random.default_rng(6)

            def feeds(_):
                idx = rng.choice(N, M, replace=False)
                return {xs: X[idx], ys: y[idx]}

            SGLD(problem, step_size=1e-3, seed=7).run(6000, feeds=feeds)
            return q.samples(burn_in=0.2).mean(axis=0)

        assert np.max(np.abs(sgld_mean(True) - oracle)) <= 0.05
        assert np.max(np.abs(sgld_mean(False) - oracle)) > 0.05


class TestMetropolisHastings:
    def test_standard_normal_mean(self):
        # four independent chains of 10^4 steps, pooled
        means, errors = [], []
        for seed in range(4):
            problem, q = standard_normal_problem(10_000)
            MetropolisHastings(problem, proposal_sd=1.0, seed=seed).run(10_000)
            means.append(q.samples().mean())
            errors.append(mcse(q.samples()))
        pooled, pooled_se = np.mean(means), math.sqrt(np.sum(np.square(errors))) / 4
        assert abs(pooled) <= min(0.08, 3 * pooled_se)

    def test_small_proposal_accepts(self):
        problem, _ = standard_normal_problem(500)
        inf = MetropolisHastings(problem, proposal_sd=1e-5, seed=1)
        inf.run(500)
        assert inf.acceptance_rate >= 0.99

    def test_two_state_detailed_balance(self):
        def model(t):
            t.rv("b", Bernoulli(probs=0.3))

        q = store("b", 30_000)
        MetropolisHastings(InferenceProblem(model, {"b": q}), seed=2).run(30_000)
        assert abs(q.samples().mean() - 0.3) <= 0.01

    def test_bad_proposal(self):
        problem, _ = standard_normal_problem(5)
        for sd in (0.0, math.inf):
            with pytest.raises(ConfigError):
                MetropolisHastings(problem, proposal_sd=sd)
