"""Overhead benchmark: library HMC versus a handwritten HMC loop on the same tape.

Both paths evaluate the logistic-regression log joint with identical ops in
identical order and draw random numbers in identical order, so given one seed
their chains must agree bit for bit. Any difference in wall-clock time is the
cost of the inference abstraction.
"""

from __future__ import annotations

import math
import time

import numpy as np

from ppltape.autodiff import Parameter, Tape, ops
from ppltape.data import make_logreg
from ppltape.dists import Bernoulli, Empirical, Normal
from ppltape.errors import DivergenceError
from ppltape.infer import InferenceProblem
from ppltape.mc import HMC
from ppltape.models import logreg


def _logreg_log_prob_and_grad(X, y, prior_sd, u):
    with Tape() as tape:
        beta = tape.watch(u)
        lp = ops.sum(Normal(np.zeros(X.shape[1]), prior_sd).log_prob(beta))
        lp = lp + ops.sum(Bernoulli(logits=ops.matmul(X, beta)).log_prob(y))
        (grad,) = tape.gradients(lp, [beta])
    return float(lp.data), grad


def handwritten_hmc(X, y, step_size: float, n_steps: int, n_iter: int, seed: int,
                    prior_sd: float = 1.0) -> np.ndarray:
    """Plain HMC for Bayesian logistic regression; returns the ``[n_iter, D]`` chain."""
    rng = np.random.default_rng(seed)
    D = X.shape[1]
    chain = np.zeros((n_iter, D))
    q = np.zeros(D)
    logp, grad = _logreg_log_prob_and_grad(X, y, prior_sd, q)
    half = 0.5 * step_size
    for it in range(n_iter):
        p0 = rng.standard_normal(D)
        diverged = False
        try:
            p = p0 + half * grad
            q1, g1 = q, grad
            for i in range(n_steps):
                q1 = q1 + step_size * p
                logp1, g1 = _logreg_log_prob_and_grad(X, y, prior_sd, q1)
                if not np.all(np.isfinite(g1)):
                    raise DivergenceError("non-finite gradient")
                if i < n_steps - 1:
                    p = p + step_size * g1
            p = p + half * g1
            log_ratio = (-logp + 0.5 * float(np.sum(p0 * p0))) - (
                -logp1 + 0.5 * float(np.sum(p * p)))
            diverged = not math.isfinite(log_ratio)
        except DivergenceError:
            diverged = True
            log_ratio = -math.inf
        u = rng.uniform()
        if not diverged and math.log(u) < log_ratio:
            q, logp, grad = q1, logp1, g1
        chain[it] = q
    return chain


def library_hmc(X, y, step_size: float, n_steps: int, n_iter: int, seed: int,
                prior_sd: float = 1.0) -> np.ndarray:
    store = Empirical(Parameter("qbeta", np.zeros((n_iter, X.shape[1])), trainable=False))
    problem = InferenceProblem(logreg(X, prior_sd), latent={"beta": store}, data={"y": y})
    inference = HMC(problem, step_size=step_size, n_steps=n_steps, seed=seed)
    inference.initialize()
    inference.run(n_iter)
    return store.params.value


def bench_overhead(n: int = 5000, d: int = 20, n_iter: int = 100, n_steps: int = 10,
                   step_size=None, seed: int = 0, repeats: int = 3) -> dict:
    """Time both paths (best of ``repeats``, alternating order) and compare chains."""
    data = make_logreg(n, d, seed)
    X, y = data["X"], data["y"]
    eps = 0.5 / n if step_size is None else step_size
    best = {"library": math.inf, "handwritten": math.inf}
    chains = {}
    runners = {"library": library_hmc, "handwritten": handwritten_hmc}
    for r in range(repeats):
        order = ("library", "handwritten") if r % 2 == 0 else ("handwritten", "library")
        for name in order:
            start = time.perf_counter()
            chains[name] = runners[name](X, y, eps, n_steps, n_iter, seed)
            best[name] = min(best[name], time.perf_counter() - start)
    identical = bool(np.array_equal(chains["library"], chains["handwritten"]))
    return {"n": n, "d": d, "n_iter": n_iter, "n_steps": n_steps, "step_size": eps,
            "library_seconds": best["library"], "handwritten_seconds": best["handwritten"],
            "ratio": best["library"] / best["handwritten"], "identical": identical,
            "max_abs_diff": float(np.max(np.abs(chains["library"] - chains["handwritten"])))}
