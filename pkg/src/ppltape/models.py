"""Bundled models and the inference set-ups used by the command line."""

from __future__ import annotations

import numpy as np

from ppltape.autodiff import Parameter, ops
from ppltape.dists import Bernoulli, Beta, Categorical, Normal, PointMass


def beta_bernoulli(n: int = 50):
    """``theta ~ Beta(1, 1)``; ``x_i ~ Bernoulli(theta)`` for ``n`` flips."""

    def model(t):
        theta = t.rv("theta", Beta(1.0, 1.0))
        t.rv("x", Bernoulli(probs=theta * np.ones(n)))

    return model


def normal_normal(n: int = 1, prior_sd: float = 1.0, noise_sd: float = 1.0):
    """``z ~ N(0, prior_sd)``; ``x_i ~ N(z, noise_sd)``."""

    def model(t):
        z = t.rv("z", Normal(0.0, prior_sd))
        t.rv("x", Normal(z * np.ones(n), noise_sd))

    return model


def normal_normal_posterior(x, prior_sd: float = 1.0, noise_sd: float = 1.0) -> tuple:
    """Exact posterior ``(mean, sd)`` of ``z`` for :func:`normal_normal`."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    precision = 1.0 / prior_sd ** 2 + x.size / noise_sd ** 2
    return float(x.sum() / noise_sd ** 2 / precision), float(precision ** -0.5)


def gmm(N: int, K: int, D: int):
    """Mixture of unit-variance Gaussians with standard-normal cluster means.

    ``beta ~ N(0, 1)`` of shape ``[K, D]``, ``z ~ Categorical(logits=0)`` of
    shape ``[N]``, ``x ~ N(beta[z], 1)`` of shape ``[N, D]``.
    """

    def model(t):
        beta = t.rv("beta", Normal(np.zeros((K, D)), 1.0))
        z = t.rv("z", Categorical(logits=np.zeros((N, K))))
        t.rv("x", Normal(ops.gather(beta, z), 1.0))

    return model


def logreg(X, prior_sd: float = 1.0):
    """Bayesian logistic regression: ``beta ~ N(0, prior_sd)``, ``y ~ Bernoulli(logits=X beta)``.

    ``X`` may be an array or a feed slot of shape ``[N, D]``.
    """
    D = X.shape[1]

    def model(t):
        beta = t.rv("beta", Normal(np.zeros(D), prior_sd))
        t.rv("y", Bernoulli(logits=ops.matmul(X, beta)))

    return model


def farthest_point_init(X: np.ndarray, K: int) -> np.ndarray:
    """Deterministic spread-out starting means: greedy farthest-point selection.

    The first centre is the data point farthest from the data mean; each next
    centre is the point farthest from all centres chosen so far.
    """
    X = np.asarray(X, dtype=np.float64)
    first = int(np.argmax(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    centres = [X[first]]
    d2 = np.sum((X - X[first]) ** 2, axis=1)
    for _ in range(1, K):
        i = int(np.argmax(d2))
        centres.append(X[i])
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return np.array(centres)


def normal_approx(name: str, shape, loc=None, scale: float = 1.0):
    """Mean-field Normal with softplus-parameterized standard deviations.

    Returns ``(factory, loc_param, raw_scale_param)``.
    """
    loc_p = Parameter(f"{name}/loc", np.zeros(shape) if loc is None else loc)
    raw = np.full(shape, np.log(np.expm1(scale)))
    scale_p = Parameter(f"{name}/scale", raw)
    return (lambda: Normal(loc_p, ops.softplus(scale_p))), loc_p, scale_p


def categorical_approx(name: str, shape):
    """Categorical with free logits initialised to zero (uniform)."""
    logits = Parameter(f"{name}/logits", np.zeros(shape))
    return (lambda: Categorical(logits=logits)), logits


def point_approx(name: str, value):
    p = Parameter(f"{name}/point", np.asarray(value, dtype=np.float64))
    return PointMass(p), p
