"""Distributions with tape-differentiable log densities.

Constructor arguments may be Values, Parameters, feed slots or plain
array-likes. They are lifted onto the active tape only when a density is
evaluated, so a distribution over Parameters can be built once and reused
across tapes. Parameter validity (positive scales and so on) is checked at
evaluation time, not at construction.
"""

from __future__ import annotations

import math

import numpy as np

from ppltape.autodiff import Parameter, Value, ops
from ppltape.autodiff.ops import lift, tensor_of
from ppltape.errors import (
    NotReparameterizableError,
    ShapeError,
    StoreFullError,
    SupportError,
)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

REAL = "real"
UNIT_INTERVAL = "unit_interval"
BINARY = "binary"
CATEGORICAL = "categorical"
SIMPLEX = "simplex"


def _tape_for(*args):
    for a in args:
        if isinstance(a, Value):
            return a.tape
    return None


def _lift(x, *others) -> Value:
    return lift(x, _tape_for(x, *others))


def gamma_sample(rng: np.random.Generator, alpha) -> np.ndarray:
    """Marsaglia-Tsang Gamma(alpha, 1) draws, boosted for alpha < 1."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise SupportError("gamma concentration must be positive")
    boost = alpha < 1.0
    a = np.where(boost, alpha + 1.0, alpha).ravel()
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        u = rng.uniform(size=pending.size)
        v = (1.0 + c[pending] * x) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            accept = ok & (np.log(u) < 0.5 * x * x + d[pending] - d[pending] * v
                           + d[pending] * np.log(np.where(ok, v, 1.0)))
        out[pending[accept]] = d[pending[accept]] * v[accept]
        pending = pending[~accept]
    out = out.reshape(alpha.shape)
    if np.any(boost):
        u = rng.uniform(size=alpha.shape)
        out = np.where(boost, out * u ** (1.0 / np.where(boost, alpha, 1.0)), out)
    return out


class Distribution:
    """Common interface: ``log_prob``, ``sample``, optional ``rsample``/``entropy``."""

    reparameterized = False
    discrete = False
    support = REAL
    event_ndim = 0

    @property
    def batch_shape(self) -> tuple:
        raise NotImplementedError

    @property
    def event_shape(self) -> tuple:
        return ()

    @property
    def shape(self) -> tuple:
        return self.batch_shape + self.event_shape

    def log_prob(self, value) -> Value:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def rsample(self, rng: np.random.Generator) -> Value:
        raise NotReparameterizableError(f"{type(self).__name__} is not reparameterizable")

    def entropy(self) -> Value:
        raise NotImplementedError(f"no analytic entropy for {type(self).__name__}")

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"


class Normal(Distribution):
    reparameterized = True

    def __init__(self, mu, sigma):
        self.mu = mu
        self.sigma = sigma

    @property
    def batch_shape(self) -> tuple:
        return np.broadcast_shapes(np.shape(tensor_of(self.mu)), np.shape(tensor_of(self.sigma)))

    def _params(self):
        mu = _lift(self.mu, self.sigma)
        sigma = lift(self.sigma, mu.tape)
        if np.any(~(sigma.data > 0)):
            raise SupportError("Normal sigma must be strictly positive")
        return mu, sigma

    def log_prob(self, value) -> Value:
        mu, sigma = self._params()
        x = lift(value, mu.tape)
        z = (x - mu) / sigma
        return -0.5 * ops.square(z) - ops.log(sigma) - HALF_LOG_2PI

    def sample(self, rng):
        mu, sigma = tensor_of(self.mu), tensor_of(self.sigma)
        if np.any(~(sigma > 0)):
            raise SupportError("Normal sigma must be strictly positive")
        shape = np.broadcast_shapes(mu.shape, sigma.shape)
        return mu + sigma * rng.standard_normal(shape)

    def rsample(self, rng) -> Value:
        mu, sigma = self._params()
        eps = rng.standard_normal(np.broadcast_shapes(mu.shape, sigma.shape))
        return mu + sigma * eps

    def entropy(self) -> Value:
        mu, sigma = self._params()
        h = ops.log(sigma) + (0.5 + HALF_LOG_2PI)
        if h.shape != mu.shape:
            h = ops.broadcast_to(h, np.broadcast_shapes(mu.shape, sigma.shape))
        return h

    def mean(self) -> np.ndarray:
        return np.broadcast_to(tensor_of(self.mu), self.batch_shape)


def kl_normal_normal(q: Normal, p: Normal) -> Value:
    """Elementwise KL(q || p) for diagonal Normals of identical shape."""
    if not (isinstance(q, Normal) and isinstance(p, Normal)):
        raise TypeError("kl_normal_normal requires two Normal distributions")
    if q.batch_shape != p.batch_shape:
        raise ShapeError(f"KL shape mismatch: {q.batch_shape} vs {p.batch_shape}")
    mq, sq = q._params()
    mp = lift(p.mu, mq.tape)
    sp = lift(p.sigma, mq.tape)
    if np.any(~(sp.data > 0)):
        raise SupportError("Normal sigma must be strictly positive")
    return (ops.log(sp) - ops.log(sq)
            + (ops.square(sq) + ops.square(mq - mp)) / (2.0 * ops.square(sp)) - 0.5)


class Bernoulli(Distribution):
    """Bernoulli over {0, 1}; parameterized by ``logits`` or ``probs``."""

    discrete = True
    support = BINARY

    def __init__(self, logits=None, probs=None):
        if (logits is None) == (probs is None):
            raise ValueError("pass exactly one of logits or probs")
        self._logits = logits
        self._probs = probs

    @property
    def batch_shape(self) -> tuple:
        return np.shape(tensor_of(self._logits if self._probs is None else self._probs))

    @property
    def logits(self) -> Value:
        if self._logits is not None:
            return lift(self._logits)
        p = _lift(self._probs)
        return ops.log(p) - ops.log1p(-p)

    @property
    def probs(self) -> np.ndarray:
        if self._probs is not None:
            return tensor_of(self._probs)
        from scipy.special import expit

        return expit(tensor_of(self._logits))

    @staticmethod
    def check(value: np.ndarray) -> None:
        if np.any((value != 0.0) & (value != 1.0)):
            raise SupportError("Bernoulli value must be 0 or 1")

    def log_prob(self, value) -> Value:
        if self._logits is not None:
            logits = _lift(self._logits, value)
            x = lift(value, logits.tape)
            self.check(x.data)
            return x * logits - ops.softplus(logits)
        p = _lift(self._probs, value)
        if np.any((p.data < 0.0) | (p.data > 1.0)):
            raise SupportError("Bernoulli probs must lie in [0, 1]")
        x = lift(value, p.tape)
        self.check(x.data)
        return x * ops.log(p) + (1.0 - x) * ops.log1p(-p)

    def sample(self, rng):
        p = self.probs
        return (rng.uniform(size=p.shape) < p).astype(np.float64)


class Beta(Distribution):
    support = UNIT_INTERVAL

    def __init__(self, a, b):
        self.a = a
        self.b = b

    @property
    def batch_shape(self) -> tuple:
        return np.broadcast_shapes(np.shape(tensor_of(self.a)), np.shape(tensor_of(self.b)))

    def log_prob(self, value) -> Value:
        a = _lift(self.a, self.b, value)
        b = lift(self.b, a.tape)
        if np.any(~(a.data > 0)) or np.any(~(b.data > 0)):
            raise SupportError("Beta concentrations must be positive")
        x = lift(value, a.tape)
        if np.any(~((x.data > 0.0) & (x.data < 1.0))):
            raise SupportError("Beta value must lie in the open interval (0, 1)")
        log_norm = ops.lgamma(a) + ops.lgamma(b) - ops.lgamma(a + b)
        return (a - 1.0) * ops.log(x) + (b - 1.0) * ops.log1p(-x) - log_norm

    def sample(self, rng):
        a, b = tensor_of(self.a), tensor_of(self.b)
        shape = np.broadcast_shapes(a.shape, b.shape)
        ga = gamma_sample(rng, np.broadcast_to(a, shape))
        gb = gamma_sample(rng, np.broadcast_to(b, shape))
        return ga / (ga + gb)

    def mean(self) -> np.ndarray:
        a, b = tensor_of(self.a), tensor_of(self.b)
        return a / (a + b)


class Categorical(Distribution):
    """Categorical over ``{0, ..., K-1}``; the last axis of the parameters indexes classes."""

    discrete = True
    support = CATEGORICAL

    def __init__(self, logits=None, probs=None):
        if (logits is None) == (probs is None):
            raise ValueError("pass exactly one of logits or probs")
        self._logits = logits
        self._probs = probs

    @property
    def n_classes(self) -> int:
        return np.shape(tensor_of(self._logits if self._probs is None else self._probs))[-1]

    @property
    def batch_shape(self) -> tuple:
        return np.shape(tensor_of(self._logits if self._probs is None else self._probs))[:-1]

    def log_softmax(self, tape=None) -> Value:
        if self._logits is not None:
            return ops.log_softmax(lift(self._logits, tape))
        p = lift(self._probs, tape)
        return ops.log(p) - ops.log(ops.sum(p, axis=-1, keepdims=True))

    @property
    def probs(self) -> np.ndarray:
        if self._probs is not None:
            p = tensor_of(self._probs)
            return p / p.sum(axis=-1, keepdims=True)
        logits = tensor_of(self._logits)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def check(self, value: np.ndarray) -> np.ndarray:
        k = self.n_classes
        idx = np.rint(value)
        if np.any(np.abs(value - idx) > 1e-9) or np.any((idx < 0) | (idx >= k)):
            raise SupportError(f"Categorical value must be an integer in [0, {k})")
        return idx.astype(np.int64)

    def log_prob(self, value) -> Value:
        tape = _tape_for(self._logits, self._probs, value)
        lsm = self.log_softmax(tape)
        value = lift(value, lsm.tape)
        self.check(value.data)
        return ops.sum(ops.one_hot(value, self.n_classes) * lsm, axis=-1)

    def sample(self, rng):
        p = self.probs
        cdf = np.cumsum(p, axis=-1)
        u = rng.uniform(size=p.shape[:-1])
        idx = (u[..., None] >= cdf[..., :-1]).sum(axis=-1)
        return idx.astype(np.float64)

    def entropy(self) -> Value:
        lsm = self.log_softmax(_tape_for(self._logits, self._probs))
        return -ops.sum(ops.exp(lsm) * lsm, axis=-1)


class Dirichlet(Distribution):
    support = SIMPLEX
    event_ndim = 1

    def __init__(self, alpha):
        self.alpha = alpha

    @property
    def batch_shape(self) -> tuple:
        return np.shape(tensor_of(self.alpha))[:-1]

    @property
    def event_shape(self) -> tuple:
        return np.shape(tensor_of(self.alpha))[-1:]

    def log_prob(self, value) -> Value:
        alpha = _lift(self.alpha, value)
        if np.any(~(alpha.data > 0)):
            raise SupportError("Dirichlet concentrations must be positive")
        x = lift(value, alpha.tape)
        if np.any(x.data <= 0) or np.any(np.abs(x.data.sum(axis=-1) - 1.0) > 1e-9):
            raise SupportError("Dirichlet value must lie in the open simplex")
        log_norm = ops.sum(ops.lgamma(alpha), axis=-1) - ops.lgamma(ops.sum(alpha, axis=-1))
        return ops.sum((alpha - 1.0) * ops.log(x), axis=-1) - log_norm

    def sample(self, rng):
        g = gamma_sample(rng, tensor_of(self.alpha))
        return g / g.sum(axis=-1, keepdims=True)


class PointMass(Distribution):
    """All mass at ``params``; ``log_prob`` is identically zero."""

    reparameterized = True

    def __init__(self, params):
        self.params = params

    @property
    def batch_shape(self) -> tuple:
        return np.shape(tensor_of(self.params))

    def log_prob(self, value) -> Value:
        x = _lift(value, self.params)
        return x.tape.constant(np.zeros(self.batch_shape))

    def sample(self, rng=None):
        return np.array(tensor_of(self.params))

    def rsample(self, rng=None) -> Value:
        return _lift(self.params)

    def mean(self) -> np.ndarray:
        return self.sample()


class Empirical(Distribution):
    """Sample store ``params[:t]`` acting as a nonparametric distribution.

    ``params`` is a Parameter of shape ``[T, *event]``; samplers append rows
    through :meth:`write`, which advances the cursor ``t``. Summaries only
    look at written rows. Before the first write, row 0 (the initial
    contents) stands in as the single sample.
    """

    def __init__(self, params: Parameter):
        if not isinstance(params, Parameter):
            params = Parameter("empirical", params, trainable=False)
        if params.value.ndim < 1 or params.shape[0] < 1:
            raise ShapeError("Empirical params need a leading sample axis of length >= 1")
        self.params = params
        self.t = 0

    @property
    def n_capacity(self) -> int:
        return self.params.shape[0]

    @property
    def batch_shape(self) -> tuple:
        return self.params.shape[1:]

    def reset(self) -> None:
        self.t = 0

    def write(self, row) -> None:
        if self.t >= self.n_capacity:
            raise StoreFullError(f"Empirical store is full ({self.n_capacity} rows)")
        store = self.params.value.copy()
        store[self.t] = row
        self.params.assign(store)
        self.t += 1

    def samples(self, burn_in: float = 0.0) -> np.ndarray:
        if not 0.0 <= burn_in < 1.0:
            raise ValueError("burn_in must be a fraction in [0, 1)")
        if self.t == 0:
            return self.params.value[:1]
        start = int(math.floor(burn_in * self.t))
        return self.params.value[start:self.t]

    def mean(self, burn_in: float = 0.0) -> np.ndarray:
        return self.samples(burn_in).mean(axis=0)

    def variance(self, burn_in: float = 0.0) -> np.ndarray:
        return self.samples(burn_in).var(axis=0)

    def std(self, burn_in: float = 0.0) -> np.ndarray:
        return np.sqrt(self.variance(burn_in))

    def quantile(self, q, burn_in: float = 0.0) -> np.ndarray:
        return np.quantile(self.samples(burn_in), q, axis=0)

    def sample(self, rng):
        rows = self.samples()
        return np.array(rows[rng.integers(rows.shape[0])])

    def log_prob(self, value) -> Value:
        raise NotImplementedError("Empirical has no density")


def merge_chains(*stores: Empirical, burn_in: float = 0.0) -> np.ndarray:
    """Concatenate the written rows of several independent chains."""
    return np.concatenate([s.samples(burn_in) for s in stores], axis=0)
