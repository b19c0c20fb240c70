"""Random variables, model tracing and the (scaled) log joint.

A model is a plain function taking a :class:`Trace` and creating random
variables with ``t.rv(name, dist)``. Each call returns the variable's
associated tensor on the tape, so downstream code composes with it like any
other value::

    def beta_bernoulli(t):
        theta = t.rv("theta", Beta(1.0, 1.0))
        t.rv("x", Bernoulli(probs=theta * np.ones(50)))

Bindings substitute values at creation time: a data tensor (or feed slot), an
approximating distribution whose sample or point is used, or a free Value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional

import numpy as np

from ppltape.autodiff import Tape, Value, ops
from ppltape.autodiff.ops import lift
from ppltape.autodiff.tape import current_tape
from ppltape.dists import Beta, Distribution
from ppltape.errors import BindingError, ConfigError, ShapeError

DATA = "data"
APPROX = "approx"
FREE = "free"
PRIOR = "prior"


@dataclass
class RandomVariable:
    """A distribution paired with its associated sample tensor on the tape."""

    name: str
    dist: Distribution
    value: Value
    source: str
    observed: Optional[np.ndarray] = None
    approx: Optional[Distribution] = None

    @property
    def shape(self) -> tuple:
        return self.value.shape


def is_approximation(obj) -> bool:
    return isinstance(obj, Distribution) or (callable(obj) and not isinstance(obj, Value)
                                             and not hasattr(obj, "_as_value"))


def realize(approx) -> Distribution:
    """Evaluate an approximation spec (distribution or factory) on the active tape."""
    dist = approx() if not isinstance(approx, Distribution) else approx
    if not isinstance(dist, Distribution):
        raise ConfigError(f"approximation factory returned {type(dist).__name__}, "
                          "expected a Distribution")
    return dist


class Trace:
    """Ordered record of the random variables created during one model execution."""

    def __init__(self, bindings: Optional[Mapping[str, Any]] = None,
                 rng: Optional[np.random.Generator] = None, tape: Optional[Tape] = None):
        self.bindings = dict(bindings or {})
        self.rng = rng
        self.tape = tape if tape is not None else current_tape()
        if self.tape is None:
            raise ConfigError("trace requires an active tape")
        self.rvs: dict[str, RandomVariable] = {}
        self.frozen_params: set = set()
        self.result = None
        self._log_probs: dict[str, Value] = {}

    def rv(self, name: str, dist: Distribution) -> Value:
        if name in self.rvs:
            raise BindingError(f"duplicate random variable name {name!r}")
        source = self.bindings.get(name)
        approx = None
        observed = None
        if source is None:
            if self.rng is None:
                raise ConfigError(f"random variable {name!r} is unbound and no rng was given")
            value = self.tape.constant(dist.sample(self.rng))
            kind = PRIOR
        elif isinstance(source, Value):
            value = lift(source, self.tape)
            kind = FREE
        elif is_approximation(source):
            with self.tape.watching_params() as read:
                approx = realize(source)
                if approx.reparameterized:
                    value = approx.rsample(self.rng)
                else:
                    if self.rng is None:
                        raise ConfigError(f"sampling approximation for {name!r} needs an rng")
                    value = self.tape.constant(approx.sample(self.rng))
            self.frozen_params |= read
            kind = APPROX
        else:
            value = lift(source, self.tape)
            observed = value.data
            kind = DATA
        expected = dist.shape
        if value.shape != expected:
            try:
                np.broadcast_shapes(value.shape, expected)
            except ValueError:
                raise ShapeError(f"value for {name!r} has shape {value.shape}, "
                                 f"distribution has shape {expected}") from None
        self.rvs[name] = RandomVariable(name, dist, value, kind, observed, approx)
        return value

    def __getitem__(self, name: str) -> RandomVariable:
        return self.rvs[name]

    def __contains__(self, name) -> bool:
        return name in self.rvs

    def __iter__(self):
        return iter(self.rvs.values())

    def names(self) -> list[str]:
        return list(self.rvs)

    def log_prob(self, name: str) -> Value:
        """Batch-shaped log density of one variable at its associated value (cached)."""
        lp = self._log_probs.get(name)
        if lp is None:
            rv = self.rvs[name]
            lp = rv.dist.log_prob(rv.value)
            self._log_probs[name] = lp
        return lp


def trace(model: Callable, bindings: Optional[Mapping[str, Any]] = None,
          rng: Optional[np.random.Generator] = None, tape: Optional[Tape] = None,
          check_bindings: bool = True) -> Trace:
    """Run ``model`` once, substituting bound values as variables are created.

    Raises :class:`BindingError` when a binding names a variable the model
    never created.
    """
    if tape is None and current_tape() is None:
        tape = Tape()
        with tape:
            return trace(model, bindings, rng, tape, check_bindings)
    t = Trace(bindings, rng, tape)
    if tape is not None and current_tape() is not tape:
        with tape:
            t.result = model(t)
    else:
        t.result = model(t)
    if check_bindings and t.bindings:
        unknown = [k for k in t.bindings if k not in t.rvs]
        if unknown:
            raise BindingError(f"bindings name variables the model never creates: {unknown}")
    return t


def log_joint(t: Trace, scale: Optional[Mapping[str, float]] = None,
              exclude=()) -> Value:
    """Sum over variables of ``scale[name] * sum(log_prob(value))``.

    Variables listed in ``exclude`` are left out (used when a prior term is
    replaced by an analytic divergence).
    """
    scale = scale or {}
    for name, s in scale.items():
        if not s > 0:
            raise ConfigError(f"scale for {name!r} must be positive, got {s}")
        if name not in t.rvs:
            raise BindingError(f"scale names unknown variable {name!r}")
    total = None
    for name in t.rvs:
        if name in exclude:
            continue
        term = ops.sum(t.log_prob(name))
        s = scale.get(name, 1.0)
        if s != 1.0:
            term = term * s
        total = term if total is None else total + term
    if total is None:
        return t.tape.constant(0.0)
    return total


# --- Dirichlet process as a stochastic while loop ----------------------------

MAX_STICKS = 10_000


def stick_count(alpha: float, rng: np.random.Generator, cap: int = MAX_STICKS) -> int:
    """Run the stick-breaking loop once and return the number of extra sticks broken.

    The loop keeps a running product of Beta(1, alpha) sticks and continues
    while a Bernoulli flip with that product as success probability comes up 1.
    """
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    stick = Beta(1.0, alpha)
    k = 0
    beta_k = float(stick.sample(rng))
    while rng.uniform() < beta_k:
        beta_k *= float(stick.sample(rng))
        k += 1
        if k >= cap:
            raise RuntimeError(f"stick-breaking loop exceeded {cap} iterations (alpha={alpha})")
    return k


def dirichlet_process_draw(alpha: float, base_sampler: Callable[[np.random.Generator], Any],
                           rng: np.random.Generator, atoms: Optional[dict] = None):
    """One draw from a DP: returns ``(atom, stick_index)``.

    ``atoms`` memoizes base draws per stick index so repeated calls share atoms.
    """
    k = stick_count(alpha, rng)
    if atoms is None:
        atoms = {}
    if k not in atoms:
        atoms[k] = np.asarray(base_sampler(rng), dtype=np.float64)
    return atoms[k], k


def dirichlet_process_sample(alpha: float, base_sampler: Callable, n: int,
                             rng: np.random.Generator):
    """``n`` draws sharing atoms; returns ``(draws, stick_indices)``."""
    atoms: dict = {}
    draws, ks = [], []
    for _ in range(n):
        atom, k = dirichlet_process_draw(alpha, base_sampler, rng, atoms)
        draws.append(atom)
        ks.append(k)
    return np.stack(draws), np.array(ks, dtype=np.int64)
