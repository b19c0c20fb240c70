"""Monte Carlo inference writing into Empirical sample stores.

Constrained latents are moved on an unconstrained scale: a variable with
support (0, 1) is sampled as ``u = logit(theta)`` and the log joint gains the
log-Jacobian ``log sigmoid(u) + log sigmoid(-u)``. Stores always receive the
constrained value.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.special import expit, logit

from ppltape.autodiff import Tape, ops
from ppltape.dists import BINARY, CATEGORICAL, REAL, UNIT_INTERVAL, Empirical
from ppltape.errors import ConfigError, DivergenceError, StoreFullError
from ppltape.infer import Inference, InferenceProblem, check_unbound, register
from ppltape.model import log_joint, trace

CONTINUOUS = (REAL, UNIT_INTERVAL)


def _as_dict(x):
    return (x, False) if isinstance(x, dict) else ({"x": np.asarray(x, dtype=np.float64)}, True)


def _leapfrog(position: dict, momentum: dict, step_size: float, n_steps: int,
              grad_log_prob: Callable, grad0: Optional[dict] = None):
    if n_steps < 1:
        raise ConfigError("leapfrog needs n_steps >= 1")
    if grad0 is None:
        _, grad0 = grad_log_prob(position)
    half = 0.5 * step_size
    p = {k: momentum[k] + half * grad0[k] for k in momentum}
    q = dict(position)
    logp, g = None, grad0
    for i in range(n_steps):
        q = {k: q[k] + step_size * p[k] for k in q}
        logp, g = grad_log_prob(q)
        for v in g.values():
            if not np.all(np.isfinite(v)):
                raise DivergenceError("non-finite gradient during leapfrog")
        if i < n_steps - 1:
            p = {k: p[k] + step_size * g[k] for k in p}
    p = {k: p[k] + half * g[k] for k in p}
    return q, p, logp, g


def leapfrog(position, momentum, step_size: float, n_steps: int, grad_log_prob: Callable):
    """Standard leapfrog: half momentum step, ``n_steps`` full steps, final half step.

    ``position`` and ``momentum`` are arrays or dicts of arrays;
    ``grad_log_prob(position)`` returns ``(log_prob, grad)`` in the same layout.
    """
    q, wrapped = _as_dict(position)
    p, _ = _as_dict(momentum)
    if wrapped:
        inner = grad_log_prob

        def grad_log_prob(d):
            lp, g = inner(d["x"])
            return lp, {"x": np.asarray(g, dtype=np.float64)}

    q1, p1, _, _ = _leapfrog(q, p, step_size, n_steps, grad_log_prob)
    return (q1["x"], p1["x"]) if wrapped else (q1, p1)


class MonteCarlo(Inference):
    """Shared machinery for samplers over Empirical approximations."""

    family = "Empirical"
    gradient_based = True

    def __init__(self, problem: InferenceProblem, seed=0):
        super().__init__(problem, seed)
        for name, q in problem.latent.items():
            if not isinstance(q, Empirical):
                raise ConfigError(f"{type(self).__name__} requires Empirical approximations; "
                                  f"{name!r} is {type(q).__name__}")
        self.stores: dict = dict(problem.latent)
        self.position: dict = {}
        self.supports: dict = {}
        self.n_accept = 0
        self._cache = None

    def _initialize(self, **config) -> None:
        super()._initialize(**config)
        for store in self.stores.values():
            store.reset()
        self.n_accept = 0
        self._cache = None
        restore = [s for s in self.problem.slots if not s.fed]
        for s in restore:
            s.feed(np.zeros(s.shape))
        try:
            with Tape():
                t = trace(self.problem.model, self.problem.data_bindings(),
                          np.random.default_rng(0), check_bindings=False)
        finally:
            for s in restore:
                s.clear()
        check_unbound(t, self.problem)
        self.position = {}
        for name, store in self.stores.items():
            rv = t[name]
            support = rv.dist.support
            if self.gradient_based and support not in CONTINUOUS:
                raise ConfigError(f"{type(self).__name__} supports continuous latents only; "
                                  f"{name!r} has support {support!r}")
            if support not in CONTINUOUS + (BINARY, CATEGORICAL):
                raise ConfigError(f"unsupported support {support!r} for {name!r}")
            if store.batch_shape != rv.shape:
                raise ConfigError(f"Empirical store for {name!r} has event shape "
                                  f"{store.batch_shape}, variable has shape {rv.shape}")
            self.supports[name] = (support, rv.dist)
            init = store.params.value[0]
            if support == UNIT_INTERVAL:
                if np.all((init > 0) & (init < 1)):
                    self.position[name] = logit(init)
                else:
                    self.position[name] = np.zeros(rv.shape)
            elif support == CATEGORICAL:
                self.position[name] = np.clip(np.rint(init), 0, rv.dist.n_classes - 1)
            elif support == BINARY:
                self.position[name] = np.clip(np.rint(init), 0, 1)
            else:
                self.position[name] = np.array(init, dtype=np.float64)

    # target ------------------------------------------------------------------
    def _bind(self, tape: Tape, position: Mapping, watch: bool):
        bindings = self.problem.data_bindings()
        watched = {}
        jacobian = None
        for name, u in position.items():
            support = self.supports[name][0]
            uv = tape.watch(u) if watch else tape.constant(u)
            watched[name] = uv
            if support == UNIT_INTERVAL:
                bindings[name] = ops.sigmoid(uv)
                j = -ops.sum(ops.softplus(uv) + ops.softplus(-uv))
                jacobian = j if jacobian is None else jacobian + j
            else:
                bindings[name] = uv
        return bindings, watched, jacobian

    def log_prob_and_grad(self, position: Mapping) -> tuple:
        """Scaled log joint (plus log-Jacobians) and its gradient on the unconstrained scale."""
        with Tape() as tape:
            bindings, watched, jacobian = self._bind(tape, position, watch=True)
            t = trace(self.problem.model, bindings, self.rng, tape)
            lp = log_joint(t, self.problem.scale)
            if jacobian is not None:
                lp = lp + jacobian
            grads = tape.gradients(lp, watched.values())
        return float(lp.data), dict(zip(watched, grads))

    def log_prob(self, position: Mapping) -> float:
        with Tape() as tape:
            bindings, _, jacobian = self._bind(tape, position, watch=False)
            t = trace(self.problem.model, bindings, self.rng, tape)
            lp = log_joint(t, self.problem.scale)
            if jacobian is not None:
                lp = lp + jacobian
        return float(lp.data)

    def constrained(self, name: str, u: np.ndarray) -> np.ndarray:
        return expit(u) if self.supports[name][0] == UNIT_INTERVAL else u

    def _write(self) -> None:
        for name, store in self.stores.items():
            if store.t >= store.n_capacity:
                raise StoreFullError(f"Empirical store for {name!r} is full "
                                     f"({store.n_capacity} rows)")
        for name, store in self.stores.items():
            store.write(self.constrained(name, self.position[name]))

    def _metrics(self, accepted: bool) -> dict:
        self.n_accept += int(accepted)
        return {"accept": float(accepted),
                "acceptance_rate": self.n_accept / (self.n_steps + 1)}

    @property
    def acceptance_rate(self) -> float:
        return self.n_accept / self.n_steps if self.n_steps else 0.0


@register("hmc")
class HMC(MonteCarlo):
    """Hamiltonian Monte Carlo with identity mass matrix and fixed (step_size, n_steps)."""

    objective = "Metropolis-corrected Hamiltonian dynamics"
    update_rule = "leapfrog proposal, accept/reject, write row t"

    def __init__(self, problem: InferenceProblem, step_size: float = 0.25, n_steps: int = 2,
                 seed=0):
        super().__init__(problem, seed)
        if not step_size > 0:
            raise ConfigError("step_size must be positive")
        if n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        self.step_size = step_size
        self.n_steps_leapfrog = n_steps

    def _step(self) -> tuple:
        if self._cache is None:
            self._cache = self.log_prob_and_grad(self.position)
        logp0, grad0 = self._cache
        p0 = {k: self.rng.standard_normal(np.shape(v)) for k, v in self.position.items()}
        diverged = False
        try:
            q1, p1, logp1, grad1 = _leapfrog(self.position, p0, self.step_size,
                                             self.n_steps_leapfrog, self.log_prob_and_grad,
                                             grad0)
            h0 = -logp0 + 0.5 * sum(float(np.sum(v * v)) for v in p0.values())
            h1 = -logp1 + 0.5 * sum(float(np.sum(v * v)) for v in p1.values())
            log_ratio = h0 - h1
            if not math.isfinite(log_ratio):
                diverged = True
        except DivergenceError:
            diverged = True
            log_ratio = -math.inf
        u = self.rng.uniform()
        accepted = (not diverged) and math.log(u) < log_ratio
        if accepted:
            self.position = q1
            self._cache = (logp1, grad1)
        self._write()
        metrics = self._metrics(accepted)
        metrics["log_joint"] = self._cache[0]
        return metrics, diverged, []


@register("sgld")
class SGLD(MonteCarlo):
    """Stochastic gradient Langevin dynamics; always accepts.

    ``step_size`` is either constant or, with ``decay=(a, b, gamma)``, equal to
    ``a * (b + t) ** -gamma`` at step ``t``.
    """

    objective = "Langevin diffusion on the (scaled) log joint"
    update_rule = "noisy gradient ascent, write row t"

    def __init__(self, problem: InferenceProblem, step_size: float = 1e-3,
                 decay: Optional[tuple] = None, seed=0):
        super().__init__(problem, seed)
        if step_size < 0:
            raise ConfigError("step_size must be non-negative")
        if decay is not None:
            a, b, gamma = decay
            if not 0.5 < gamma <= 1.0:
                raise ConfigError("decay exponent gamma must lie in (0.5, 1]")
        self.step_size = step_size
        self.decay = decay

    def current_step_size(self) -> float:
        if self.decay is None:
            return self.step_size
        a, b, gamma = self.decay
        return a * (b + self.n_steps) ** (-gamma)

    def _step(self) -> tuple:
        eps = self.current_step_size()
        logp, grad = self.log_prob_and_grad(self.position)
        diverged = not all(np.all(np.isfinite(g)) for g in grad.values())
        noise_sd = math.sqrt(eps)
        new = {}
        for k, u in self.position.items():
            noise = self.rng.standard_normal(np.shape(u))
            new[k] = u + 0.5 * eps * grad[k] + noise_sd * noise
        if not diverged:
            self.position = new
        self._write()
        metrics = self._metrics(not diverged)
        metrics.update({"log_joint": logp, "step_size": eps})
        return metrics, diverged, []


@register("mh")
class MetropolisHastings(MonteCarlo):
    """Random-walk Metropolis on the unconstrained scale.

    Continuous latents get isotropic Gaussian proposals; discrete latents are
    redrawn uniformly over their support (a symmetric proposal).
    """

    gradient_based = False
    objective = "Metropolis acceptance on the log joint"
    update_rule = "symmetric proposal, accept/reject, write row t"

    def __init__(self, problem: InferenceProblem, proposal_sd: float = 0.5, seed=0):
        super().__init__(problem, seed)
        if not (proposal_sd > 0 and math.isfinite(proposal_sd)):
            raise ConfigError("proposal_sd must be positive and finite")
        self.proposal_sd = proposal_sd

    def _propose(self) -> dict:
        out = {}
        for name, u in self.position.items():
            support, dist = self.supports[name]
            shape = np.shape(u)
            if support == BINARY:
                out[name] = self.rng.integers(0, 2, size=shape).astype(np.float64)
            elif support == CATEGORICAL:
                out[name] = self.rng.integers(0, dist.n_classes, size=shape).astype(np.float64)
            else:
                out[name] = u + self.proposal_sd * self.rng.standard_normal(shape)
        return out

    def _step(self) -> tuple:
        if self._cache is None:
            self._cache = (self.log_prob(self.position), None)
        logp0 = self._cache[0]
        proposal = self._propose()
        logp1 = self.log_prob(proposal)
        log_ratio = logp1 - logp0
        u = self.rng.uniform()
        accepted = math.isfinite(logp1) and math.log(u) < log_ratio
        if accepted:
            self.position = proposal
            self._cache = (logp1, None)
        self._write()
        metrics = self._metrics(accepted)
        metrics["log_joint"] = self._cache[0]
        return metrics, False, []
