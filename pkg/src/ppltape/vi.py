"""Variational inference: KLqp gradient estimators, MAP and the importance-weighted bound."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ppltape.autodiff import Tape, Value, ops
from ppltape.dists import Categorical, Normal, PointMass, kl_normal_normal
from ppltape.errors import ConfigError, NotReparameterizableError
from ppltape.infer import (
    InferenceProblem,
    OptimizationInference,
    check_unbound,
    register,
)
from ppltape.model import log_joint, realize, trace

ESTIMATORS = ("reparam", "reparam_analytic_kl", "reparam_analytic_entropy", "score")


class VariationalInference(OptimizationInference):
    """Shared machinery: realize approximations, draw latents, trace the model."""

    family = "parametric"

    def _realize(self) -> dict:
        return {name: realize(spec) for name, spec in self.problem.latent.items()}

    def _draw(self, qs: dict, tape: Tape, pathwise: bool) -> dict:
        z = {}
        for name, q in qs.items():
            if pathwise:
                if q.discrete or not q.reparameterized:
                    raise ConfigError(
                        f"{type(q).__name__} approximation for {name!r} is not "
                        "reparameterizable; use the score estimator")
                z[name] = q.rsample(self.rng)
            else:
                z[name] = tape.constant(q.sample(self.rng))
        return z

    def _trace(self, tape: Tape, z: dict):
        bindings = self.problem.data_bindings()
        bindings.update(z)
        t = trace(self.problem.model, bindings, self.rng, tape)
        self._frozen |= t.frozen_params
        return t

    def _validate(self) -> None:
        with Tape() as tape:
            restore = [s for s in self.problem.slots if not s.fed]
            for s in restore:
                s.feed(np.zeros(s.shape))
            try:
                qs = self._realize()
                t = trace(self.problem.model,
                          {**self.problem.data_bindings(),
                           **{n: tape.constant(q.sample(np.random.default_rng(0)))
                              for n, q in qs.items()}},
                          np.random.default_rng(0), tape)
            finally:
                for s in restore:
                    s.clear()
        check_unbound(t, self.problem)
        unknown = [n for n in self.problem.scale if n not in t]
        if unknown:
            raise ConfigError(f"scale names unknown variables: {unknown}")
        self._check_family(qs, t)

    def _check_family(self, qs: dict, t) -> None:
        pass

    def _scaled_q(self, qs: dict, z: dict) -> Value:
        total = None
        for name, q in qs.items():
            term = ops.sum(q.log_prob(z[name]))
            s = self.problem.scale.get(name, 1.0)
            if s != 1.0:
                term = term * s
            total = term if total is None else total + term
        return total


@register("klqp")
class KLqp(VariationalInference):
    """Minimize KL(q || p) with one of four stochastic-gradient estimators.

    Args:
        estimator: ``reparam`` (pathwise, Monte Carlo KL), ``reparam_analytic_kl``
            (pathwise likelihood plus closed-form KL to Normal priors),
            ``reparam_analytic_entropy`` (pathwise log joint plus closed-form
            entropy) or ``score`` (score-function surrogate; works for
            discrete latents).
        n_samples: Monte Carlo samples per update.
        baseline: score estimator only. ``True`` or ``"running"`` subtracts a
            running mean (decay 0.99) of the learning signal; ``"loo"``
            subtracts, for each of the ``n_samples`` draws, the mean signal of
            the other draws (stateless, needs ``n_samples >= 2``).
        local_signals: score estimator only. Build each latent's learning
            signal from the model terms that depend on it, elementwise over
            its leading (plate) axes. Unbiased when the leading axis indexes
            conditionally independent data points and ``q`` factorizes over it.
    """

    objective = "negative ELBO"
    update_rule = "stochastic gradient (reparameterization or score function)"

    def __init__(self, problem: InferenceProblem, estimator: str = "reparam",
                 n_samples: int = 1, baseline=False, local_signals: bool = False,
                 seed=0):
        super().__init__(problem, seed)
        if estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if baseline is True:
            baseline = "running"
        if baseline not in (False, None, "running", "loo"):
            raise ConfigError(f"unknown baseline {baseline!r}; use 'running' or 'loo'")
        if baseline and estimator != "score":
            raise ConfigError("baseline applies to the score estimator only")
        if baseline == "loo" and n_samples < 2:
            raise ConfigError("the leave-one-out baseline needs n_samples >= 2")
        self.estimator = estimator
        self.n_samples = n_samples
        self.baseline = baseline or False
        self.local_signals = local_signals
        self.decay = 0.99
        self._b: dict = {}

    def _initialize(self, **config) -> None:
        self._b = {}
        super()._initialize(**config)

    def _check_family(self, qs, t) -> None:
        for name, q in qs.items():
            if self.estimator != "score" and (q.discrete or not q.reparameterized):
                raise ConfigError(f"estimator {self.estimator!r} needs a reparameterizable "
                                  f"approximation for {name!r}, got {type(q).__name__}")
            if self.estimator == "reparam_analytic_kl":
                prior = t[name].dist
                if not (isinstance(q, Normal) and isinstance(prior, Normal)):
                    raise ConfigError(f"analytic KL needs Normal prior and approximation for "
                                      f"{name!r}, got {type(prior).__name__}/"
                                      f"{type(q).__name__}")
            if self.estimator == "reparam_analytic_entropy" and not isinstance(
                    q, (Normal, Categorical)):
                raise ConfigError(f"no analytic entropy for {type(q).__name__} ({name!r})")

    def build_loss(self, tape: Tape) -> tuple:
        qs = self._realize()
        if self.estimator == "score":
            return self._score_loss(tape, qs)
        scale = self.problem.scale
        S = self.n_samples
        terms = []
        warnings = []
        for _ in range(S):
            try:
                z = self._draw(qs, tape, pathwise=True)
            except NotReparameterizableError as e:
                raise ConfigError(str(e)) from None
            t = self._trace(tape, z)
            if self.estimator == "reparam":
                terms.append(log_joint(t, scale) - self._scaled_q(qs, z))
            elif self.estimator == "reparam_analytic_kl":
                kl = None
                for name, q in qs.items():
                    k = ops.sum(kl_normal_normal(q, t[name].dist))
                    s = scale.get(name, 1.0)
                    if s != 1.0:
                        k = k * s
                    kl = k if kl is None else kl + k
                terms.append(log_joint(t, scale, exclude=qs) - kl)
            else:
                lp = log_joint(t, scale)
                ent = None
                for name, q in qs.items():
                    h = ops.sum(q.entropy())
                    s = scale.get(name, 1.0)
                    if s != 1.0:
                        h = h * s
                    ent = h if ent is None else ent + h
                if abs(float(ent.data)) > abs(float(lp.data)):
                    warnings.append("entropy term dominates the objective")
                terms.append(lp + ent)
        elbo = terms[0]
        for term in terms[1:]:
            elbo = elbo + term
        if S > 1:
            elbo = elbo / float(S)
        return -elbo, {}, warnings[:1]

    # score function ------------------------------------------------------
    def _score_loss(self, tape: Tape, qs: dict) -> tuple:
        scale = self.problem.scale
        S = self.n_samples
        draws = []
        elbo_values = []
        for _ in range(S):
            z = self._draw(qs, tape, pathwise=False)
            t = self._trace(tape, z)
            lp = log_joint(t, scale)
            lq = {n: q.log_prob(z[n]) for n, q in qs.items()}
            f_total = float(lp.data) - sum(scale.get(n, 1.0) * float(np.sum(v.data))
                                           for n, v in lq.items())
            elbo_values.append(f_total)
            signals = {n: (self._local_signal(t, n, z[n], lq_v) if self.local_signals
                           else f_total) for n, lq_v in lq.items()}
            draws.append((lp, lq, signals))
        surrogate = None
        for i, (lp, lq, signals) in enumerate(draws):
            term = lp
            for name, lq_v in lq.items():
                raw = signals[name]
                if self.baseline == "loo":
                    others = sum(d[2][name] for k, d in enumerate(draws) if k != i)
                    signal = raw - others / (S - 1)
                else:
                    signal = raw - self._baseline_value(name)
                s = scale.get(name, 1.0)
                weighted = ops.sum(lq_v * signal) if np.ndim(signal) else ops.sum(lq_v) * signal
                term = term + (weighted * s if s != 1.0 else weighted)
            surrogate = term if surrogate is None else surrogate + term
        if self.baseline == "running":
            for name in qs:
                self._update_baseline(name, np.mean([d[2][name] for d in draws], axis=0))
        loss = -(surrogate / float(S)) if S > 1 else -surrogate
        # the surrogate's value is meaningless; report the negative ELBO estimate instead
        return loss, {"loss": -float(np.mean(elbo_values))}, []

    def _local_signal(self, t, name: str, z: Value, lq_v: Value) -> np.ndarray:
        """Learning signal restricted to model terms that depend on ``z``.

        Terms whose log density shares the latent's leading (plate) shape
        contribute elementwise; other dependent terms contribute their total.
        Terms not downstream of ``z`` on the tape are dropped: their expected
        contribution to the score-function gradient is zero.
        """
        scale = self.problem.scale
        plate = lq_v.shape
        signal = np.zeros(plate)
        downstream = t.tape.descendants(z)
        for rv in t:
            lp = t.log_prob(rv.name)
            if not downstream[lp.index]:
                continue
            s = scale.get(rv.name, 1.0)
            lp = lp.data
            if plate and lp.shape[:len(plate)] == plate:
                axes = tuple(range(len(plate), lp.ndim))
                signal = signal + s * (lp.sum(axis=axes) if axes else lp)
            else:
                signal = signal + s * float(np.sum(lp))
        return signal - scale.get(name, 1.0) * lq_v.data

    def _baseline_value(self, name: str):
        b = self._b.get(name) if self.baseline == "running" else None
        return 0.0 if b is None else b

    def _update_baseline(self, name: str, signal) -> None:
        b = self._b.get(name)
        self._b[name] = (np.array(signal, dtype=np.float64) if b is None
                         else self.decay * b + (1.0 - self.decay) * signal)

    def reset_baselines(self) -> None:
        self._b = {}


@register("map")
class MAP(VariationalInference):
    """Point estimation: PointMass approximations, loss = negative log joint."""

    family = "PointMass"
    objective = "negative log joint"
    update_rule = "gradient descent"

    def _check_family(self, qs, t) -> None:
        for name, q in qs.items():
            if not isinstance(q, PointMass):
                raise ConfigError(f"MAP requires PointMass approximations; {name!r} is "
                                  f"{type(q).__name__}")

    def build_loss(self, tape: Tape) -> tuple:
        qs = self._realize()
        for name, q in qs.items():
            if not isinstance(q, PointMass):
                raise ConfigError(f"MAP requires PointMass approximations; {name!r} is "
                                  f"{type(q).__name__}")
        z = {name: q.rsample() for name, q in qs.items()}
        t = self._trace(tape, z)
        return -log_joint(t, self.problem.scale), {}, []


@register("iwae")
class IWAE(VariationalInference):
    """Importance-weighted bound ``log (1/K) sum_k p(x, z_k) / q(z_k)`` with pathwise gradients."""

    objective = "negative importance-weighted bound"
    update_rule = "stochastic gradient (reparameterization)"

    def __init__(self, problem: InferenceProblem, K: int = 5, seed=0):
        super().__init__(problem, seed)
        if K < 1:
            raise ConfigError("K must be >= 1")
        self.K = K

    def _check_family(self, qs, t) -> None:
        for name, q in qs.items():
            if q.discrete or not q.reparameterized:
                raise ConfigError(f"IWAE needs a reparameterizable approximation for {name!r}")

    def log_weights(self, tape: Tape, qs: Optional[dict] = None) -> list:
        qs = qs if qs is not None else self._realize()
        out = []
        for _ in range(self.K):
            z = self._draw(qs, tape, pathwise=True)
            t = self._trace(tape, z)
            out.append(log_joint(t, self.problem.scale) - self._scaled_q(qs, z))
        return out

    def build_loss(self, tape: Tape) -> tuple:
        w = self.log_weights(tape)
        stacked = ops.concat([ops.reshape(v, (1,)) for v in w])
        bound = ops.logsumexp(stacked, axis=0) - math.log(self.K)
        return -bound, {}, []


def variational_em(e_step: VariationalInference, m_step: MAP, n_outer: int,
                   inner: int = 1, feeds=None, print_every: int = 0, reporter=None) -> list:
    """Alternate E-step updates over local variables with MAP M-step updates of globals.

    The two problems must cross-bind: every latent of one appears in the
    other's data map, bound to the very same approximation object.
    """
    for a, b in ((e_step, m_step), (m_step, e_step)):
        for name, q in a.problem.latent.items():
            if b.problem.data.get(name) is not q:
                raise ConfigError(f"cross-binding missing: {name!r} must be bound to the same "
                                  "approximation in both problems")
    from ppltape.compose import alternate

    return alternate([(e_step, inner), (m_step, 1)], n_outer, feeds=feeds,
                     print_every=print_every, reporter=reporter)
