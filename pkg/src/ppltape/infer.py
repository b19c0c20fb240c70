"""Inference as an object: a problem, an approximation family and an update rule.

Every algorithm subclasses :class:`Inference` and follows the same life cycle::

    inference = KLqp(problem, seed=0)
    inference.initialize(optimizer=Adam(0.01))
    for _ in range(1000):
        inference.update(feeds={x_ph: next_batch()})

``run`` is exactly that loop. Each ``update`` builds a fresh tape, so models
may contain arbitrary host-language control flow.
"""

from __future__ import annotations

import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Union

import numpy as np

from ppltape.autodiff import Parameter, Tape
from ppltape.autodiff.tape import Arithmetic, Value
from ppltape.errors import ConfigError, FeedError, ShapeError, SupportError
from ppltape.model import is_approximation, trace

logger = logging.getLogger(__name__)


class FeedSlot(Arithmetic):
    """Named placeholder for data that changes between updates (e.g. minibatches)."""

    def __init__(self, name: str, shape):
        self.name = name
        self.shape = tuple(shape)
        self._value: Optional[np.ndarray] = None
        self._cache: Optional[tuple] = None

    def feed(self, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"feed slot {self.name!r} expects shape {self.shape}, "
                             f"got {arr.shape}")
        self._value = arr
        self._cache = None

    def clear(self) -> None:
        self._value = None
        self._cache = None

    @property
    def fed(self) -> bool:
        return self._value is not None

    @property
    def value(self) -> np.ndarray:
        if self._value is None:
            raise FeedError(f"feed slot {self.name!r} was not fed")
        return self._value

    def _as_value(self, tape: Tape) -> Value:
        if self._cache is not None and self._cache[0] is tape:
            return self._cache[1]
        v = tape.constant(self.value)
        self._cache = (tape, v)
        return v

    def __repr__(self):
        return f"FeedSlot({self.name!r}, shape={self.shape})"


class InferenceProblem:
    """Model plus the three maps an inference needs.

    Args:
        model: function of a :class:`~ppltape.model.Trace` creating random variables.
        latent: variable name -> approximating distribution (or a zero-argument
            factory returning one, evaluated on every tape).
        data: variable name -> observed tensor, :class:`FeedSlot`, or another
            inference's approximation (conditioning on its current value).
        scale: variable name -> positive multiplier of its log density (N/M for
            minibatched local variables).
        slots: extra feed slots used outside ``data`` (e.g. by an inference network).
    """

    def __init__(self, model: Callable, latent: Optional[Mapping[str, Any]] = None,
                 data: Optional[Mapping[str, Any]] = None,
                 scale: Optional[Mapping[str, float]] = None, slots: Iterable[FeedSlot] = ()):
        self.model = model
        self.latent = dict(latent or {})
        self.data = dict(data or {})
        self.scale = dict(scale or {})
        overlap = set(self.latent) & set(self.data)
        if overlap:
            raise ConfigError(f"variables bound as both latent and data: {sorted(overlap)}")
        for name, s in self.scale.items():
            if not (isinstance(s, (int, float)) and s > 0 and math.isfinite(s)):
                raise ConfigError(f"scale for {name!r} must be a positive real, got {s!r}")
        self.slots = list(slots)
        for v in self.data.values():
            if isinstance(v, FeedSlot) and v not in self.slots:
                self.slots.append(v)

    def data_bindings(self) -> dict:
        return dict(self.data)


# --- optimizers -------------------------------------------------------------

class Optimizer:
    """Gradient-descent style update of parameters; gradients are of a loss to minimize."""

    kind = ""

    def __init__(self, lr: float):
        if not lr > 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.state: dict = {}
        self.skipped = 0

    def reset(self) -> None:
        self.state = {}
        self.skipped = 0

    def slots_for(self, params: Iterable[Parameter]) -> None:
        for p in params:
            if p not in self.state:
                self.state[p] = self._init_slot(p)

    def _init_slot(self, p: Parameter):
        return None

    def step(self, grads: Mapping[Parameter, np.ndarray]) -> bool:
        """Apply one update; returns False (and writes nothing) on non-finite gradients."""
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
        self._begin()
        for p, g in grads.items():
            if p not in self.state:
                self.state[p] = self._init_slot(p)
            p.assign(p.value - self._delta(p, g))
        return True

    def _begin(self) -> None:
        pass

    def _delta(self, p: Parameter, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, lr: float = 0.01):
        super().__init__(lr)

    def _delta(self, p, g):
        return self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def reset(self):
        super().reset()
        self.t = 0

    def _init_slot(self, p):
        return [np.zeros(p.shape), np.zeros(p.shape)]

    def _begin(self):
        self.t += 1

    def _delta(self, p, g):
        m, v = self.state[p]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class RMSProp(Optimizer):
    """RMSProp with epsilon inside the square root (``epsilon=1.0`` tames early steps)."""

    kind = "rmsprop"

    def __init__(self, lr: float = 0.01, decay: float = 0.9, momentum: float = 0.0,
                 epsilon: float = 1e-10):
        super().__init__(lr)
        self.decay, self.momentum, self.epsilon = decay, momentum, epsilon

    def _init_slot(self, p):
        return [np.zeros(p.shape), np.zeros(p.shape)]

    def _delta(self, p, g):
        ms, mom = self.state[p]
        ms *= self.decay
        ms += (1.0 - self.decay) * g * g
        mom *= self.momentum
        mom += self.lr * g / np.sqrt(ms + self.epsilon)
        return mom


def make_optimizer(kind: str, lr: Optional[float] = None, **kwargs) -> Optimizer:
    classes = {"sgd": SGD, "adam": Adam, "rmsprop": RMSProp}
    if kind not in classes:
        raise ConfigError(f"unknown optimizer {kind!r}")
    return classes[kind](**({} if lr is None else {"lr": lr}), **kwargs)


# --- diagnostics ------------------------------------------------------------

@dataclass
class Diagnostics:
    step: int
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    diverged: bool = False
    warnings: list = field(default_factory=list)

    def record(self, timing: bool = True) -> dict:
        rec: dict = {"step": self.step}
        rec.update({k: _jsonable(v) for k, v in self.metrics.items()})
        if self.diverged:
            rec["diverged"] = True
        if self.warnings:
            rec["warnings"] = list(self.warnings)
        if timing:
            rec["wall_clock"] = self.wall_clock
        return rec


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


FeedsLike = Union[None, Mapping, Callable[[int], Mapping]]


def resolve_feeds(feeds: FeedsLike, step: int) -> Optional[Mapping]:
    if feeds is None or isinstance(feeds, Mapping):
        return feeds
    return feeds(step)


# --- inference base ---------------------------------------------------------

class Inference:
    """Base class: ``initialize`` -> repeated ``update`` -> results in the approximations.

    Subclasses set ``family`` (the approximation family), ``objective`` (the
    loss or transition rule) and ``update_rule``, and implement ``_step``.
    """

    family = ""
    objective = ""
    update_rule = ""

    def __init__(self, problem: InferenceProblem, seed=0):
        self.problem = problem
        self.seed = seed
        self.rng = make_rng(seed)
        self.n_steps = 0
        self.initialized = False

    # life cycle ------------------------------------------------------------
    def initialize(self, **config) -> "Inference":
        """(Re)create algorithm state. Re-initializing zeroes counters and slots."""
        if "scale" in config and config["scale"] is not None:
            self.problem.scale = dict(config.pop("scale"))
        config.pop("scale", None)
        if not isinstance(self.seed, np.random.Generator):
            self.rng = make_rng(self.seed)
        self.n_steps = 0
        self._initialize(**config)
        self.initialized = True
        return self

    def _initialize(self, **config) -> None:
        if config:
            raise ConfigError(f"unknown configuration keys: {sorted(config)}")

    def _feed(self, feeds: Optional[Mapping]) -> None:
        feeds = dict(feeds or {})
        by_name = {s.name: s for s in self.problem.slots}
        for key, value in feeds.items():
            slot = by_name.get(key) if isinstance(key, str) else key
            if slot is None or slot not in self.problem.slots:
                raise FeedError(f"unknown feed slot {key!r}")
            slot.feed(value)
        for slot in self.problem.slots:
            if slot not in feeds and slot.name not in feeds:
                raise FeedError(f"feed slot {slot.name!r} was not fed")

    def update(self, feeds: Optional[Mapping] = None) -> Diagnostics:
        if not self.initialized:
            self.initialize()
        self._feed(feeds)
        start = time.perf_counter()
        metrics, diverged, warnings = self._step()
        self.n_steps += 1
        return Diagnostics(self.n_steps, metrics, time.perf_counter() - start,
                           diverged, warnings)

    def _step(self) -> tuple:
        raise NotImplementedError

    def run(self, n_iter: int, feeds: FeedsLike = None, print_every: int = 0,
            reporter: Optional[Callable[[Diagnostics], None]] = None) -> list:
        """Call :meth:`update` ``n_iter`` times; ``feeds`` may be a mapping or ``step -> mapping``."""
        if n_iter < 1:
            raise ConfigError("n_iter must be at least 1")
        if not self.initialized:
            self.initialize()
        out = []
        for i in range(n_iter):
            diag = self.update(resolve_feeds(feeds, i))
            out.append(diag)
            if print_every and (diag.step % print_every == 0 or i == n_iter - 1):
                (reporter or _print_progress)(diag)
        return out

    def describe(self) -> dict:
        return {"family": self.family, "objective": self.objective,
                "update_rule": self.update_rule}

    # helpers ---------------------------------------------------------------
    def _dry_trace(self, bindings: Mapping) -> Any:
        """Trace the model once with throwaway randomness to validate the problem."""
        restore = {}
        for slot in self.problem.slots:
            if not slot.fed:
                restore[slot] = None
                slot.feed(np.zeros(slot.shape))
        try:
            with Tape() as tape:
                t = trace(self.problem.model, bindings, np.random.default_rng(0), tape)
                return t
        finally:
            for slot in restore:
                slot.clear()


def _print_progress(diag: Diagnostics) -> None:
    parts = " ".join(f"{k}={v:.4g}" for k, v in diag.metrics.items()
                     if isinstance(v, (int, float)))
    print(f"[{diag.step}] {parts}", file=sys.stderr)


class OptimizationInference(Inference):
    """Inference whose update is one gradient step on a scalar loss."""

    default_optimizer: Callable[[], Optimizer] = Adam

    def __init__(self, problem: InferenceProblem, seed=0):
        super().__init__(problem, seed)
        self.optimizer: Optional[Optimizer] = None
        self.var_list: Optional[list] = None
        self._frozen: set = set()

    def _initialize(self, optimizer: Optional[Optimizer] = None, var_list=None,
                    **config) -> None:
        super()._initialize(**config)
        if optimizer is not None:
            self.optimizer = optimizer
        elif self.optimizer is None:
            self.optimizer = self.default_optimizer()
        self.optimizer.reset()
        self.var_list = list(var_list) if var_list is not None else None
        self._validate()
        params = self.trainable_parameters()
        if params is not None:
            self.optimizer.slots_for(params)

    def _validate(self) -> None:
        pass

    def trainable_parameters(self) -> Optional[list]:
        """Parameters this inference writes, discovered by one throwaway loss build."""
        if self.var_list is not None:
            return self.var_list
        restore = []
        for slot in self.problem.slots:
            if not slot.fed:
                restore.append(slot)
                slot.feed(np.zeros(slot.shape))
        saved_rng = self.rng
        self.rng = np.random.default_rng(0)
        try:
            with Tape() as tape:
                self._frozen = set()
                loss, _, _ = self.build_loss(tape)
                grads = tape.backward(loss)
            return self._select(grads).keys()
        except SupportError:
            return None
        finally:
            self.rng = saved_rng
            for slot in restore:
                slot.clear()

    def build_loss(self, tape: Tape) -> tuple:
        """Return ``(loss Value, metrics dict, warnings list)`` built on ``tape``."""
        raise NotImplementedError

    def _select(self, grads: Mapping[Parameter, np.ndarray]) -> dict:
        if self.var_list is not None:
            keep = set(self.var_list)
            return {p: g for p, g in grads.items() if p in keep}
        return {p: g for p, g in grads.items() if p not in self._frozen}

    def loss_and_grads(self, feeds: Optional[Mapping] = None) -> tuple:
        """Evaluate the loss and its gradients without updating anything."""
        if feeds is not None:
            self._feed(feeds)
        with Tape() as tape:
            self._frozen = set()
            loss, metrics, _ = self.build_loss(tape)
            grads = self._select(tape.backward(loss))
        return metrics.get("loss", float(loss.data)), grads

    def _step(self) -> tuple:
        with Tape() as tape:
            self._frozen = set()
            loss, metrics, warnings = self.build_loss(tape)
            grads = self._select(tape.backward(loss))
        value = metrics.pop("loss", float(loss.data))
        metrics = {"loss": value, **metrics}
        diverged = not math.isfinite(value)
        if not diverged:
            diverged = not self.optimizer.step(grads)
        else:
            self.optimizer.skipped += 1
        if diverged:
            logger.warning("non-finite loss or gradient at step %d; update skipped",
                           self.n_steps + 1)
        metrics["grad_norm"] = float(np.sqrt(sum(float(np.sum(g * g))
                                                 for g in grads.values())))
        return metrics, diverged, warnings


def check_unbound(t, problem: InferenceProblem) -> None:
    """Every variable the model creates must be latent or data."""
    bound = set(problem.latent) | set(problem.data)
    missing = [n for n in t.names() if n not in bound]
    if missing:
        raise ConfigError(f"latent variables without an approximation or data: {missing}")


def data_value_is_approx(v) -> bool:
    return is_approximation(v) and not isinstance(v, FeedSlot)


ALGORITHMS: dict = {}


def register(name: str):
    def deco(cls):
        ALGORITHMS[name] = cls
        return cls
    return deco
