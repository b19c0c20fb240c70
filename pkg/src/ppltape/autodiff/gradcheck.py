"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ppltape.autodiff.tape import Parameter, Tape, Value
from ppltape.errors import NonDeterministicError


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # parameter name -> max relative error
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients meaningful."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _evaluate(builder: Callable[[], Value]) -> float:
    with Tape():
        return float(builder().data)


def grad_check(builder: Callable[[], Value], params: Sequence[Parameter],
               h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare ``backward`` against central differences for every parameter element.

    ``builder`` takes no arguments and returns a scalar Value built on the
    active tape from ``params``. It must be deterministic.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("step h must lie in (0, 1e-2]")
    with Tape() as tape:
        root = builder()
        grads = tape.backward(root)
    if _evaluate(builder) != float(root.data):
        raise NonDeterministicError("builder returned different values on identical inputs")

    report = GradCheckReport(tol=tol)
    for p in params:
        if not p.trainable:
            continue
        analytic = grads.get(p, np.zeros(p.shape))
        base = p.value.copy()
        numeric = np.zeros(p.shape)
        try:
            for i in np.ndindex(*p.shape):
                bumped = base.copy()
                bumped[i] = base[i] + h
                p.assign(bumped)
                f_plus = _evaluate(builder)
                bumped[i] = base[i] - h
                p.assign(bumped)
                f_minus = _evaluate(builder)
                numeric[i] = (f_plus - f_minus) / (2.0 * h)
        finally:
            p.assign(base)
        err = relative_error(analytic, numeric)
        report.errors[p.name] = float(err.max()) if err.size else 0.0
    return report
