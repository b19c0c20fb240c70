"""Composing inferences: alternation (variational EM) and the minibatch SVI recipe."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ppltape.autodiff import Parameter
from ppltape.errors import ConfigError, ShapeError
from ppltape.infer import Diagnostics, FeedSlot, Inference, _print_progress, resolve_feeds


def alternate(schedule: Sequence[tuple], n_outer: int, feeds=None, print_every: int = 0,
              reporter: Optional[Callable[[Diagnostics], None]] = None) -> list:
    """Run ``n_outer`` rounds; each round calls ``update`` ``inner`` times per inference.

    Args:
        schedule: sequence of ``(inference, inner)`` pairs, run in order.
        feeds: mapping or ``outer_step -> mapping`` shared by every inference
            in the round; each inference receives only its own slots.

    Returns:
        One list per round holding that round's diagnostics in call order.
    """
    if n_outer < 1:
        raise ConfigError("n_outer must be at least 1")
    for inf, inner in schedule:
        if inner < 0:
            raise ConfigError("inner iteration counts must be non-negative")
        if not inf.initialized:
            inf.initialize()
    rounds = []
    for i in range(n_outer):
        fed = resolve_feeds(feeds, i) or {}
        diags = []
        summary = {}
        for j, (inf, inner) in enumerate(schedule):
            own = _restrict(fed, inf)
            for _ in range(inner):
                d = inf.update(own)
                diags.append(d)
                summary.update({f"{j}.{k}": v for k, v in d.metrics.items()})
        rounds.append(diags)
        if print_every and ((i + 1) % print_every == 0 or i == n_outer - 1):
            (reporter or _print_progress)(Diagnostics(i + 1, summary))
    return rounds


def _restrict(feeds, inf: Inference) -> dict:
    names = {s.name for s in inf.problem.slots}
    return {k: v for k, v in feeds.items()
            if (k.name if isinstance(k, FeedSlot) else k) in names}


class SVIRecipe:
    """Stochastic VI over minibatches with per-batch local factors.

    For each minibatch of exactly ``M`` rows: ``inner`` updates of the local
    inference (local factors given the current globals), one update of the
    global inference, then the local variational parameters are restored to
    copies of their initial values so the next batch starts fresh. The local
    optimizer's moment estimates and any running baselines are cleared at the
    same time, since they describe the previous batch's factors. Local
    storage is therefore sized by ``M`` only.

    Args:
        global_inf: inference over global latents; data includes the local
            approximation and the minibatch slot.
        local_inf: inference over local latents of the minibatch.
        local_params: Parameters of the local approximation (reset each step).
        slot: the minibatch feed slot shared by both problems.
        M: minibatch size.
        inner: local updates per minibatch.
        reset: restore local parameters after each step.
    """

    def __init__(self, global_inf: Inference, local_inf: Inference,
                 local_params: Iterable[Parameter], slot: FeedSlot, M: int,
                 inner: int = 10, reset: bool = True):
        if M < 1:
            raise ConfigError("M must be at least 1")
        if inner < 0:
            raise ConfigError("inner must be non-negative")
        if slot.shape[0] != M:
            raise ConfigError(f"feed slot {slot.name!r} has {slot.shape[0]} rows, M={M}")
        self.global_inf = global_inf
        self.local_inf = local_inf
        self.local_params = list(local_params)
        for p in self.local_params:
            if p.shape[:1] != (M,):
                raise ConfigError(f"local parameter {p.name!r} has shape {p.shape}; "
                                  f"its leading axis must be the minibatch size {M}")
        self.initial = {p: p.value.copy() for p in self.local_params}
        self.slot = slot
        self.M = M
        self.inner = inner
        self.reset = reset
        self.n_steps = 0

    def initialize(self, global_config: Optional[dict] = None,
                   local_config: Optional[dict] = None) -> "SVIRecipe":
        self.global_inf.initialize(**(global_config or {}))
        self.local_inf.initialize(**(local_config or {}))
        self.n_steps = 0
        return self

    def local_storage(self) -> int:
        """Number of scalars held by local variational parameters."""
        return int(sum(np.prod(p.shape) for p in self.local_params))

    def reset_local(self) -> None:
        """Restore local parameters and clear per-batch optimizer and baseline state."""
        for p, v in self.initial.items():
            p.assign(v)
        opt = getattr(self.local_inf, "optimizer", None)
        if opt is not None:
            opt.reset()
        if hasattr(self.local_inf, "reset_baselines"):
            self.local_inf.reset_baselines()

    def svi_step(self, batch) -> Diagnostics:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[:1] != (self.M,):
            raise ShapeError(f"minibatch must have exactly M={self.M} rows, "
                             f"got shape {batch.shape}")
        if not (self.global_inf.initialized and self.local_inf.initialized):
            self.initialize()
        feeds = {self.slot: batch}
        metrics: dict = {}
        diverged = False
        warnings: list = []
        for _ in range(self.inner):
            d = self.local_inf.update(feeds)
            diverged |= d.diverged
            metrics["local_loss"] = d.metrics.get("loss")
        d = self.global_inf.update(feeds)
        diverged |= d.diverged
        warnings += d.warnings
        metrics["loss"] = d.metrics.get("loss")
        if self.reset:
            self.reset_local()
        self.n_steps += 1
        return Diagnostics(self.n_steps, metrics, 0.0, diverged, warnings)

    def run(self, batches: Callable[[int], np.ndarray], n_iter: int, print_every: int = 0,
            reporter=None) -> list:
        out = []
        for i in range(n_iter):
            diag = self.svi_step(batches(i))
            out.append(diag)
            if print_every and (diag.step % print_every == 0 or i == n_iter - 1):
                (reporter or _print_progress)(diag)
        return out
