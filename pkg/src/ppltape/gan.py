"""Adversarial training of a generative model against a discriminator network."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from ppltape.autodiff import Tape, ops
from ppltape.autodiff.ops import lift
from ppltape.errors import ConfigError, ShapeError
from ppltape.infer import Adam, Inference, InferenceProblem, Optimizer, register
from ppltape.model import trace


def discriminator_loss(real_logits, fake_logits):
    """Mean binary cross-entropy with logits: real labelled 1, fake labelled 0."""
    real_logits = ops.reshape(real_logits, (-1,))
    fake_logits = ops.reshape(fake_logits, (-1,))
    return ops.mean(ops.concat([ops.softplus(-real_logits), ops.softplus(fake_logits)]))


def generator_loss(fake_logits):
    """Non-saturating generator loss ``mean(-log sigmoid(D(fake)))``."""
    return ops.mean(ops.softplus(-ops.reshape(fake_logits, (-1,))))


@register("gan")
class GANInference(Inference):
    """Alternating discriminator/generator updates.

    The problem's model is the generator: it draws its own noise variables
    (left unbound, so they are sampled afresh each step) and returns the
    generated batch. ``problem.data`` holds exactly one entry, the real batch
    (array or feed slot).

    Args:
        discriminator: maps a batch Value to logits of shape ``[batch]`` or
            ``[batch, 1]``; owns its own Parameters.
        d_steps: discriminator updates per generator update.
    """

    family = "implicit (generator network)"
    objective = "discriminator cross-entropy / non-saturating generator loss"
    update_rule = "alternating gradient steps on disjoint parameter sets"

    def __init__(self, problem: InferenceProblem, discriminator: Callable,
                 d_steps: int = 1, seed=0):
        super().__init__(problem, seed)
        if len(problem.data) != 1:
            raise ConfigError("GAN inference takes exactly one data entry (the real batch)")
        if problem.latent:
            raise ConfigError("GAN inference has no latent approximations")
        if d_steps < 1:
            raise ConfigError("d_steps must be at least 1")
        self.discriminator = discriminator
        self.d_steps = d_steps
        self.d_optimizer: Optional[Optimizer] = None
        self.g_optimizer: Optional[Optimizer] = None
        self.d_params: set = set()
        self.g_params: set = set()
        self.last_grads: dict = {}

    @property
    def real(self):
        return next(iter(self.problem.data.values()))

    def _initialize(self, d_optimizer: Optional[Optimizer] = None,
                    g_optimizer: Optional[Optimizer] = None, **config) -> None:
        super()._initialize(**config)
        self.d_optimizer = d_optimizer or self.d_optimizer or Adam(0.001)
        self.g_optimizer = g_optimizer or self.g_optimizer or Adam(0.001)
        if self.d_optimizer is self.g_optimizer:
            raise ConfigError("generator and discriminator need separate optimizers")
        self.d_optimizer.reset()
        self.g_optimizer.reset()
        restore = [s for s in self.problem.slots if not s.fed]
        for s in restore:
            s.feed(np.zeros(s.shape))
        try:
            with Tape() as tape:
                with tape.watching_params() as g_read:
                    fake = self._generate(tape, np.random.default_rng(0))
                with tape.watching_params() as d_read:
                    real = lift(self.real, tape)
                    if real.shape != fake.shape:
                        raise ShapeError(f"generated batch has shape {fake.shape}, "
                                         f"real batch has shape {real.shape}")
                    logits = self.discriminator(real)
                    self._check_logits(logits, real)
        finally:
            for s in restore:
                s.clear()
        overlap = g_read & d_read
        if overlap:
            raise ConfigError("generator and discriminator share parameters: "
                              f"{sorted(p.name for p in overlap)}")
        self.g_params = {p for p in g_read if p.trainable}
        self.d_params = {p for p in d_read if p.trainable}
        self.d_optimizer.slots_for(self.d_params)
        self.g_optimizer.slots_for(self.g_params)

    @staticmethod
    def _check_logits(logits, real) -> None:
        n = real.shape[0] if real.shape else 1
        if logits.shape not in ((n,), (n, 1)):
            raise ShapeError(f"discriminator must return shape [{n}] or [{n}, 1], "
                             f"got {logits.shape}")

    def _generate(self, tape: Tape, rng: np.random.Generator):
        t = trace(self.problem.model, {}, rng, tape, check_bindings=False)
        if t.result is None:
            raise ConfigError("generator model must return the generated batch")
        return lift(t.result, tape)

    def losses(self, tape: Tape) -> tuple:
        """Discriminator and generator losses on one fresh fake batch (diagnostic)."""
        fake = self._generate(tape, self.rng)
        real = lift(self.real, tape)
        fl = self.discriminator(fake)
        return discriminator_loss(self.discriminator(real), fl), generator_loss(fl)

    def d_update(self) -> tuple:
        with Tape() as tape:
            tape.freeze(self.g_params)
            fake = ops.stop_gradient(self._generate(tape, self.rng))
            real = lift(self.real, tape)
            loss = discriminator_loss(self.discriminator(real), self.discriminator(fake))
            grads = tape.backward(loss)
        self.last_grads["d"] = grads
        value = float(loss.data)
        ok = math.isfinite(value) and self.d_optimizer.step(
            {p: g for p, g in grads.items() if p in self.d_params})
        return value, not ok

    def g_update(self) -> tuple:
        with Tape() as tape:
            tape.freeze(self.d_params)
            fake = self._generate(tape, self.rng)
            loss = generator_loss(self.discriminator(fake))
            grads = tape.backward(loss)
        self.last_grads["g"] = grads
        value = float(loss.data)
        ok = math.isfinite(value) and self.g_optimizer.step(
            {p: g for p, g in grads.items() if p in self.g_params})
        return value, not ok

    def _step(self) -> tuple:
        diverged = False
        for _ in range(self.d_steps):
            d_loss, bad = self.d_update()
            diverged |= bad
        g_loss, bad = self.g_update()
        diverged |= bad
        return {"d_loss": d_loss, "g_loss": g_loss}, diverged, []
