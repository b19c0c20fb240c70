"""A small variational auto-encoder on synthetic 8x8 binary images.

The generative model and the inference network are ordinary functions built
from tape ops. Both read the same feed slot for the image batch, so one
``update`` trains encoder and decoder jointly with the pathwise ELBO.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ppltape.autodiff import Parameter, Tape, ops
from ppltape.data import spawn_rngs
from ppltape.dists import Bernoulli, Normal
from ppltape.errors import ConfigError
from ppltape.infer import FeedSlot, InferenceProblem, RMSProp
from ppltape.model import log_joint, trace


@dataclass
class VAEToySpec:
    d: int = 2
    M: int = 100
    side: int = 8
    hidden: int = 32

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("latent dimension d must be at least 1")
        if self.M < 1 or self.side < 1 or self.hidden < 1:
            raise ConfigError("M, side and hidden must be positive")

    @property
    def pixels(self) -> int:
        return self.side * self.side


def prototypes(side: int = 8) -> np.ndarray:
    """Two fixed binary patterns: a filled centre square and a diagonal cross."""
    a = np.zeros((side, side))
    lo, hi = side // 4, side - side // 4
    a[lo:hi, lo:hi] = 1.0
    b = np.zeros((side, side))
    idx = np.arange(side)
    b[idx, idx] = 1.0
    b[idx, side - 1 - idx] = 1.0
    return np.stack([a.ravel(), b.ravel()])


def make_images(n: int, side: int = 8, noise: float = 0.1, seed: int = 0) -> tuple:
    """``n`` noisy copies of the prototypes; returns ``(images, labels)``."""
    rng_label, rng_flip = spawn_rngs(seed, 2)
    protos = prototypes(side)
    labels = rng_label.integers(0, len(protos), size=n)
    flips = rng_flip.uniform(size=(n, side * side)) < noise
    images = np.abs(protos[labels] - flips)
    return images, labels


def _dense(name: str, n_in: int, n_out: int, rng: np.random.Generator):
    w = Parameter(f"{name}/w", rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)))
    b = Parameter(f"{name}/b", np.zeros(n_out))
    return w, b


class ToyVAE:
    """Decoder ``p(x | z)``, encoder ``q(z | x)`` and their training problem."""

    def __init__(self, spec: Optional[VAEToySpec] = None, seed: int = 0):
        self.spec = spec = spec or VAEToySpec()
        rng_dec, rng_enc = spawn_rngs(seed, 2)
        P, H, d = spec.pixels, spec.hidden, spec.d
        self.decoder = [_dense("dec/h", d, H, rng_dec), _dense("dec/out", H, P, rng_dec)]
        self.encoder = [_dense("enc/h", P, H, rng_enc), _dense("enc/loc", H, d, rng_enc),
                        _dense("enc/scale", H, d, rng_enc)]
        self.x = FeedSlot("x", (spec.M, P))

    def decoder_params(self) -> list:
        return [p for layer in self.decoder for p in layer]

    def encoder_params(self) -> list:
        return [p for layer in self.encoder for p in layer]

    def logits(self, z):
        (w1, b1), (w2, b2) = self.decoder
        h = ops.relu(ops.matmul(z, w1) + b1)
        return ops.matmul(h, w2) + b2

    def model(self, n: Optional[int] = None):
        """Generative model over a batch of ``n`` images (default ``M``)."""
        n = n or self.spec.M
        d = self.spec.d

        def model(t):
            z = t.rv("z", Normal(np.zeros((n, d)), 1.0))
            t.rv("x", Bernoulli(logits=self.logits(z)))

        return model

    def encode(self, x):
        (w1, b1), (wl, bl), (ws, bs) = self.encoder
        h = ops.relu(ops.matmul(x, w1) + b1)
        return ops.matmul(h, wl) + bl, ops.softplus(ops.matmul(h, ws) + bs)

    def posterior(self, x):
        """Factory for ``q(z | x)`` evaluated on the current tape."""
        return lambda: Normal(*self.encode(x))

    def problem(self) -> InferenceProblem:
        return InferenceProblem(self.model(), latent={"z": self.posterior(self.x)},
                                data={"x": self.x})

    def elbo(self, images: np.ndarray, rng: np.random.Generator, n_samples: int = 1) -> float:
        """Average per-image ELBO estimate (nats) on ``images``."""
        check_binary(images)
        images = np.asarray(images, dtype=np.float64)
        n = images.shape[0]
        total = 0.0
        for _ in range(n_samples):
            with Tape() as tape:
                q = Normal(*self.encode(tape.constant(images)))
                z = q.rsample(rng)
                t = trace(self.model(n), {"z": z, "x": images}, rng, tape)
                total += float(log_joint(t).data) - float(ops.sum(q.log_prob(z)).data)
        return total / (n_samples * n)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Bernoulli means of ``p(x | z = E[q(z | x)])``."""
        with Tape() as tape:
            loc, _ = self.encode(tape.constant(np.asarray(images, dtype=np.float64)))
            return 1.0 / (1.0 + np.exp(-self.logits(loc).data))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral samples of pixel means from the same model function."""
        with Tape() as tape:
            t = trace(self.model(n), {}, rng, tape)
            return 1.0 / (1.0 + np.exp(-self.logits(t["z"].value).data))


def check_binary(images) -> None:
    arr = np.asarray(images)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ConfigError("VAE data must be binary (0/1)")


def default_optimizer() -> RMSProp:
    return RMSProp(0.01, epsilon=1.0)


def vae_fit(vae: ToyVAE, train: np.ndarray, held_out: np.ndarray, n_epochs: int,
            seed: int = 0, inference=None, reporter=None, eval_samples: int = 10) -> dict:
    """Train on shuffled minibatches; report held-out ELBO before and after.

    Args:
        inference: a configured inference over ``vae.problem()``; defaults
            to pathwise KLqp with RMSProp(0.01, epsilon=1.0).
    """
    from ppltape.vi import KLqp

    check_binary(train)
    check_binary(held_out)
    M = vae.spec.M
    if train.shape[0] < M:
        raise ConfigError(f"need at least M={M} training images")
    rng_shuffle, rng_eval, rng_inf = spawn_rngs(seed, 3)
    if inference is None:
        inference = KLqp(vae.problem(), seed=rng_inf)
        inference.initialize(optimizer=default_optimizer())
    elif not inference.initialized:
        inference.initialize()
    eval_seed = int(rng_eval.integers(2 ** 32))
    before = vae.elbo(held_out, np.random.default_rng(eval_seed), eval_samples)
    per_epoch = train.shape[0] // M
    history = []
    for epoch in range(n_epochs):
        order = rng_shuffle.permutation(train.shape[0])
        for b in range(per_epoch):
            diag = inference.update({vae.x: train[order[b * M:(b + 1) * M]]})
            history.append(diag)
            if reporter is not None:
                reporter(diag)
    after = vae.elbo(held_out, np.random.default_rng(eval_seed), eval_samples)
    return {"held_out_elbo_init": before, "held_out_elbo": after,
            "improvement": after - before, "history": history}
