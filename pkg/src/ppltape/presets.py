"""Bundled (model, inference) runs used by ``ppltape fit``.

Each run builds its data, problem and inference from a :class:`RunConfig`,
streams per-step records through ``emit`` and returns a summary record.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ppltape.autodiff import Parameter, ops
from ppltape.compose import SVIRecipe, alternate
from ppltape.data import make_gmm, make_logreg, read_csv, spawn_rngs
from ppltape.dists import Beta, Empirical, Normal, PointMass, merge_chains
from ppltape.errors import ConfigError, DivergenceError
from ppltape.gan import GANInference
from ppltape.infer import Adam, Diagnostics, FeedSlot, InferenceProblem
from ppltape.mc import HMC, SGLD, MetropolisHastings
from ppltape.models import (beta_bernoulli, categorical_approx, farthest_point_init, gmm,
                            logreg, normal_approx, point_approx)
from ppltape.vi import IWAE, KLqp, MAP, variational_em

KLQP_VARIANTS = {"klqp": "reparam", "klqp-akl": "reparam_analytic_kl",
                 "klqp-aent": "reparam_analytic_entropy", "klqp-score": "score"}
SAMPLERS = ("hmc", "sgld", "mh")

COMPATIBILITY = {
    "beta-bernoulli": ("klqp-score", "map", "hmc", "sgld", "mh"),
    "gmm": ("vem", "svi", "klqp-score"),
    "logreg": ("klqp", "klqp-score", "klqp-akl", "klqp-aent", "iwae", "map", "hmc", "sgld",
               "mh"),
    "vae-toy": ("klqp", "klqp-akl", "klqp-aent", "klqp-score", "iwae"),
    "gan-1d": ("gan",),
    "dp-sim": (),
}
INFERENCES = ("klqp", "klqp-score", "klqp-akl", "klqp-aent", "iwae", "map", "hmc", "sgld",
              "mh", "gan", "vem", "svi")

# why a pair is rejected, for pairs whose reason is more specific than "not bundled"
_REASONS = {
    ("gmm", "hmc"): "the mixture has discrete assignments; gradient samplers need "
                    "continuous latents",
    ("gmm", "sgld"): "the mixture has discrete assignments; gradient samplers need "
                     "continuous latents",
    ("beta-bernoulli", "klqp"): "Beta approximations are not reparameterizable; use "
                                "klqp-score",
}


@dataclass
class RunConfig:
    model: str
    inference: str
    n_iter: int = 1000
    seed: int = 0
    step_size: Optional[str] = None
    n_steps: Optional[int] = None
    n_samples: Optional[int] = None
    K: Optional[int] = None
    M: Optional[int] = None
    n: Optional[int] = None
    d: Optional[int] = None
    k: Optional[int] = None
    path: Optional[str] = None
    lr: Optional[float] = None
    inner: Optional[int] = None
    chains: int = 1
    burn_in: float = 0.1
    print_every: int = 0


def validate(cfg: RunConfig) -> None:
    if cfg.model == "dp-sim":
        raise ConfigError("dp-sim is a prior simulation, not a fit target; "
                          "use the `dp-sim` subcommand")
    if cfg.model not in COMPATIBILITY:
        raise ConfigError(f"unknown model {cfg.model!r}; choose from {sorted(COMPATIBILITY)}")
    if cfg.inference not in INFERENCES:
        raise ConfigError(f"unknown inference {cfg.inference!r}; choose from {INFERENCES}")
    if cfg.inference not in COMPATIBILITY[cfg.model]:
        reason = _REASONS.get((cfg.model, cfg.inference), "pair is not supported")
        raise ConfigError(f"inference {cfg.inference!r} is not available for model "
                          f"{cfg.model!r}: {reason}; valid: {COMPATIBILITY[cfg.model]}")
    if cfg.n_iter < 1:
        raise ConfigError("--n-iter must be at least 1")
    if cfg.chains < 1:
        raise ConfigError("--chains must be at least 1")
    if cfg.chains > 1 and cfg.inference not in SAMPLERS:
        raise ConfigError("--chains applies to samplers (hmc, sgld, mh) only")
    if not 0.0 <= cfg.burn_in < 1.0:
        raise ConfigError("--burn-in must lie in [0, 1)")
    if cfg.step_size not in (None, "auto"):
        try:
            value = float(cfg.step_size)
        except ValueError:
            raise ConfigError(f"--step-size must be a number or 'auto', "
                              f"got {cfg.step_size!r}") from None
        if not (value >= 0 and math.isfinite(value)):
            raise ConfigError("--step-size must be non-negative")
    for name in ("n_steps", "n_samples", "K", "M", "n", "d", "k", "inner"):
        v = getattr(cfg, name)
        if v is not None and v < (0 if name == "inner" else 1):
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")
    if cfg.lr is not None and not cfg.lr > 0:
        raise ConfigError("--lr must be positive")


def step_size(cfg: RunConfig, N: int, default: float) -> float:
    if cfg.step_size is None:
        return default
    if cfg.step_size == "auto":
        return 0.5 / N
    return float(cfg.step_size)


def _opt(cfg: RunConfig, default: float) -> Adam:
    return Adam(cfg.lr if cfg.lr is not None else default)


# --- summaries --------------------------------------------------------------

def _stats(samples: np.ndarray) -> dict:
    return {"mean": samples.mean(axis=0).tolist(), "sd": samples.std(axis=0).tolist(),
            "q05": np.quantile(samples, 0.05, axis=0).tolist(),
            "q50": np.quantile(samples, 0.5, axis=0).tolist(),
            "q95": np.quantile(samples, 0.95, axis=0).tolist()}


def _normal_summary(loc: Parameter, raw_scale: Parameter) -> dict:
    sd = np.logaddexp(0.0, raw_scale.value)
    return {"mean": loc.value.tolist(), "sd": sd.tolist()}


def permutation_error(est, truth) -> float:
    """Max-abs error between cluster means under the best row permutation."""
    est, truth = np.asarray(est), np.asarray(truth)
    return float(min(np.max(np.abs(est[list(p)] - truth))
                     for p in itertools.permutations(range(len(truth)))))


# --- shared run loop ----------------------------------------------------------

class Stream:
    """Collects step diagnostics into records at a fixed stride."""

    def __init__(self, emit: Callable[[dict], None], n_iter: int, print_every: int,
                 chain: Optional[int] = None):
        self.emit = emit
        self.n_iter = n_iter
        self.every = print_every or max(1, n_iter // 10)
        self.chain = chain
        self.diverged = 0
        self.consecutive = 0

    def __call__(self, diag: Diagnostics) -> None:
        self.diverged += int(diag.diverged)
        self.consecutive = self.consecutive + 1 if diag.diverged else 0
        if self.consecutive >= 100:
            raise DivergenceError(f"100 consecutive divergent steps (last step {diag.step})")
        if diag.step % self.every == 0 or diag.step == self.n_iter:
            rec = {"type": "step"}
            if self.chain is not None:
                rec["chain"] = self.chain
            rec.update(diag.record(timing=True))
            self.emit(rec)


def _loop(inference, n_iter: int, stream: Stream, feeds=None) -> None:
    if not inference.initialized:
        inference.initialize()
    for i in range(n_iter):
        f = feeds(i) if callable(feeds) else feeds
        stream(inference.update(f))


# --- beta-bernoulli -----------------------------------------------------------

def _bb_data(cfg: RunConfig) -> np.ndarray:
    if cfg.path:
        _, x = read_csv(cfg.path)
        return x
    n = cfg.n or 50
    s = int(round(0.6 * n))
    return np.array([1.0] * s + [0.0] * (n - s))


def run_beta_bernoulli(cfg: RunConfig, emit, seeds) -> dict:
    x = _bb_data(cfg)
    if not np.all((x == 0) | (x == 1)):
        raise ConfigError("beta-bernoulli data must be 0/1")
    n, s = x.size, float(x.sum())
    model = beta_bernoulli(n)
    exact = {"mean": (1 + s) / (2 + n),
             "sd": math.sqrt((1 + s) * (1 + n - s) / ((2 + n) ** 2 * (3 + n)))}
    summary = {"exact_posterior": exact}
    if cfg.inference in SAMPLERS:
        defaults = {"hmc": 0.2, "sgld": 0.01, "mh": 0.5}
        eps = step_size(cfg, n, defaults[cfg.inference])

        def one(chain, emit_chain, seed):
            store = Empirical(Parameter(f"theta/{chain}", np.full(cfg.n_iter, 0.5),
                                        trainable=False))
            problem = InferenceProblem(model, {"theta": store}, {"x": x})
            inf = _sampler(cfg, problem, eps, seed)
            stream = Stream(emit_chain, cfg.n_iter, cfg.print_every,
                            chain if cfg.chains > 1 else None)
            _loop(inf, cfg.n_iter, stream)
            return store, inf, stream

        stores, infs, streams = _chains(cfg, one, emit, seeds)
        samples = merge_chains(*stores, burn_in=cfg.burn_in)
        summary["posterior"] = {"theta": _stats(samples)}
        summary["acceptance_rate"] = float(np.mean([i.acceptance_rate for i in infs]))
        summary["diverged_steps"] = sum(s.diverged for s in streams)
        return summary
    stream = Stream(emit, cfg.n_iter, cfg.print_every)
    if cfg.inference == "map":
        u = Parameter("theta/logit", 0.0)
        problem = InferenceProblem(model, {"theta": lambda: PointMass(ops.sigmoid(u))},
                                   {"x": x})
        inf = MAP(problem, seed=seeds[0])
        inf.initialize(optimizer=_opt(cfg, 0.05))
        _loop(inf, cfg.n_iter, stream)
        summary["posterior"] = {"theta": {"point": float(1 / (1 + np.exp(-u.value)))}}
    else:
        a = Parameter("theta/a", 0.5413)
        b = Parameter("theta/b", 0.5413)
        problem = InferenceProblem(
            model, {"theta": lambda: Beta(ops.softplus(a), ops.softplus(b))}, {"x": x})
        inf = KLqp(problem, estimator="score", n_samples=cfg.n_samples or 10,
                   baseline="loo", seed=seeds[0])
        inf.initialize(optimizer=_opt(cfg, 0.05))
        _loop(inf, cfg.n_iter, stream)
        qa, qb = float(np.logaddexp(0, a.value)), float(np.logaddexp(0, b.value))
        summary["posterior"] = {"theta": {
            "mean": qa / (qa + qb),
            "sd": math.sqrt(qa * qb / ((qa + qb) ** 2 * (qa + qb + 1))),
            "a": qa, "b": qb}}
    summary["diverged_steps"] = stream.diverged
    return summary


def _sampler(cfg: RunConfig, problem, eps: float, seed):
    if cfg.inference == "hmc":
        return HMC(problem, step_size=eps, n_steps=cfg.n_steps or 10, seed=seed)
    if cfg.inference == "sgld":
        return SGLD(problem, step_size=eps, seed=seed)
    return MetropolisHastings(problem, proposal_sd=eps, seed=seed)


def _chains(cfg: RunConfig, one, emit, seeds) -> tuple:
    """Run ``cfg.chains`` independent chains; records are emitted in chain order."""
    if cfg.chains == 1:
        results = [one(0, emit, seeds[0])]
    else:
        buffers = [[] for _ in range(cfg.chains)]
        chain_seeds = np.random.SeedSequence(int(seeds[0].integers(2 ** 32))).spawn(cfg.chains)
        with ThreadPoolExecutor(max_workers=cfg.chains) as pool:
            futures = [pool.submit(one, c, buffers[c].append, np.random.default_rng(chain_seeds[c]))
                       for c in range(cfg.chains)]
            results = [f.result() for f in futures]
        for buf in buffers:
            for rec in buf:
                emit(rec)
    return tuple(list(col) for col in zip(*results))


# --- logistic regression --------------------------------------------------------

def _logreg_data(cfg: RunConfig) -> dict:
    if cfg.path:
        X, y = read_csv(cfg.path)
        if not np.all((y == 0) | (y == 1)):
            raise ConfigError("logreg labels (last column) must be 0/1")
        return {"X": X, "y": y, "truth": None}
    return make_logreg(cfg.n or 200, cfg.d or 5, cfg.seed)


def run_logreg(cfg: RunConfig, emit, seeds) -> dict:
    data = _logreg_data(cfg)
    X, y = data["X"], data["y"]
    N, D = X.shape
    model = logreg(X)
    summary = {"truth": data["truth"]} if data["truth"] else {}
    if cfg.inference in SAMPLERS:
        defaults = {"hmc": 0.5 / N, "sgld": 0.5 / N, "mh": 0.1}
        eps = step_size(cfg, N, defaults[cfg.inference])

        def one(chain, emit_chain, seed):
            store = Empirical(Parameter(f"beta/{chain}", np.zeros((cfg.n_iter, D)),
                                        trainable=False))
            inf = _sampler(cfg, InferenceProblem(model, {"beta": store}, {"y": y}), eps, seed)
            stream = Stream(emit_chain, cfg.n_iter, cfg.print_every,
                            chain if cfg.chains > 1 else None)
            _loop(inf, cfg.n_iter, stream)
            return store, inf, stream

        stores, infs, streams = _chains(cfg, one, emit, seeds)
        summary["posterior"] = {"beta": _stats(merge_chains(*stores, burn_in=cfg.burn_in))}
        summary["acceptance_rate"] = float(np.mean([i.acceptance_rate for i in infs]))
        summary["step_size"] = eps
        summary["diverged_steps"] = sum(s.diverged for s in streams)
        return summary
    stream = Stream(emit, cfg.n_iter, cfg.print_every)
    if cfg.inference == "map":
        q, point = point_approx("beta", np.zeros(D))
        inf = MAP(InferenceProblem(model, {"beta": q}, {"y": y}), seed=seeds[0])
        inf.initialize(optimizer=_opt(cfg, 0.05))
        _loop(inf, cfg.n_iter, stream)
        summary["posterior"] = {"beta": {"point": point.value.tolist()}}
    else:
        q, loc, raw = normal_approx("beta", D, scale=0.5)
        problem = InferenceProblem(model, {"beta": q}, {"y": y})
        if cfg.inference == "iwae":
            inf = IWAE(problem, K=cfg.K or 5, seed=seeds[0])
        else:
            est = KLQP_VARIANTS[cfg.inference]
            S = cfg.n_samples or (4 if est == "score" else 1)
            inf = KLqp(problem, estimator=est, n_samples=S,
                       baseline="loo" if est == "score" and S > 1 else False, seed=seeds[0])
        inf.initialize(optimizer=_opt(cfg, 0.05))
        _loop(inf, cfg.n_iter, stream)
        summary["posterior"] = {"beta": _normal_summary(loc, raw)}
    summary["diverged_steps"] = stream.diverged
    return summary


# --- mixture model ----------------------------------------------------------------

def _gmm_data(cfg: RunConfig) -> dict:
    if cfg.path:
        X, _ = read_csv(cfg.path)
        return {"X": X, "truth": None}
    return make_gmm(cfg.n or 600, cfg.k or 3, cfg.d or 2, cfg.seed)


def run_gmm(cfg: RunConfig, emit, seeds) -> dict:
    data = _gmm_data(cfg)
    X = data["X"]
    N, D = X.shape
    K = cfg.k or (len(data["truth"]["means"]) if data["truth"] else 3)
    if K > N:
        raise ConfigError(f"k={K} exceeds the number of data points {N}")
    stream = Stream(emit, cfg.n_iter, cfg.print_every)
    if cfg.inference == "vem":
        beta = fit_gmm_vem(X, K, cfg.n_iter, seeds, lr=cfg.lr or 0.05, stream=stream)
        posterior = {"beta": {"point": beta.tolist()}}
    elif cfg.inference == "svi":
        M = min(cfg.M or 128, N)
        beta, sd, recipe = fit_gmm_svi(X, K, M, cfg.n_iter, seeds, inner=cfg.inner
                                       if cfg.inner is not None else 10,
                                       lr=cfg.lr or 0.05, stream=stream)
        posterior = {"beta": {"mean": beta.tolist(), "sd": sd.tolist()}}
    else:
        beta, sd = fit_gmm_klqp(X, K, cfg.n_iter, seeds, lr=cfg.lr or 0.05,
                                n_samples=cfg.n_samples or 4, stream=stream)
        posterior = {"beta": {"mean": beta.tolist(), "sd": sd.tolist()}}
    summary = {"posterior": posterior, "diverged_steps": stream.diverged}
    if data["truth"]:
        truth = np.array(data["truth"]["means"])
        summary["truth"] = {"means": truth.tolist()}
        est = np.array(posterior["beta"].get("point", posterior["beta"].get("mean")))
        summary["max_abs_error"] = permutation_error(est, truth)
    return summary


def fit_gmm_vem(X, K: int, n_outer: int, seeds, lr: float = 0.05,
                stream: Optional[Callable] = None) -> np.ndarray:
    """Variational EM: score-function E-step over assignments, MAP M-step over means."""
    N, D = X.shape
    model = gmm(N, K, D)
    qz, _ = categorical_approx("qz", (N, K))
    qbeta, point = point_approx("qbeta", farthest_point_init(X, K))
    e_step = KLqp(InferenceProblem(model, {"z": qz}, {"x": X, "beta": qbeta}),
                  estimator="score", n_samples=4, baseline="loo", local_signals=True,
                  seed=seeds[0])
    m_step = MAP(InferenceProblem(model, {"beta": qbeta}, {"x": X, "z": qz}), seed=seeds[1])
    e_step.initialize(optimizer=Adam(lr))
    m_step.initialize(optimizer=Adam(lr))
    report = _round_reporter(stream)
    variational_em(e_step, m_step, n_outer, print_every=1 if report else 0, reporter=report)
    return point.value.copy()


def _round_reporter(stream):
    if stream is None:
        return None

    def report(diag: Diagnostics) -> None:
        stream(Diagnostics(diag.step, {"e_loss": diag.metrics.get("0.loss"),
                                       "m_loss": diag.metrics.get("1.loss")}))

    return report


def _gmm_problems(M: int, K: int, D: int, scale: float, init, seeds):
    slot = FeedSlot("x", (M, D))
    model = gmm(M, K, D)
    qz, logits = categorical_approx("qz", (M, K))
    qbeta, loc, raw = normal_approx("qbeta", (K, D), loc=init, scale=0.1)
    scales = {"x": scale, "z": scale}
    local = KLqp(InferenceProblem(model, {"z": qz}, {"x": slot, "beta": qbeta}, scales),
                 estimator="score", n_samples=4, baseline="loo", local_signals=True,
                 seed=seeds[0])
    glob = KLqp(InferenceProblem(model, {"beta": qbeta}, {"x": slot, "z": qz}, scales),
                seed=seeds[1])
    return slot, local, glob, logits, loc, raw


def fit_gmm_svi(X, K: int, M: int, n_iter: int, seeds, inner: int = 10, lr: float = 0.05,
                local_lr: float = 1.0, stream: Optional[Callable] = None) -> tuple:
    """Minibatch SVI: local assignment factors for ``M`` rows at a time, reset per batch."""
    N, D = X.shape
    rng_batch = seeds[2]
    first = rng_batch.choice(N, M, replace=False)
    slot, local, glob, logits, loc, raw = _gmm_problems(
        M, K, D, N / M, farthest_point_init(X[first], K), seeds)
    recipe = SVIRecipe(glob, local, [logits], slot, M, inner=inner)
    recipe.initialize({"optimizer": Adam(lr)}, {"optimizer": Adam(local_lr)})

    def batch(i):
        return X[first] if i == 0 else X[rng_batch.choice(N, M, replace=False)]

    for i in range(n_iter):
        diag = recipe.svi_step(batch(i))
        if stream is not None:
            stream(diag)
    return loc.value.copy(), np.logaddexp(0.0, raw.value), recipe


def fit_gmm_full_klqp(X, K: int, n_iter: int, seeds, lr: float = 0.05,
                      local_lr: float = 1.0) -> tuple:
    """Full-batch alternating KLqp (local then global step each round): the SVI oracle."""
    N, D = X.shape
    slot, local, glob, logits, loc, raw = _gmm_problems(
        N, K, D, 1.0, farthest_point_init(X, K), seeds)
    local.initialize(optimizer=Adam(local_lr))
    glob.initialize(optimizer=Adam(lr))
    alternate([(local, 1), (glob, 1)], n_iter, feeds={slot: X})
    return loc.value.copy(), np.logaddexp(0.0, raw.value)


def fit_gmm_klqp(X, K: int, n_iter: int, seeds, lr: float = 0.05, n_samples: int = 4,
                 stream: Optional[Callable] = None) -> tuple:
    """Joint score-function KLqp over means and assignments."""
    N, D = X.shape
    model = gmm(N, K, D)
    qz, _ = categorical_approx("qz", (N, K))
    qbeta, loc, raw = normal_approx("qbeta", (K, D), loc=farthest_point_init(X, K), scale=0.1)
    inf = KLqp(InferenceProblem(model, {"beta": qbeta, "z": qz}, {"x": X}),
               estimator="score", n_samples=n_samples, baseline="loo", local_signals=True,
               seed=seeds[0])
    inf.initialize(optimizer=Adam(lr))
    for _ in range(n_iter):
        diag = inf.update()
        if stream is not None:
            stream(diag)
    return loc.value.copy(), np.logaddexp(0.0, raw.value)


# --- vae and gan ------------------------------------------------------------------

def run_vae(cfg: RunConfig, emit, seeds, out_dir=None) -> dict:
    from ppltape.data import write_csv
    from ppltape.vae import ToyVAE, VAEToySpec, default_optimizer, make_images, vae_fit

    spec = VAEToySpec(d=cfg.d if cfg.d is not None else 2, M=cfg.M or 100)
    if cfg.path:
        train, _ = read_csv(cfg.path, has_label=False)
        if train.shape[1] != spec.pixels:
            raise ConfigError(f"vae-toy expects {spec.pixels} pixel columns")
        split = max(spec.M, int(0.8 * len(train)))
        train, held_out = train[:split], train[split:]
        if len(held_out) == 0:
            raise ConfigError("need more rows than M for a held-out split")
    else:
        n = cfg.n or 1000
        train, _ = make_images(n, spec.side, seed=int(seeds[0].integers(2 ** 31)))
        held_out, _ = make_images(max(n // 5, 1), spec.side,
                                  seed=int(seeds[0].integers(2 ** 31)))
    vae = ToyVAE(spec, seed=int(seeds[1].integers(2 ** 31)))
    problem = vae.problem()
    if cfg.inference == "iwae":
        inf = IWAE(problem, K=cfg.K or 5, seed=seeds[2])
    else:
        est = KLQP_VARIANTS[cfg.inference]
        S = cfg.n_samples or (4 if est == "score" else 1)
        inf = KLqp(problem, estimator=est, n_samples=S,
                   baseline="loo" if est == "score" and S > 1 else False, seed=seeds[2])
    inf.initialize(optimizer=default_optimizer() if cfg.lr is None
                   else default_optimizer().__class__(cfg.lr, epsilon=1.0))
    n_epochs = cfg.n_iter
    per_epoch = train.shape[0] // spec.M
    stream = Stream(emit, n_epochs * per_epoch, cfg.print_every)
    result = vae_fit(vae, train, held_out, n_epochs, seed=int(seeds[3].integers(2 ** 31)),
                     inference=inf, reporter=stream)
    summary = {"held_out_elbo_init": result["held_out_elbo_init"],
               "held_out_elbo": result["held_out_elbo"],
               "improvement": result["improvement"], "epochs": n_epochs,
               "diverged_steps": stream.diverged}
    if out_dir is not None:
        grid = vae.sample(16, seeds[4])
        path = out_dir / "vae_samples.csv"
        write_csv(path, grid)
        summary["samples_csv"] = str(path)
    return summary


def build_gan(seed_rng: np.random.Generator, batch: int, hidden: int = 16):
    """Location-scale generator and a one-hidden-layer tanh discriminator."""
    mu = Parameter("gen/mu", 0.0)
    s = Parameter("gen/scale", 0.5413)

    def generator(t):
        eps = t.rv("eps", Normal(np.zeros(batch), 1.0))
        return mu + ops.softplus(s) * eps

    w1 = Parameter("disc/w1", seed_rng.normal(0.0, 1.0, (1, hidden)))
    b1 = Parameter("disc/b1", np.zeros(hidden))
    w2 = Parameter("disc/w2", seed_rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, 1)))
    b2 = Parameter("disc/b2", np.zeros(1))

    def discriminator(x):
        h = ops.tanh(ops.matmul(ops.reshape(x, (-1, 1)), w1) + b1)
        return ops.matmul(h, w2) + b2

    return generator, discriminator, mu, s


def fit_gan_1d(data_sampler: Callable[[int], np.ndarray], n_iter: int, seeds,
               batch: int = 64, lr: float = 0.01, stream: Optional[Callable] = None) -> dict:
    generator, discriminator, mu, s = build_gan(seeds[0], batch)
    slot = FeedSlot("x", (batch,))
    inf = GANInference(InferenceProblem(generator, data={"x": slot}), discriminator,
                       seed=seeds[1])
    inf.initialize(d_optimizer=Adam(lr), g_optimizer=Adam(lr))
    for i in range(n_iter):
        diag = inf.update({slot: data_sampler(batch)})
        if stream is not None:
            stream(diag)
    return {"mu": float(mu.value), "sigma": float(np.logaddexp(0.0, s.value))}


def run_gan(cfg: RunConfig, emit, seeds) -> dict:
    batch = cfg.M or 64
    rng_data = seeds[2]
    if cfg.path:
        X, _ = read_csv(cfg.path, has_label=False)
        pool = X[:, 0]

        def sampler(m):
            return rng_data.choice(pool, m)
        truth = None
    else:
        def sampler(m):
            return rng_data.normal(3.0, 1.0, m)
        truth = {"mean": 3.0, "sd": 1.0}
    stream = Stream(emit, cfg.n_iter, cfg.print_every)
    gen = fit_gan_1d(sampler, cfg.n_iter, seeds, batch, cfg.lr or 0.01, stream)
    summary = {"generator": gen, "diverged_steps": stream.diverged}
    if truth:
        summary["truth"] = truth
    return summary


def run(cfg: RunConfig, emit: Callable[[dict], None], timing: bool = True,
        out_dir=None) -> dict:
    """Validate, run and return the summary record (also emitted last)."""
    validate(cfg)
    seeds = spawn_rngs(cfg.seed, 6)
    start = time.perf_counter()

    def emit_step(rec):
        if not timing:
            rec.pop("wall_clock", None)
        emit(rec)

    if cfg.model == "beta-bernoulli":
        body = run_beta_bernoulli(cfg, emit_step, seeds)
    elif cfg.model == "logreg":
        body = run_logreg(cfg, emit_step, seeds)
    elif cfg.model == "gmm":
        body = run_gmm(cfg, emit_step, seeds)
    elif cfg.model == "vae-toy":
        body = run_vae(cfg, emit_step, seeds, out_dir)
    else:
        body = run_gan(cfg, emit_step, seeds)
    summary = {"type": "summary", "model": cfg.model, "inference": cfg.inference,
               "seed": cfg.seed, "n_iter": cfg.n_iter}
    if cfg.chains > 1:
        summary["chains"] = cfg.chains
    summary.update(body)
    if timing:
        summary["wall_clock"] = time.perf_counter() - start
    emit(summary)
    return summary
