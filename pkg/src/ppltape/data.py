"""Synthetic datasets with recorded ground truth, CSV input/output and seed splitting."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from ppltape.errors import ConfigError

OUTPUT_DIR_ENV = "PPLTAPE_OUTPUT_DIR"


def spawn_rngs(seed: int, n: int) -> list:
    """``n`` independent generators derived from one root seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


def make_logreg(n: int, d: int, seed: int = 0, beta_scale: float = 1.0) -> dict:
    """Features ~ N(0, 1), labels ~ Bernoulli(sigmoid(x . beta*)), beta* ~ N(0, beta_scale^2)."""
    if n < 1 or d < 1:
        raise ConfigError("logreg data needs n >= 1 and d >= 1")
    rng_beta, rng_x, rng_y = spawn_rngs(seed, 3)
    beta = beta_scale * rng_beta.standard_normal(d)
    X = rng_x.standard_normal((n, d))
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    y = (rng_y.uniform(size=n) < p).astype(np.float64)
    return {"X": X, "y": y, "truth": {"beta": beta.tolist()}}


def separated_means(k: int, d: int, rng: np.random.Generator, min_dist: float = 6.0,
                    box: float = 5.0, max_tries: int = 1000) -> np.ndarray:
    """``k`` points uniform in ``[-box, box]^d`` with pairwise distance >= ``min_dist``.

    Points are placed one at a time by rejection; the box grows by half when
    ``max_tries`` consecutive candidates are rejected.
    """
    means: list = []
    tries = 0
    while len(means) < k:
        c = rng.uniform(-box, box, size=d)
        if all(np.linalg.norm(c - m) >= min_dist for m in means):
            means.append(c)
            tries = 0
        else:
            tries += 1
            if tries >= max_tries:
                box *= 1.5
                tries = 0
    return np.array(means)


def make_gmm(n: int, k: int, d: int, seed: int = 0, sd: float = 1.0,
             min_dist: float = 6.0) -> dict:
    """Labelled mixture draws: uniform cluster labels, ``x ~ N(mean[z], sd^2 I)``."""
    if n < 1 or k < 1 or d < 1:
        raise ConfigError("gmm data needs n, k, d >= 1")
    rng_mu, rng_z, rng_x = spawn_rngs(seed, 3)
    means = separated_means(k, d, rng_mu, min_dist)
    z = rng_z.integers(0, k, size=n)
    X = means[z] + sd * rng_x.standard_normal((n, d))
    return {"X": X, "y": z.astype(np.float64),
            "truth": {"means": means.tolist(), "sd": sd}}


def write_csv(path, X: np.ndarray, y: Optional[np.ndarray] = None, label: str = "y") -> None:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    header = [f"x{i}" for i in range(X.shape[1])]
    if y is not None:
        header.append(label)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(X):
            vals = [repr(float(v)) for v in row]
            if y is not None:
                vals.append(repr(float(y[i])))
            w.writerow(vals)


def read_csv(path, has_label: bool = True) -> tuple:
    """Read a header-first numeric CSV; the last column is the label when ``has_label``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise ConfigError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} columns, "
                                  f"got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    data = np.array(rows)
    if has_label:
        return data[:, :-1], data[:, -1]
    return data, None


def truth_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".truth.json")


def write_truth(path, truth: dict) -> Path:
    out = truth_path(path)
    out.write_text(json.dumps(truth, sort_keys=True) + "\n")
    return out
