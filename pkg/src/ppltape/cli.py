"""Command-line front end: ``ppltape {fit,gen,bench-overhead,dp-sim,list}``.

Records go to stdout as one JSON object per line; the last line of every
command has ``"type": "summary"``. Human-readable progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ppltape.data import (OUTPUT_DIR_ENV, make_gmm, make_logreg, output_dir, spawn_rngs,
                          write_csv, write_truth)
from ppltape.errors import ConfigError, DivergenceError, PPLError
from ppltape.presets import COMPATIBILITY, INFERENCES, RunConfig, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_RUNTIME = 4


def _writer(stream) -> Callable[[dict], None]:
    def emit(record: dict) -> None:
        stream.write(json.dumps(record, sort_keys=False) + "\n")
        stream.flush()

    return emit


def _progress(quiet: bool, emit: Callable[[dict], None]) -> Callable[[dict], None]:
    def both(record: dict) -> None:
        emit(record)
        if not quiet and record.get("type") == "step":
            shown = {k: v for k, v in record.items()
                     if k not in ("type", "wall_clock") and not isinstance(v, list)}
            print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in shown.items()), file=sys.stderr)

    return both


def cmd_fit(args, emit) -> int:
    cfg = RunConfig(model=args.model, inference=args.inference, n_iter=args.n_iter,
                    seed=args.seed, step_size=args.step_size, n_steps=args.n_steps,
                    n_samples=args.n_samples, K=args.K, M=args.M, n=args.n, d=args.d,
                    k=args.k, path=args.path, lr=args.lr, inner=args.inner,
                    chains=args.chains, burn_in=args.burn_in, print_every=args.print_every)
    out = Path(args.out_dir) if args.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    run(cfg, _progress(args.quiet, emit), timing=not args.no_timing, out_dir=out)
    return EXIT_OK


def cmd_gen(args, emit) -> int:
    if args.d is None:
        args.d = 5 if args.model == "logreg" else 2
    if args.model == "logreg":
        data = make_logreg(args.n, args.d, args.seed)
        truth = {"model": "logreg", "seed": args.seed, "beta": data["truth"]["beta"]}
    elif args.model == "gmm":
        data = make_gmm(args.n, args.k, args.d, args.seed)
        truth = {"model": "gmm", "seed": args.seed, "means": data["truth"]["means"],
                 "sd": data["truth"]["sd"]}
    else:
        raise ConfigError(f"gen supports logreg and gmm, not {args.model!r}")
    path = Path(args.out) if args.out else output_dir() / f"{args.model}_n{args.n}_s{args.seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(path, data["X"], data["y"], label="z" if args.model == "gmm" else "y")
    tpath = write_truth(path, truth)
    emit({"type": "summary", "command": "gen", "model": args.model, "path": str(path),
          "truth_path": str(tpath), "rows": int(data["X"].shape[0]),
          "columns": int(data["X"].shape[1]) + 1})
    return EXIT_OK


def cmd_bench(args, emit) -> int:
    from ppltape.bench import bench_overhead

    report = bench_overhead(n=args.n, d=args.d, n_iter=args.n_iter, n_steps=args.n_steps,
                            seed=args.seed, repeats=args.repeats)
    if args.no_timing:
        for key in ("library_seconds", "handwritten_seconds", "ratio"):
            report.pop(key)
    emit({"type": "summary", "command": "bench-overhead", **report})
    if not report["identical"]:
        print("chains differ between library and handwritten HMC", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def dp_sim(alpha: float, n: int, seed: int) -> dict:
    """Simulate ``n`` stick-breaking draws; report distinct sticks and the stop histogram."""
    from ppltape.model import stick_count

    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if n < 1:
        raise ConfigError("n must be at least 1")
    (rng,) = spawn_rngs(seed, 1)
    counts = [stick_count(alpha, rng) for _ in range(n)]
    hist = Counter(counts)
    return {"alpha": alpha, "n": n, "seed": seed, "distinct_sticks": len(hist),
            "histogram": {str(k): hist[k] for k in sorted(hist)},
            "mean_stop": float(np.mean(counts)), "max_stop": int(max(counts))}


def cmd_dp_sim(args, emit) -> int:
    emit({"type": "summary", "command": "dp-sim", **dp_sim(args.alpha, args.n, args.seed)})
    return EXIT_OK


def cmd_list(args, emit) -> int:
    for model, infs in COMPATIBILITY.items():
        emit({"type": "model", "model": model, "inferences": list(infs)})
    emit({"type": "summary", "command": "list", "models": list(COMPATIBILITY),
          "inferences": list(INFERENCES)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppltape", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="run one inference on a bundled model")
    fit.add_argument("--model", required=True)
    fit.add_argument("--inference", required=True)
    fit.add_argument("--n-iter", type=int, default=1000)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--step-size", default=None, help="number or 'auto' (0.5/N)")
    fit.add_argument("--n-steps", type=int, default=None, help="leapfrog steps (hmc)")
    fit.add_argument("--n-samples", type=int, default=None, help="Monte Carlo samples (klqp)")
    fit.add_argument("-K", "--K", dest="K", type=int, default=None, help="importance samples")
    fit.add_argument("-M", "--M", dest="M", type=int, default=None, help="minibatch size")
    fit.add_argument("--n", type=int, default=None, help="synthetic dataset size")
    fit.add_argument("--d", type=int, default=None, help="feature or latent dimension")
    fit.add_argument("--k", type=int, default=None, help="mixture components")
    fit.add_argument("--path", default=None, help="CSV input (header, label last)")
    fit.add_argument("--lr", type=float, default=None, help="optimizer learning rate")
    fit.add_argument("--inner", type=int, default=None, help="local updates per batch (svi)")
    fit.add_argument("--chains", type=int, default=1, help="independent sampler chains")
    fit.add_argument("--burn-in", type=float, default=0.1, help="fraction of samples dropped")
    fit.add_argument("--print-every", type=int, default=0, help="record stride (default n/10)")
    fit.add_argument("--out-dir", default=None,
                     help=f"artifact directory (default ${OUTPUT_DIR_ENV} when set)")
    fit.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")
    fit.add_argument("--quiet", action="store_true", help="no progress on stderr")
    fit.set_defaults(func=cmd_fit)

    gen = sub.add_parser("gen", help="write a synthetic CSV and its truth file")
    gen.add_argument("model", choices=("logreg", "gmm"))
    gen.add_argument("--n", type=int, default=200)
    gen.add_argument("--d", type=int, default=None, help="default 5 (logreg) or 2 (gmm)")
    gen.add_argument("--k", type=int, default=3)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=None, help=f"CSV path (default under ${OUTPUT_DIR_ENV})")
    gen.set_defaults(func=cmd_gen)

    bench = sub.add_parser("bench-overhead", help="library HMC vs a handwritten loop")
    bench.add_argument("--n", type=int, default=5000)
    bench.add_argument("--d", type=int, default=20)
    bench.add_argument("--n-iter", type=int, default=100)
    bench.add_argument("--n-steps", type=int, default=10)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--no-timing", action="store_true")
    bench.set_defaults(func=cmd_bench)

    dp = sub.add_parser("dp-sim", help="simulate Dirichlet-process stick draws")
    dp.add_argument("--alpha", type=float, default=1.0)
    dp.add_argument("--n", type=int, default=500)
    dp.add_argument("--seed", type=int, default=0)
    dp.set_defaults(func=cmd_dp_sim)

    lst = sub.add_parser("list", help="models and their valid inferences")
    lst.set_defaults(func=cmd_list)
    return parser


def main(argv: Optional[Sequence[str]] = None, stdout=None) -> int:
    args = build_parser().parse_args(argv)
    emit = _writer(stdout or sys.stdout)
    if getattr(args, "out_dir", None) is None and hasattr(args, "out_dir"):
        import os
        args.out_dir = os.environ.get(OUTPUT_DIR_ENV)
    try:
        return args.func(args, emit)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PPLError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
