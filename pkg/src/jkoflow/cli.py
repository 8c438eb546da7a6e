"""Command-line entry point: ``jkoflow <subcommand>``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
1 anything else. Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import chain_io, datasets, experiments, jko, numcore
from .config import load_config
from .errors import ConfigError, CorruptManifest, JkoError, NumericalError, VersionMismatch

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _parse_point(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(" ", "").split(",") if v], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"cannot parse point {text!r}; expected comma-separated numbers") from None


def _load_chain(path, stage):
    chain = chain_io.load_chain(path)
    stage = chain.n_steps if stage is None else stage
    if not 0 <= stage <= chain.n_steps:
        raise ConfigError(f"stage {stage} outside 0..{chain.n_steps}")
    return chain, stage


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    manifest = experiments.run_experiment(cfg, args.output_root)
    print(json.dumps({"output_dir": manifest["output_dir"], "wall_time_s": manifest["wall_time_s"]}))
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = load_config(args.config)
    if cfg.experiment != "filter":
        raise ConfigError(f"{args.config}: 'filter' needs experiment: filter, got {cfg.experiment!r}")
    return cmd_run(args)


def cmd_sample(args) -> int:
    chain, stage = _load_chain(args.chain, args.stage)
    rng = numcore.make_rng(args.seed, 0)
    fs = jko.sample_with_density(chain, rng, upto=stage, n=args.n)
    if args.out:
        experiments.write_samples_csv(args.out, fs.terminal, fs.logdens[-1])
    else:
        _samples_to_stdout(fs.terminal, fs.logdens[-1])
    return EXIT_OK


def _samples_to_stdout(X, logdens):
    import csv
    w = csv.writer(sys.stdout)
    w.writerow([f"x{i}" for i in range(X.shape[1])] + ["logdensity"])
    for row, lp in zip(X.tolist(), logdens.tolist()):
        w.writerow([repr(v) for v in row] + [repr(lp)])


def cmd_density(args) -> int:
    chain, stage = _load_chain(args.chain, args.stage)
    X = experiments.read_points_csv(args.points)
    if X.shape[1] != chain.dim:
        raise ConfigError(f"points have {X.shape[1]} columns, chain dimension is {chain.dim}")
    lp = jko.density_at(chain, X, stage)
    if args.out:
        experiments.write_samples_csv(args.out, X, lp)
    else:
        _samples_to_stdout(X, lp)
    return EXIT_OK


def cmd_invert(args) -> int:
    chain, stage = _load_chain(args.chain, args.stage)
    y = _parse_point(args.point)
    if y.shape[0] != chain.dim:
        raise ConfigError(f"point has {y.shape[0]} coordinates, chain dimension is {chain.dim}")
    traj, logdet = jko.trace_back(chain, y[None], stage)
    out = {"point": y.tolist(), "stage": stage,
           "trajectory": [p[0].tolist() for p in traj], "logdet_sum": float(logdet[0])}
    try:
        out["logdensity"] = float(chain.initial.logpdf(traj[0])[0] - logdet[0])
    except NotImplementedError:
        pass
    print(json.dumps(out))
    return EXIT_OK


def cmd_fetch(args) -> int:
    path = datasets.fetch(args.name, args.dest)
    print(json.dumps({"dataset": args.name, "path": str(path)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jkoflow", description="JKO gradient flows with input-convex maps")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--output-root", default=None,
                   help=f"root for output_dir (default ${experiments.OUTPUT_ROOT_ENV} or .)")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("filter", help="run a filtering experiment from a YAML config")
    f.add_argument("--config", required=True)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--output-root", default=None)
    f.set_defaults(func=cmd_filter)

    s = sub.add_parser("sample", help="sample a saved chain with log densities (CSV)")
    s.add_argument("chain", help="chain directory")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--stage", type=int, default=None, help="JKO stage k (default: last)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="CSV path (default stdout)")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("density", help="log density of a saved chain at points from a CSV")
    d.add_argument("chain")
    d.add_argument("--points", required=True, help="CSV with x0..x{D-1} columns")
    d.add_argument("--stage", type=int, default=None)
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_density)

    i = sub.add_parser("invert", help="trace a point back to stage 0")
    i.add_argument("chain")
    i.add_argument("--point", required=True, help="comma-separated coordinates; write --point=-1,2 when the first is negative")
    i.add_argument("--stage", type=int, default=None)
    i.set_defaults(func=cmd_invert)

    g = sub.add_parser("fetch-data", help="download a benchmark dataset in LIBSVM format")
    g.add_argument("name", choices=sorted(datasets.SOURCES))
    g.add_argument("--dest", default="data")
    g.set_defaults(func=cmd_fetch)
    return p


def _report(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "kind": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        return _report("numerical", exc, EXIT_NUMERICAL)
    except (ConfigError, CorruptManifest, VersionMismatch, FileNotFoundError, ValueError, KeyError) as exc:
        return _report("config", exc, EXIT_CONFIG)
    except (JkoError, OSError) as exc:
        return _report("other", exc, EXIT_OTHER)


if __name__ == "__main__":
    sys.exit(main())
