"""End-to-end experiment drivers behind ``jkoflow run``.

Each driver trains (or loads) what it needs, evaluates, and writes into the
run directory:

- ``chain/`` (or ``interval_XX/`` for filtering): serialized JKO chains
- ``metrics.json``: list of metric records
- ``samples_*.csv``: samples with their model log densities
- ``manifest.json``: config echo, seed, content hash, wall time, versions

Everything in ``metrics.json`` is a deterministic function of the config.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__, baselines, chain_io, datasets, energy, jko, mcmc, metrics, numcore
from .config import FlowConfig
from .jko import GaussianMeasure, JkoChain

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "JKOFLOW_OUTPUT_ROOT"

# rng stream ids, so that adding draws in one phase never shifts another
STREAM_SETUP, STREAM_TRAIN, STREAM_EVAL, STREAM_BASELINE, STREAM_OBS = range(5)


def output_dir(cfg: FlowConfig, root=None) -> Path:
    root = root if root is not None else os.environ.get(OUTPUT_ROOT_ENV, ".")
    return Path(root) / cfg.output_dir


def write_samples_csv(path, X, logdens=None):
    X = np.atleast_2d(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + (["logdensity"] if logdens is not None else []))
        for i, row in enumerate(X.tolist()):
            w.writerow([repr(v) for v in row] + ([repr(float(logdens[i]))] if logdens is not None else []))


def read_points_csv(path) -> np.ndarray:
    """Points CSV: a header row of column names, then one point per row (``x*`` columns used)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty points file")
    header = rows[0]
    cols = [i for i, name in enumerate(header) if name.strip().startswith("x")]
    if not cols:
        raise ValueError(f"{path}: no x* columns in header {header}")
    return np.array([[float(r[i]) for i in cols] for r in rows[1:] if r], dtype=np.float64)


def _versions() -> dict:
    import scipy
    return {"jkoflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def train_chain(chain: JkoChain, potential, cfg: FlowConfig, rng, n_steps: int, callback=None):
    """Run ``n_steps`` JKO steps with the configured learning-rate schedule."""
    tc = cfg.train.to_train_config()
    for _ in range(n_steps):
        step = chain.n_steps + 1
        chain, diag = jko.jko_train_step(chain, potential, tc, rng, lr=cfg.train.lr_for(step))
        log.info("step %d: loss %.5g (%s init)", step, diag["final_loss"], diag["init"])
        if callback is not None:
            callback(chain, diag)
    return chain


def _stage_for(t: float, h: float, K: int) -> int:
    k = int(round(t / h))
    if not np.isclose(k * h, t) or k > K:
        raise ValueError(f"evaluation time {t} is not a step multiple of h={h} within {K} steps")
    return k


def _initial_from_cfg(cfg: FlowConfig, default):
    return jko.measure_from_spec(cfg.initial) if cfg.initial else default


def run_stationary(cfg: FlowConfig, out: Path, records: list) -> JkoChain:
    D = cfg.dim
    setup = numcore.make_rng(cfg.seed, STREAM_SETUP)
    mix = energy.GaussianMixture.random(D, cfg.stationary.components, cfg.stationary.spread, setup,
                                        inv_beta=cfg.inv_beta)
    initial = _initial_from_cfg(cfg, GaussianMeasure(np.zeros(D), cfg.stationary.initial_var * np.eye(D)))
    chain = JkoChain(initial, h=cfg.h, inv_beta=cfg.inv_beta, config_hash=cfg.digest())
    chain = train_chain(chain, mix, cfg, numcore.make_rng(cfg.seed, STREAM_TRAIN), cfg.steps)
    ev = numcore.make_rng(cfg.seed, STREAM_EVAL)
    target = metrics.MeasureView(mix.sample, mix.logpdf, "mixture")
    stages = sorted({_stage_for(t, cfg.h, cfg.steps) for t in cfg.eval.times} | {cfg.steps})
    for k in stages:
        v, se = metrics.symkl_mc(metrics.chain_view(chain, k), target, cfg.eval.n_samples, ev)
        records.append(metrics.metric_report("symkl", v, se, cfg.eval.n_samples, cfg.seed,
                                             experiment="stationary", stage=k, t=k * cfg.h,
                                             reference="exact mixture"))
    (out / "target.json").write_text(json.dumps(mix.to_spec(), indent=1))
    return chain


def ou_problem(cfg: FlowConfig):
    """OU potential and initial Gaussian; random SPD ``A`` and ``b ~ N(0, I)`` unless configured."""
    D = cfg.dim
    setup = numcore.make_rng(cfg.seed, STREAM_SETUP)
    if cfg.potential:
        pot = energy.potential_from_spec(cfg.potential)
        if not isinstance(pot, energy.Quadratic):
            raise ValueError("the ou experiment needs a quadratic potential")
    else:
        A = numcore.random_spd(D, setup)
        pot = energy.Quadratic(A, setup.standard_normal(D))
    initial = _initial_from_cfg(cfg, GaussianMeasure(np.zeros(D), np.eye(D)))
    if not isinstance(initial, GaussianMeasure):
        raise ValueError("the ou experiment needs a Gaussian initial measure")
    return pot, initial


def run_ou(cfg: FlowConfig, out: Path, records: list) -> JkoChain:
    pot, initial = ou_problem(cfg)
    spec = baselines.OUSpec(pot.A, pot.b, cfg.inv_beta, initial.mean, initial.cov)
    chain = JkoChain(initial, h=cfg.h, inv_beta=cfg.inv_beta, config_hash=cfg.digest())
    chain = train_chain(chain, pot, cfg, numcore.make_rng(cfg.seed, STREAM_TRAIN), cfg.steps)
    times = cfg.eval.times or [cfg.steps * cfg.h]
    ev = numcore.make_rng(cfg.seed, STREAM_EVAL)
    for t in times:
        k = _stage_for(t, cfg.h, cfg.steps)
        m, C = baselines.ou_closed_form(spec, t)
        truth = metrics.gaussian_view(m, C, "closed form")
        v, se = metrics.symkl_mc(metrics.chain_view(chain, k), truth, cfg.eval.n_samples, ev)
        records.append(metrics.metric_report("symkl", v, se, cfg.eval.n_samples, cfg.seed,
                                             experiment="ou", method="jko", t=t, stage=k, dim=cfg.dim))
        for n in cfg.eval.em_particles:
            brng = numcore.make_rng(cfg.seed, STREAM_BASELINE + 10 * n)
            ens = baselines.ParticleEnsemble(initial.sample(n, brng))
            ens = baselines.em_simulate(pot, ens, cfg.eval.em_dt, t, brng, cfg.inv_beta)
            v, se = metrics.symkl_mc(metrics.kde_view(ens.positions), truth, cfg.eval.n_samples, ev)
            records.append(metrics.metric_report("symkl", v, se, cfg.eval.n_samples, cfg.seed,
                                                 experiment="ou", method="em+kde", particles=n,
                                                 t=t, dim=cfg.dim))
    return chain


def blr_problem(cfg: FlowConfig):
    ds = datasets.load_dataset(cfg.blr.dataset)
    train, test = datasets.train_test_split(ds, numcore.make_rng(cfg.seed, STREAM_SETUP),
                                            cfg.blr.test_fraction)
    pot = energy.LogisticPosterior(train.features, train.labels, cfg.blr.minibatch, cfg.inv_beta)
    return pot, train, test


def blr_predictive(W: np.ndarray, test: datasets.LabeledDataset):
    """Accuracy and mean log-likelihood of the MC posterior predictive over samples ``W``."""
    from scipy.special import log_expit, logsumexp
    m = (W[:, :-1] @ test.features.T) * test.labels[None]  # (S, M)
    logp = logsumexp(log_expit(m), axis=0) - np.log(len(W))
    return float(np.mean(logp > np.log(0.5))), float(np.mean(logp))


def run_blr(cfg: FlowConfig, out: Path, records: list) -> JkoChain:
    pot, train, test = blr_problem(cfg)
    D = pot.dim
    initial = _initial_from_cfg(cfg, GaussianMeasure(np.zeros(D), cfg.blr.initial_std ** 2 * np.eye(D)))
    if initial.dim != D:
        raise ValueError(f"initial measure has dim {initial.dim}, dataset needs {D}")
    chain = JkoChain(initial, h=cfg.h, inv_beta=cfg.inv_beta, config_hash=cfg.digest())
    chain = train_chain(chain, pot, cfg, numcore.make_rng(cfg.seed, STREAM_TRAIN), cfg.steps)
    ev = numcore.make_rng(cfg.seed, STREAM_EVAL)
    W = chain.push(chain.initial.sample(cfg.blr.eval_samples, ev))
    acc, ll = blr_predictive(W, test)
    desc = dict(experiment="blr", dataset=Path(cfg.blr.dataset).name, n_train=len(train), n_test=len(test))
    records.append(metrics.metric_report("accuracy", acc, None, cfg.blr.eval_samples, cfg.seed, **desc))
    records.append(metrics.metric_report("mean_loglik", ll, None, cfg.blr.eval_samples, cfg.seed, **desc))
    return chain


def run_custom(cfg: FlowConfig, out: Path, records: list) -> JkoChain:
    pot = energy.potential_from_spec(cfg.potential)
    D = pot.dim if pot.dim is not None else cfg.dim
    initial = _initial_from_cfg(cfg, GaussianMeasure(np.zeros(D), np.eye(D)))
    chain = JkoChain(initial, h=cfg.h, inv_beta=cfg.inv_beta, config_hash=cfg.digest())
    chain = train_chain(chain, pot, cfg, numcore.make_rng(cfg.seed, STREAM_TRAIN), cfg.steps)
    ev = numcore.make_rng(cfg.seed, STREAM_EVAL)
    if chain.n_steps:
        X = chain.push(chain.initial.sample(cfg.eval.n_samples, ev), upto=chain.n_steps - 1)
        t = jko.free_energy_terms(chain, pot, X, chain.n_steps)
        for name, value in sorted(t.items()):
            records.append(metrics.metric_report(name, value, None, cfg.eval.n_samples, cfg.seed,
                                                 experiment="custom", stage=chain.n_steps))
    target = energy.StationaryTarget.for_potential(pot, cfg.inv_beta)
    if target.log_z is not None and isinstance(pot, (energy.GaussianMixture, energy.Quadratic)):
        if isinstance(pot, energy.Quadratic):
            ref = metrics.gaussian_view(pot.b, cfg.inv_beta * np.linalg.inv(pot.A), "stationary")
        else:
            ref = metrics.MeasureView(pot.sample, pot.logpdf, "stationary")
        v, se = metrics.symkl_mc(metrics.chain_view(chain), ref, cfg.eval.n_samples, ev)
        records.append(metrics.metric_report("symkl", v, se, cfg.eval.n_samples, cfg.seed,
                                             experiment="custom", reference="stationary law"))
    return chain


def filter_problem(cfg: FlowConfig):
    pot = energy.potential_from_spec(cfg.potential) if cfg.potential else energy.Sinusoid1D()
    initial = _initial_from_cfg(cfg, GaussianMeasure(np.zeros(1), np.eye(1)))
    f = cfg.filter
    obs_times = [f.obs_interval * (i + 1) for i in range(f.n_obs)]
    if obs_times and obs_times[-1] > f.t_final + 1e-12:
        raise ValueError("observation times run past t_final")
    return pot, initial, obs_times


def run_filter_experiment(cfg: FlowConfig, out: Path, records: list):
    pot, initial, obs_times = filter_problem(cfg)
    f = cfg.filter
    truth_path, ys = mcmc.simulate_observations(pot, initial, obs_times, f.sigma,
                                                numcore.make_rng(cfg.seed, STREAM_OBS),
                                                inv_beta=cfg.inv_beta)
    with open(out / "observations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y", "x_true"])
        for t, y, x in zip(obs_times, ys, truth_path):
            w.writerow([repr(t), repr(float(y[0])), repr(float(x[0]))])
    fc = mcmc.FilterConfig(
        h=cfg.h, train=cfg.train.to_train_config(), pool=f.pool,
        mh=mcmc.MhChainConfig(burn_in=f.mh.burn_in, thinning=f.mh.thinning,
                              n_chains=f.mh.n_chains, draws_per_chain=f.mh.draws_per_chain))
    def cb(state, samples):
        chain_io.save_chain(state.intervals[-1], out / f"interval_{state.k:02d}",
                            extra={"t_start": state.times[-2], "t_end": state.times[-1]})

    state = mcmc.run_filter(pot, initial, obs_times, list(ys), f.sigma, f.t_final, fc,
                            numcore.make_rng(cfg.seed, STREAM_TRAIN), cfg.inv_beta, callback=cb)
    grid = baselines.Grid1D.uniform(f.grid_lo, f.grid_hi, f.grid_n,
                                    density=lambda x: np.exp(initial.logpdf(x[:, None])))
    truth = mcmc.grid_filter(pot, grid, obs_times, list(ys), f.sigma, f.t_final, cfg.inv_beta)
    lp_model = mcmc.predictive_on_grid(state, grid.x)
    lp_truth = np.log(np.maximum(truth.rho, 1e-300))
    v = metrics.symkl_grid(lp_model, lp_truth, grid.dx)
    records.append(metrics.metric_report("symkl", float(v), None, None, cfg.seed, experiment="filter",
                                         t=f.t_final, reference="chang-cooper grid",
                                         n_obs=len(obs_times)))
    with open(out / "density_grid.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "logdensity_model", "logdensity_reference"])
        for row in zip(grid.x.tolist(), lp_model.tolist(), lp_truth.tolist()):
            w.writerow([repr(float(c)) for c in row])
    return state


DRIVERS = {"stationary": run_stationary, "ou": run_ou, "blr": run_blr, "custom": run_custom}


def run_experiment(cfg: FlowConfig, root=None) -> dict:
    """Run the configured pipeline; returns the manifest written next to the outputs."""
    out = output_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    records: list = []
    t0 = time.perf_counter()
    content_hash = None
    if cfg.experiment == "filter":
        state = run_filter_experiment(cfg, out, records)
        content_hash = [json.loads((out / f"interval_{i + 1:02d}" / "chain.json").read_text())["content_hash"]
                        for i in range(state.k)]
    else:
        chain = DRIVERS[cfg.experiment](cfg, out, records)
        manifest_path = chain_io.save_chain(chain, out / "chain")
        content_hash = json.loads(manifest_path.read_text())["content_hash"]
        if chain.n_steps:
            fs = jko.sample_with_density(chain, numcore.make_rng(cfg.seed, STREAM_EVAL + 100),
                                         n=min(cfg.eval.n_samples, 2000))
            write_samples_csv(out / f"samples_k{chain.n_steps:03d}.csv", fs.terminal, fs.logdens[-1])
    (out / "metrics.json").write_text(json.dumps(records, indent=1, sort_keys=True))
    manifest = {
        "config": cfg.model_dump(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "content_hash": content_hash,
        "wall_time_s": time.perf_counter() - t0,
        "versions": _versions(),
        "output_dir": str(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
