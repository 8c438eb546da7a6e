"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary.

The long runs (OU, stationary mixture, filtering) read their settings from
``configs/*.yaml`` so the numbers reported here are the ones a user gets from
``jkoflow run``.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import trapezoid

from conftest import ACCEPTANCE
from jkoflow import baselines, chain_io, energy, experiments, icnn, jko, mcmc, numcore
from jkoflow.config import load_config
from jkoflow.jko import GaussianMeasure, JkoChain, TrainConfig
from oracles import (WigglyPotential, fd_grad, fd_jacobian, fd_param_grad, flat, icnn_gradient,
                     icnn_value, random_icnn, rel_err)

CONFIGS = Path(__file__).parent.parent / "configs"


def record(n, ok, detail):
    ACCEPTANCE.append((n, "PASS" if ok else "FAIL", detail))
    assert ok, f"criterion {n}: {detail}"


def _run_config(name, root):
    cfg = load_config(CONFIGS / name)
    t0 = time.perf_counter()
    manifest = experiments.run_experiment(cfg, root)
    out = Path(manifest["output_dir"])
    return cfg, json.loads((out / "metrics.json").read_text()), out, time.perf_counter() - t0


def _trained_icnns():
    """Small ICNNs actually fitted by JKO steps on a few potentials."""
    out = []
    rng = numcore.make_rng(11)
    cfg = TrainConfig(iters=150, lr=1e-2, batch=256, width=16, pretrain_iters=1500)
    problems = [energy.Quadratic(numcore.random_spd(2, rng), rng.normal(size=2)),
                energy.GaussianMixture.random(2, 3, 4.0, rng),
                energy.Sinusoid1D(),
                energy.Quadratic(numcore.random_spd(4, rng), rng.normal(size=4)),
                WigglyPotential()]
    dims = [2, 2, 1, 4, 3]
    for pot, D in zip(problems, dims):
        chain = JkoChain(GaussianMeasure(np.zeros(D), np.eye(D)), h=0.1)
        for _ in range(2):
            chain, _ = jko.jko_train_step(chain, pot, cfg, rng)
        out.extend(chain.maps)
    return out


@pytest.fixture(scope="module")
def trained():
    return _trained_icnns()


def test_criterion_01_derivative_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"grad": 0.0, "hess": 0.0, "param": 0.0}
    pot = WigglyPotential()
    n_pairs = 0
    for D in (1, 2, 4, 8):
        for _ in range(50):
            p = random_icnn(D, rng, widths=(5, 4), alpha=rng.uniform(0.01, 0.5))
            x = rng.normal(size=D) * rng.uniform(0.5, 2.0)
            ev = icnn.icnn_eval(p, x[None])
            worst["grad"] = max(worst["grad"], rel_err(ev.grad[0], fd_grad(lambda z: icnn_value(p, z), x)))
            worst["hess"] = max(worst["hess"],
                                rel_err(ev.hess[0], fd_jacobian(lambda z: icnn_gradient(p, z), x)))

            def loss(q):
                return icnn.icnn_loss_grad(q, x[None], pot, 0.2, 1.0, with_grad=False)[0]

            _, g, _ = icnn.icnn_loss_grad(p, x[None], pot, 0.2, 1.0)
            worst["param"] = max(worst["param"], rel_err(flat(g.tensors()), flat(fd_param_grad(p, loss))))
            n_pairs += 1
    dt = time.perf_counter() - t0
    ok = worst["grad"] < 1e-5 and worst["hess"] < 1e-4 and worst["param"] < 1e-5 and dt < 60
    record(1, ok, f"{n_pairs} pairs, max rel err grad {worst['grad']:.1e} hess {worst['hess']:.1e} "
                  f"dL/dtheta {worst['param']:.1e}, {dt:.1f}s")


def test_criterion_02_convexity(trained):
    rng = np.random.default_rng(202)
    untrained = [random_icnn(int(rng.integers(1, 6)), rng, widths=(16, 16), alpha=0.01) for _ in range(10)]
    params = untrained + trained[:10]
    worst = np.inf
    for p in params:
        X = 3.0 * rng.normal(size=(1000, p.dim))
        lam = np.min(np.linalg.eigvalsh(icnn.icnn_eval(p, X).hess)) - p.alpha
        worst = min(worst, lam)
    record(2, len(params) == 20 and worst >= -1e-8,
           f"{len(params)} parameter sets (10 trained), min(lambda_min - alpha) = {worst:.2e}")


def test_criterion_03_inversion_round_trip(trained):
    rng = np.random.default_rng(303)
    worst = 0.0
    t0 = time.perf_counter()
    for p in trained:
        Y = icnn.icnn_grad(p, 1.5 * rng.normal(size=(100, p.dim)))
        Y += 0.5 * rng.normal(size=Y.shape)  # not only exact images of the training region
        X = jko.invert_grad(p, Y)
        res = np.linalg.norm(icnn.icnn_grad(p, X) - Y, axis=1) / (1 + np.linalg.norm(Y, axis=1))
        worst = max(worst, float(res.max()))
    record(3, worst <= 1e-8, f"{len(trained)} trained ICNNs x 100 points, max scaled residual {worst:.1e}, "
                             f"{time.perf_counter() - t0:.1f}s")


def test_criterion_04_entropy_change_oracle():
    rng = np.random.default_rng(404)
    N = 10_000
    worst = 0.0
    for _ in range(10):
        D = int(rng.integers(1, 9))
        S = numcore.random_spd(D, rng)
        w, V = np.linalg.eigh(S)
        root = V @ np.diag(np.sqrt(w)) @ V.T
        alpha = 1e-3 * np.sqrt(w.min())
        p = icnn.zero_params(D, widths=(4, 4), alpha=alpha)
        p.B = np.linalg.cholesky(root - alpha * np.eye(D)).T
        X = rng.normal(size=(N, D))
        ev = icnn.icnn_eval(p, X)
        assert np.allclose(ev.grad, X @ root, atol=1e-9)
        _, est = energy.fp_energy_estimate(ev, energy.ZeroPotential(D))
        se = np.std(ev.logdet_hess) / np.sqrt(N)
        truth = 0.5 * np.linalg.slogdet(S)[1]
        # a linear map has a constant log-det, so the standard error is roundoff-sized
        tol = max(3 * se, 1e-10 * (1 + abs(truth)))
        worst = max(worst, abs(est - truth) / tol)
    record(4, worst <= 1.0, f"10 SPD covariances, D<=8, N={N}: max |est - truth| / tol = {worst:.2f}")


@pytest.fixture(scope="module")
def ou_runs(tmp_path_factory):
    return {}


@pytest.mark.slow
@pytest.mark.parametrize("dim", [1, 2, 4])
def test_criterion_05_ou(dim, ou_runs, tmp_path_factory):
    cfg, recs, out, wall = _run_config(f"ou_d{dim}.yaml", tmp_path_factory.mktemp(f"ou{dim}"))
    ou_runs[dim] = out
    model = next(r for r in recs if r["descriptors"]["method"] == "jko" and r["descriptors"]["t"] == 0.5)
    em = next(r for r in recs if r["descriptors"]["method"] == "em+kde"
              and r["descriptors"]["particles"] == 1000 and r["descriptors"]["t"] == 0.5)
    ok = cfg.h == 0.05 and model["value"] < 0.05 and model["value"] < em["value"] and wall <= 900
    record(5, ok, f"D={dim}: SymKL model {model['value']:.4f} +- {model['std_error']:.4f}, "
                  f"EM(1e3)+KDE {em['value']:.4f}, {wall:.0f}s")


@pytest.mark.slow
def test_criterion_06_stationary(tmp_path):
    cfg, recs, out, wall = _run_config("stationary_d2.yaml", tmp_path)
    last = next(r for r in recs if r["descriptors"]["stage"] == 40)
    ok = cfg.steps == 40 and cfg.h == 0.1 and last["value"] < 0.1 and wall <= 1200
    record(6, ok, f"D=2, K=40: SymKL {last['value']:.4f} +- {last['std_error']:.4f}, {wall:.0f}s")


def test_criterion_07_chang_cooper():
    t0 = time.perf_counter()
    x = np.linspace(-5, 5, 2000)
    worst_stat = 0.0
    for pot, inv_beta in ((energy.Sinusoid1D(), 1.0), (energy.Quadratic(np.array([[1.3]]), np.array([0.4])), 0.5)):
        phi, _ = pot.value_grad(x[:, None])
        g = baselines.Grid1D(x, np.exp(-phi / inv_beta)).normalized()
        out = baselines.chang_cooper_evolve(g, pot, inv_beta, 1e-3, 10.0)  # 10^4 steps
        worst_stat = max(worst_stat, float(np.max(np.abs(out.rho - g.rho) / g.rho)))
    rho = baselines.Grid1D.uniform(-5, 5, 2000, density=lambda z: np.exp(-0.5 * ((z - 2) / 0.3) ** 2))
    rho = rho.normalized()
    worst_mass = 0.0
    for _ in range(200):
        nxt = baselines.chang_cooper_evolve(rho, energy.Sinusoid1D(), 1.0, 1e-3, 1e-3)
        worst_mass = max(worst_mass, abs(nxt.mass() - rho.mass()))
        rho = nxt
    pot = energy.Quadratic(np.array([[1.0]]), np.array([1.0]))
    g = baselines.Grid1D.uniform(density=lambda z: np.exp(-0.5 * z * z))
    mean, var = baselines.chang_cooper_evolve(g, pot, 1.0, 1e-3, 0.5).mean_var()
    m, C = baselines.ou_closed_form(baselines.OUSpec(pot.A, pot.b), 0.5)
    moment_err = max(abs(mean - m[0]), abs(var - C[0, 0]))
    dt = time.perf_counter() - t0
    ok = worst_stat < 1e-8 and worst_mass < 1e-12 and moment_err < 1e-3 and dt < 60
    record(7, ok, f"stationarity {worst_stat:.1e}, per-step mass {worst_mass:.1e}, "
                  f"OU moments {moment_err:.1e}, {dt:.1f}s")


@pytest.mark.slow
def test_criterion_08_density_normalization(ou_runs, tmp_path):
    if 1 in ou_runs:
        chain = chain_io.load_chain(ou_runs[1] / "chain")
    else:
        _, _, out, _ = _run_config("ou_d1.yaml", tmp_path)
        chain = chain_io.load_chain(out / "chain")
    x = np.linspace(-10, 10, 8001)
    mass = trapezoid(np.exp(jko.density_at(chain, x[:, None])), x)
    fs = jko.sample_with_density(chain, numcore.make_rng(808), n=100)
    gap = float(np.max(np.abs(jko.density_at(chain, fs.terminal) - fs.logdens[-1])))
    record(8, abs(mass - 1) <= 1e-2 and gap <= 1e-6,
           f"integral on [-10,10] {mass:.5f}, forward vs traced-back log density {gap:.1e}")


@pytest.mark.slow
def test_criterion_09_filtering(tmp_path):
    cfg = load_config(CONFIGS / "filter.yaml")
    records = []
    t0 = time.perf_counter()
    state = experiments.run_filter_experiment(cfg, tmp_path, records)
    wall = time.perf_counter() - t0
    symkl = records[0]["value"]
    rng = np.random.default_rng(909)
    prop, cur = mcmc.propose(state, 500, rng), mcmc.propose(state, 500, rng)
    short = np.log(mcmc.filter_acceptance_ratio(state, prop, cur))
    gap = float(np.max(np.abs(short - mcmc.full_log_ratio(state, prop, cur))))
    ok = symkl < 0.1 and gap < 1e-8 and wall <= 3600 and len(state.observations) == 10
    record(9, ok, f"SymKL vs grid truth {symkl:.4f}, acceptance formula gap {gap:.1e}, {wall:.0f}s")


DIABETES = Path(os.environ.get("JKOFLOW_DIABETES", "data/diabetes"))


@pytest.mark.nightly
@pytest.mark.skipif(not DIABETES.exists(), reason=f"dataset {DIABETES} not present (nightly only)")
def test_criterion_10_blr(tmp_path):
    cfg = load_config(CONFIGS / "blr_diabetes.yaml")
    cfg = cfg.model_copy(update={"blr": cfg.blr.model_copy(update={"dataset": str(DIABETES)})})
    t0 = time.perf_counter()
    experiments.run_experiment(cfg, tmp_path)
    recs = {r["metric"]: r["value"] for r in json.loads((tmp_path / cfg.output_dir / "metrics.json").read_text())}
    wall = time.perf_counter() - t0
    ok = abs(recs["accuracy"] - 0.775) <= 0.03 and abs(recs["mean_loglik"] + 0.45) <= 0.05 and wall <= 7200
    record(10, ok, f"accuracy {recs['accuracy']:.3f}, mean log-likelihood {recs['mean_loglik']:.3f}, {wall:.0f}s")


def test_criterion_10_gate():
    if not DIABETES.exists():
        ACCEPTANCE.append((10, "SKIP", f"dataset {DIABETES} not present; run `jkoflow fetch-data diabetes` "
                                       "and the nightly suite"))
