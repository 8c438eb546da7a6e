"""Divergences between measures exposed as (sampler, log-density) pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore
from .errors import NonFiniteLogRatio


@dataclass
class MeasureView:
    """Uniform adapter: ``sampler(n, rng) -> (n, D)`` and ``logdensity(X) -> (n,)``.

    ``sample_logdensity(n, rng) -> (X, logp)`` may be supplied when sampling
    yields the density for free (JKO chains do).
    """
    sampler: Callable
    logdensity: Callable
    tag: str = ""
    sample_logdensity: Callable | None = None

    def draw(self, n, rng):
        if self.sample_logdensity is not None:
            return self.sample_logdensity(n, rng)
        X = self.sampler(n, rng)
        return X, self.logdensity(X)


def gaussian_view(mean, cov, tag="gaussian") -> MeasureView:
    from .jko import GaussianMeasure
    g = GaussianMeasure(mean, cov)
    return MeasureView(g.sample, g.logpdf, tag)


def chain_view(chain, k: int | None = None, tag="jko") -> MeasureView:
    from . import jko
    k = chain.n_steps if k is None else k

    def sample_logdensity(n, rng):
        fs = jko.sample_with_density(chain, rng, upto=k, n=n)
        return fs.terminal, fs.logdens[-1]

    return MeasureView(lambda n, rng: sample_logdensity(n, rng)[0],
                       lambda X: jko.density_at(chain, X, k), tag, sample_logdensity)


def kde_view(points, tag="kde") -> MeasureView:
    from .baselines import GaussianKDE
    kde = GaussianKDE(points)
    return MeasureView(kde.sample, kde.logpdf, tag)


def grid_view(grid, tag="grid") -> MeasureView:
    """1-D grid density: inverse-CDF sampling, piecewise-linear log-density interpolation."""
    cdf = np.cumsum(grid.rho)
    cdf = cdf / cdf[-1]

    def sampler(n, rng):
        j = np.searchsorted(cdf, rng.uniform(size=n))
        j = np.minimum(j, len(grid.x) - 1)
        jitter = rng.uniform(-0.5, 0.5, size=n) * grid.dx
        return np.clip(grid.x[j] + jitter, grid.x[0], grid.x[-1])[:, None]

    return MeasureView(sampler, lambda X: grid.logdensity(np.asarray(X)[:, 0]), tag)


def _log_ratios(p: MeasureView, q: MeasureView, n, rng):
    X, lp = p.draw(n, rng)
    lq = q.logdensity(X)
    r = np.asarray(lp, dtype=np.float64) - np.asarray(lq, dtype=np.float64)
    bad = ~np.isfinite(r)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteLogRatio(f"non-finite log ratio between {p.tag!r} and {q.tag!r}",
                                sample=np.asarray(X)[i])
    return r


def symkl_mc(p: MeasureView, q: MeasureView, n_samples: int = 10_000, rng=None):
    """Monte Carlo ``KL(p||q) + KL(q||p)``; returns ``(value, std_error)``."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    if p is q:
        return 0.0, 0.0
    rng = numcore.make_rng(0) if rng is None else rng
    r_pq = _log_ratios(p, q, n_samples, rng)
    r_qp = _log_ratios(q, p, n_samples, rng)
    value = float(np.mean(r_pq) + np.mean(r_qp))
    se = float(np.sqrt(np.var(r_pq, ddof=1) / n_samples + np.var(r_qp, ddof=1) / n_samples))
    return value, se


def symkl_grid(logp, logq, dx: float):
    """SymKL of two densities tabulated on the same uniform grid (normalized there first)."""
    logp = np.asarray(logp, dtype=np.float64)
    logq = np.asarray(logq, dtype=np.float64)
    lp = logp - np.log(np.sum(np.exp(logp - logp.max())) * dx) - logp.max()
    lq = logq - np.log(np.sum(np.exp(logq - logq.max())) * dx) - logq.max()
    p, q = np.exp(lp), np.exp(lq)
    return float(np.sum((p - q) * (lp - lq)) * dx)


def gaussian_kl(mean1, cov1, mean2, cov2) -> float:
    """Closed-form ``KL(N(mean1, cov1) || N(mean2, cov2))``."""
    mean1, mean2 = np.atleast_1d(mean1).astype(float), np.atleast_1d(mean2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    D = mean1.shape[0]
    L1, ld1 = numcore.chol_logdet(cov1)
    L2, ld2 = numcore.chol_logdet(cov2)
    S = numcore.chol_solve(L2, cov1)
    d = mean2 - mean1
    maha = float(d @ numcore.chol_solve(L2, d[:, None])[:, 0])
    if np.array_equal(mean1, mean2) and np.array_equal(cov1, cov2):
        return 0.0  # exact, rather than trace roundoff
    return 0.5 * (np.trace(S) + maha - D + ld2 - ld1)


def metric_report(metric: str, value: float, std_error: float | None, n_samples: int | None,
                  seed: int | None, **descriptors) -> dict:
    return {"metric": metric, "value": value, "std_error": std_error, "n_samples": n_samples,
            "seed": seed, "descriptors": descriptors}
