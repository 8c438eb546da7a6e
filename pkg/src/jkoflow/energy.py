"""Potentials, the stochastic free-energy estimator and stationary targets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_expit, logsumexp

from . import numcore
from .errors import DimensionMismatch

LOG2PI = np.log(2.0 * np.pi)


class Potential:
    """Base class. Subclasses implement batched ``value_grad(Y, rng)``.

    ``Y`` has shape (N, D); the result is ``(values (N,), grads (N, D))``.
    """

    kind = "abstract"
    dim: int | None = None
    stochastic = False

    def value_grad(self, Y, rng=None):
        raise NotImplementedError

    def _check(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        if self.dim is not None and Y.shape[1] != self.dim:
            raise DimensionMismatch(f"{self.kind} potential has dim {self.dim}, got {Y.shape[1]}")
        return Y

    def to_spec(self) -> dict:
        raise NotImplementedError


@dataclass
class ZeroPotential(Potential):
    dim: int | None = None
    kind = "zero"

    def value_grad(self, Y, rng=None):
        Y = self._check(Y)
        return np.zeros(Y.shape[0]), np.zeros_like(Y)

    def to_spec(self):
        return {"kind": "zero", "dim": self.dim}


@dataclass
class Quadratic(Potential):
    """``Phi(x) = 1/2 (x - b)^T A (x - b)`` with SPD ``A``."""
    A: np.ndarray
    b: np.ndarray
    kind = "quadratic"

    def __post_init__(self):
        self.A = numcore.check_symmetric(np.atleast_2d(np.asarray(self.A, dtype=np.float64)))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        numcore.chol_logdet(self.A)
        self.dim = self.A.shape[0]

    def value_grad(self, Y, rng=None):
        Y = self._check(Y)
        d = Y - self.b
        g = d @ self.A
        return 0.5 * np.sum(g * d, axis=1), g

    def to_spec(self):
        return {"kind": "quadratic", "A": self.A.tolist(), "b": self.b.tolist()}


@dataclass
class GaussianMixture(Potential):
    """``Phi = -inv_beta * log(mixture density)`` so the stationary law is the mixture itself."""
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    inv_beta: float = 1.0
    kind = "mixture"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-10 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.dim = self.means.shape[1]
        self.prec, logdets = numcore.spd_inverse(self.covs)
        self._log_norm = np.log(self.weights) - 0.5 * (self.dim * LOG2PI + logdets)

    @classmethod
    def random(cls, dim: int, n_components: int, spread: float, rng, inv_beta: float = 1.0):
        """Uniform weights, identity covariances, means uniform on ``[-spread/2, spread/2]^dim``."""
        means = rng.uniform(-spread / 2, spread / 2, size=(n_components, dim))
        covs = np.broadcast_to(np.eye(dim), (n_components, dim, dim)).copy()
        return cls(np.full(n_components, 1.0 / n_components), means, covs, inv_beta)

    def _component_terms(self, Y):
        d = Y[:, None, :] - self.means[None]  # (N, M, D)
        pd = np.einsum("mij,nmj->nmi", self.prec, d)
        logc = self._log_norm[None] - 0.5 * np.sum(d * pd, axis=2)
        return logc, pd

    def logpdf(self, Y):
        Y = self._check(Y)
        logc, _ = self._component_terms(Y)
        return logsumexp(logc, axis=1)

    def value_grad(self, Y, rng=None):
        Y = self._check(Y)
        logc, pd = self._component_terms(Y)
        lse = logsumexp(logc, axis=1)
        resp = np.exp(logc - lse[:, None])
        grad_log = -np.sum(resp[:, :, None] * pd, axis=1)
        return -self.inv_beta * lse, -self.inv_beta * grad_log

    def sample(self, n: int, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        L = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", L[comp], z)

    def to_spec(self):
        return {"kind": "mixture", "weights": self.weights.tolist(), "means": self.means.tolist(),
                "covs": self.covs.tolist(), "inv_beta": self.inv_beta}


@dataclass
class Sinusoid1D(Potential):
    """``Phi(x) = sin(2 pi x) / pi + x^2 / 4`` (one-dimensional only)."""
    kind = "sinusoid"
    dim = 1

    def value_grad(self, Y, rng=None):
        Y = self._check(Y)
        x = Y[:, 0]
        v = np.sin(2.0 * np.pi * x) / np.pi + 0.25 * x * x
        g = 2.0 * np.cos(2.0 * np.pi * x) + 0.5 * x
        return v, g[:, None]

    def to_spec(self):
        return {"kind": "sinusoid"}


@dataclass
class LogisticPosterior(Potential):
    """``Phi(x) = -inv_beta * [log p0(x) + log p(S | x)]`` for Bayesian logistic regression.

    Parameters are ``x = [w, log alpha]``. The prior is
    ``N(w | 0, alpha^-1 I) * Gamma(alpha | a0, rate=b0)`` plus the log-Jacobian of
    the ``alpha -> log alpha`` change of variables. Features should already
    contain the bias column. With ``batch_size`` set, the likelihood is
    replaced by the unbiased minibatch estimate ``(M/m) sum_batch``; then an
    ``rng`` is required.
    """
    features: np.ndarray
    labels: np.ndarray
    batch_size: int | None = None
    inv_beta: float = 1.0
    a0: float = 1.0
    b0: float = 0.01
    kind = "logistic"
    stochastic: bool = field(init=False, default=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.dim = self.features.shape[1] + 1
        self.stochastic = self.batch_size is not None and self.batch_size < len(self.labels)

    def log_prior(self, Y):
        w, lam = Y[:, :-1], Y[:, -1]
        F = w.shape[1]
        a = np.exp(lam)
        ww = np.sum(w * w, axis=1)
        val = (0.5 * F * (lam - LOG2PI) - 0.5 * a * ww
               + self.a0 * np.log(self.b0) - gammaln(self.a0) + (self.a0 - 1.0) * lam - self.b0 * a
               + lam)
        grad = np.empty_like(Y)
        grad[:, :-1] = -a[:, None] * w
        grad[:, -1] = 0.5 * F - 0.5 * a * ww + (self.a0 - 1.0) - self.b0 * a + 1.0
        return val, grad

    def log_likelihood(self, Y, idx=None):
        """Sum of ``log sigmoid(y w.f)`` over rows ``idx`` (all rows by default)."""
        F = self.features if idx is None else self.features[idx]
        y = self.labels if idx is None else self.labels[idx]
        w = Y[:, :-1]
        m = (w @ F.T) * y[None]  # (N, batch)
        val = np.sum(log_expit(m), axis=1)
        coef = np.exp(log_expit(-m)) * y[None]  # d/dm log sigmoid(m) = sigmoid(-m)
        grad = np.zeros_like(Y)
        grad[:, :-1] = coef @ F
        return val, grad

    def minibatch(self, rng):
        M = len(self.labels)
        if not self.stochastic:
            return None, 1.0
        if rng is None:
            raise ValueError("minibatch potential requires an rng")
        return rng.choice(M, size=self.batch_size, replace=False), M / self.batch_size

    def value_grad(self, Y, rng=None, idx=None):
        Y = self._check(Y)
        scale = 1.0
        if idx is None:
            idx, scale = self.minibatch(rng)
        else:
            scale = len(self.labels) / len(idx)
        pv, pg = self.log_prior(Y)
        lv, lg = self.log_likelihood(Y, idx)
        return -self.inv_beta * (pv + scale * lv), -self.inv_beta * (pg + scale * lg)

    def to_spec(self):
        return {"kind": "logistic", "batch_size": self.batch_size, "inv_beta": self.inv_beta}


def potential_eval(p: Potential, x, rng=None):
    """Single-point ``(Phi(x), grad Phi(x))``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if p.dim is not None and x.shape[0] != p.dim:
        raise DimensionMismatch(f"{p.kind} potential has dim {p.dim}, got {x.shape[0]}")
    v, g = p.value_grad(x[None], rng)
    return float(v[0]), g[0]


def potential_from_spec(spec: dict, dataset=None) -> Potential:
    kind = spec["kind"]
    if kind == "zero":
        return ZeroPotential(spec.get("dim"))
    if kind == "quadratic":
        return Quadratic(np.asarray(spec["A"]), np.asarray(spec["b"]))
    if kind == "mixture":
        return GaussianMixture(spec["weights"], spec["means"], spec["covs"], spec.get("inv_beta", 1.0))
    if kind == "sinusoid":
        return Sinusoid1D()
    if kind == "logistic":
        if dataset is None:
            raise ValueError("logistic potential needs a dataset")
        return LogisticPosterior(dataset.features, dataset.labels, spec.get("batch_size"),
                                 spec.get("inv_beta", 1.0))
    raise ValueError(f"unknown potential kind {kind!r}")


def fp_energy_estimate(evals, potential: Potential, inv_beta: float = 1.0, rng=None):
    """Batch estimate of the potential energy and entropy change of ``T#rho``.

    ``evals`` is an :class:`~jkoflow.icnn.IcnnEval` (or a list of them) taken at
    samples of rho, with ``T = grad psi``. Returns ``(U_hat, dE_hat)``:
    the batch means of ``Phi(T(x))`` and of ``log det grad T(x)``. The free
    energy of ``T#rho`` is ``U_hat - inv_beta * dE_hat`` up to a T-independent
    constant. Sums are taken over sorted terms so results do not depend on
    batch order.
    """
    if not isinstance(evals, (list, tuple)):
        evals = [evals]
    Y = np.concatenate([e.grad for e in evals])
    logdets = np.concatenate([np.atleast_1d(e.logdet_hess) for e in evals])
    phi, _ = potential.value_grad(Y, rng)
    n = len(logdets)
    return float(np.sum(np.sort(phi)) / n), float(np.sum(np.sort(logdets)) / n)


@dataclass
class StationaryTarget:
    """Stationary law ``exp(-beta Phi) / Z``; ``log_z`` is None when unknown."""
    potential: Potential
    inv_beta: float = 1.0
    log_z: float | None = None

    @classmethod
    def for_potential(cls, potential: Potential, inv_beta: float = 1.0) -> "StationaryTarget":
        log_z = None
        if isinstance(potential, Quadratic):
            _, logdet = numcore.chol_logdet(potential.A / inv_beta)
            log_z = 0.5 * (potential.dim * LOG2PI - logdet)
        elif isinstance(potential, GaussianMixture) and np.isclose(potential.inv_beta, inv_beta):
            log_z = 0.0
        return cls(potential, inv_beta, log_z)


def stationary_logdensity(target: StationaryTarget, x, allow_unnormalized: bool = False):
    """``-beta Phi(x) - log Z`` at a point or batch.

    With ``allow_unnormalized`` the ``log Z`` term is dropped when unknown.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    phi, _ = target.potential.value_grad(np.atleast_2d(x))
    out = -phi / target.inv_beta
    if target.log_z is not None:
        out = out - target.log_z
    elif not allow_unnormalized:
        raise ValueError("normalizer unknown; pass allow_unnormalized=True")
    return float(out[0]) if single else out
