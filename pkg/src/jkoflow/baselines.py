"""Reference solutions: Euler-Maruyama particles, Gaussian KDE, Chang-Cooper grids, OU marginals."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import logsumexp

from . import numcore
from .errors import NegativeDensity, NonFinitePosition, SingularBandwidth


@dataclass
class ParticleEnsemble:
    positions: np.ndarray  # (N, D)
    t: float = 0.0
    stream: int = 0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if not np.all(np.isfinite(self.positions)):
            raise NonFinitePosition("ensemble contains non-finite positions")

    def to_csv(self, path):
        D = self.positions.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(D)])
            w.writerows(self.positions.tolist())


def em_simulate(potential, ensemble: ParticleEnsemble, dt: float, t_end: float, rng,
                inv_beta: float = 1.0) -> ParticleEnsemble:
    """Euler-Maruyama for ``dX = -grad Phi(X) dt + sqrt(2 inv_beta) dW`` up to ``t_end``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t_end < ensemble.t:
        raise ValueError("t_end precedes the ensemble time")
    n_steps = int(round((t_end - ensemble.t) / dt))
    x = ensemble.positions.copy()
    noise = np.sqrt(2.0 * inv_beta * dt)
    for _ in range(n_steps):
        _, g = potential.value_grad(x, rng)
        x = x - g * dt
        if noise > 0:
            x += noise * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise NonFinitePosition("Euler-Maruyama produced non-finite positions")
    return ParticleEnsemble(x, t=ensemble.t + n_steps * dt, stream=ensemble.stream)


def scott_factor(n: int, dim: int) -> float:
    return n ** (-1.0 / (dim + 4))


class GaussianKDE:
    """Gaussian KDE with Scott's bandwidth, ``cov = n^(-2/(D+4)) * sample_cov``."""

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[0] < 2:
            raise SingularBandwidth("need at least two points")
        self.points = pts
        n, D = pts.shape
        cov = np.atleast_2d(np.cov(pts, rowvar=False))
        self.bandwidth = scott_factor(n, D) ** 2 * cov
        try:
            self._L, logdet = numcore.chol_logdet(self.bandwidth)
        except Exception:
            raise SingularBandwidth("sample covariance is singular") from None
        self._whitened = np.linalg.solve(self._L, pts.T).T
        self._log_norm = -np.log(n) - 0.5 * (D * np.log(2 * np.pi) + logdet)

    def logpdf(self, X, chunk: int = 2048):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = np.linalg.solve(self._L, X.T).T
        out = np.empty(X.shape[0])
        pn = np.sum(self._whitened ** 2, axis=1)
        for s in range(0, X.shape[0], chunk):
            z = Z[s:s + chunk]
            d2 = np.sum(z ** 2, axis=1)[:, None] - 2.0 * z @ self._whitened.T + pn[None]
            out[s:s + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1)
        return out + self._log_norm

    def sample(self, n, rng):
        idx = rng.integers(0, self.points.shape[0], size=n)
        return self.points[idx] + rng.standard_normal((n, self.points.shape[1])) @ self._L.T


def kde_logdensity(ensemble, x):
    """Log density at ``x`` (point or batch) of the Scott-bandwidth KDE of ``ensemble``."""
    pts = ensemble.positions if isinstance(ensemble, ParticleEnsemble) else ensemble
    kde = GaussianKDE(pts)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim <= 1 and kde.points.shape[1] == x.size:
        return float(kde.logpdf(x.reshape(1, -1))[0])
    return kde.logpdf(x.reshape(-1, kde.points.shape[1]))


@dataclass
class Grid1D:
    """Density values on a uniform grid, normalized so ``sum(rho) * dx == 1``."""
    x: np.ndarray
    rho: np.ndarray

    @classmethod
    def uniform(cls, lo: float = -5.0, hi: float = 5.0, n: int = 2000, density=None):
        x = np.linspace(lo, hi, n)
        rho = np.ones(n) if density is None else np.asarray(density(x), dtype=np.float64)
        return cls(x, rho).normalized()

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def mass(self) -> float:
        return float(np.sum(self.rho) * self.dx)

    def normalized(self) -> "Grid1D":
        return Grid1D(self.x, self.rho / self.mass())

    def mean_var(self):
        w = self.rho * self.dx
        m = float(np.sum(w * self.x))
        return m, float(np.sum(w * (self.x - m) ** 2))

    def logdensity(self, q):
        """Piecewise-linear interpolation of log density; ``-inf`` outside the grid."""
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        with np.errstate(divide="ignore"):
            logr = np.log(self.rho)
        out = np.interp(q, self.x, logr)
        out[(q < self.x[0]) | (q > self.x[-1])] = -np.inf
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "density"])
            w.writerows(zip(self.x.tolist(), self.rho.tolist()))


def cc_weight(w):
    """``1/w - 1/(e^w - 1)``, with the series ``1/2 - w/12`` near zero."""
    w = np.asarray(w, dtype=np.float64)
    small = np.abs(w) < 1e-6
    ws = np.where(small, 1.0, w)
    return np.where(small, 0.5 - w / 12.0, 1.0 / ws - 1.0 / np.expm1(ws))


def chang_cooper_operator(x, potential, inv_beta: float):
    """Sparse generator ``L`` with ``d rho / dt = L rho`` and zero-flux boundaries.

    Face drift is the discrete slope ``-(Phi_{j+1} - Phi_j) / dx``, which makes
    ``exp(-Phi / inv_beta)`` an exact null vector of ``L``.
    """
    if not inv_beta > 0:
        raise ValueError("Chang-Cooper needs positive diffusion")
    n = len(x)
    dx = float(x[1] - x[0])
    phi, _ = potential.value_grad(x[:, None])
    a = -(phi[1:] - phi[:-1]) / dx
    Dc = inv_beta
    w = a * dx / Dc
    delta = cc_weight(w)
    # F_{j+1/2} = a (delta rho_{j+1} + (1 - delta) rho_j) - Dc (rho_{j+1} - rho_j) / dx
    cp = a * delta - Dc / dx  # coefficient of rho_{j+1}
    c0 = a * (1.0 - delta) + Dc / dx  # coefficient of rho_j
    # d rho_j / dt = -(F_{j+1/2} - F_{j-1/2}) / dx
    main = np.zeros(n)
    upper = np.zeros(n - 1)
    lower = np.zeros(n - 1)
    main[:-1] -= c0 / dx
    upper -= cp / dx
    main[1:] += cp / dx
    lower += c0 / dx
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csc")


def chang_cooper_evolve(grid: Grid1D, potential, inv_beta: float = 1.0, dt: float = 1e-3,
                        t_end: float = 1.0, check: bool = True) -> Grid1D:
    """Implicit-Euler Chang-Cooper integration of the 1-D Fokker-Planck equation over ``t_end``."""
    n_steps = int(round(t_end / dt))
    rho = grid.rho.copy()
    if n_steps == 0:
        return Grid1D(grid.x, rho)
    L = chang_cooper_operator(grid.x, potential, inv_beta)
    M = (sp.identity(len(rho), format="csc") - dt * L).tocsc()
    lu = splu(M)
    for _ in range(n_steps):
        new = lu.solve(rho)
        # one refinement sweep keeps roundoff from drifting the total mass
        new += lu.solve(rho - M @ new)
        rho = new
    if check:
        if not np.all(np.isfinite(rho)):
            raise NegativeDensity("non-finite density")
        if np.any(rho < -1e-14 * np.max(np.abs(rho))):
            raise NegativeDensity(f"density went negative (min {rho.min():.3e})")
    return Grid1D(grid.x, np.maximum(rho, 0.0))


@dataclass
class OUSpec:
    A: np.ndarray
    b: np.ndarray
    inv_beta: float = 1.0
    mean0: np.ndarray | None = None
    cov0: np.ndarray | None = None

    def __post_init__(self):
        self.A = numcore.check_symmetric(np.atleast_2d(np.asarray(self.A, dtype=np.float64)))
        numcore.chol_logdet(self.A)
        D = self.A.shape[0]
        self.b = np.asarray(self.b, dtype=np.float64).reshape(D)
        self.mean0 = np.zeros(D) if self.mean0 is None else np.asarray(self.mean0, float).reshape(D)
        self.cov0 = np.eye(D) if self.cov0 is None else np.atleast_2d(np.asarray(self.cov0, float))


def ou_closed_form(spec: OUSpec, t: float):
    """Mean and covariance at time ``t`` of the OU process started from a Gaussian."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    D = spec.A.shape[0]
    E = numcore.sym_expm(spec.A, t)
    E2 = numcore.sym_expm(spec.A, 2.0 * t)
    mean = spec.b + E @ (spec.mean0 - spec.b)
    stat = spec.inv_beta * np.linalg.inv(spec.A)
    cov = E @ spec.cov0 @ E + stat @ (np.eye(D) - E2)
    return mean, numcore.symmetrize(cov)
