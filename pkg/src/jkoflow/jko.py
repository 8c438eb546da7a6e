"""JKO stepping with ICNN transport maps: training, sampling, density and inversion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import icnn, numcore
from .errors import MaxIterationsExceeded, NonFiniteLoss, StageOutOfRange
from .icnn import IcnnParams

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        self._L, self._logdet = numcore.chol_logdet(self.cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._L.T

    def logpdf(self, X):
        X = np.atleast_2d(X)
        z = np.linalg.solve(self._L, (X - self.mean).T).T
        return -0.5 * (np.sum(z * z, axis=1) + self.dim * LOG2PI + self._logdet)

    def to_spec(self):
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass
class MixtureMeasure:
    """Initial measure given by a :class:`~jkoflow.energy.GaussianMixture`."""
    mixture: object

    @property
    def dim(self):
        return self.mixture.dim

    def sample(self, n, rng):
        return self.mixture.sample(n, rng)

    def logpdf(self, X):
        return self.mixture.logpdf(X)

    def to_spec(self):
        spec = self.mixture.to_spec()
        spec["kind"] = "mixture"
        return spec


@dataclass
class EmpiricalMeasure:
    """Resamples a fixed set of points; has no density."""
    points: np.ndarray

    @property
    def dim(self):
        return self.points.shape[1]

    def sample(self, n, rng):
        return self.points[rng.integers(0, len(self.points), size=n)]

    def logpdf(self, X):
        raise NotImplementedError("empirical measure has no density")

    def to_spec(self):
        return {"kind": "empirical", "n": int(len(self.points))}


def measure_from_spec(spec: dict):
    from .energy import GaussianMixture
    if spec["kind"] == "gaussian":
        return GaussianMeasure(spec["mean"], spec["cov"])
    if spec["kind"] == "mixture":
        return MixtureMeasure(GaussianMixture(spec["weights"], spec["means"], spec["covs"],
                                              spec.get("inv_beta", 1.0)))
    raise ValueError(f"cannot rebuild initial measure of kind {spec['kind']!r}")


@dataclass
class JkoChain:
    initial: object
    maps: list[IcnnParams] = field(default_factory=list)
    h: float = 0.1
    inv_beta: float = 1.0
    config_hash: str = ""

    @property
    def dim(self):
        return self.initial.dim

    @property
    def n_steps(self):
        return len(self.maps)

    def extended(self, psi: IcnnParams) -> "JkoChain":
        return replace(self, maps=self.maps + [psi])

    def push(self, X, upto: int | None = None, start: int = 0):
        """Push a batch through maps ``start .. upto-1`` (positions only)."""
        upto = self.n_steps if upto is None else upto
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        for psi in self.maps[start:upto]:
            X = icnn.icnn_grad(psi, X)
        return X


@dataclass
class FlowSample:
    """Trajectories ``x_0 .. x_k`` of shape (k+1, N, D); ``logdens`` (k+1, N) when known."""
    trajectory: np.ndarray
    logdens: np.ndarray | None = None

    @property
    def stage(self):
        return self.trajectory.shape[0] - 1

    @property
    def terminal(self):
        return self.trajectory[-1]


@dataclass
class TrainConfig:
    iters: int = 500
    lr: float = 5e-3
    batch: int = 512
    width: int = 64
    layers: int = 2
    alpha: float = icnn.DEFAULT_ALPHA
    init: str = "auto"  # identity | warm | auto (identity for the first step, then warm)
    pool: int = 0  # 0: fresh batch from rho^0 every iteration; >0: resample a pushed pool
    pretrain_iters: int = 3000
    pretrain_lr: float = 1e-2
    pretrain_tol: float = 1e-2


def _check_stage(chain, k):
    if not 0 <= k <= chain.n_steps:
        raise StageOutOfRange(f"stage {k} outside 0..{chain.n_steps}")


def _init_params(chain: JkoChain, cfg: TrainConfig, rng, sample_batch):
    mode = cfg.init
    if mode == "auto":
        mode = "warm" if chain.maps else "identity"
    if mode == "warm":
        if not chain.maps:
            raise ValueError("warm start needs a previous map")
        return chain.maps[-1].copy(), "warm"
    p = icnn.random_params(chain.dim, [cfg.width] * cfg.layers, rng, alpha=cfg.alpha,
                           quad_scale=np.sqrt(max(1.0 - cfg.alpha, 0.0)))
    p = icnn.pretrain_identity(p, rng, sampler=sample_batch, batch=cfg.batch,
                               lr=cfg.pretrain_lr, max_iters=cfg.pretrain_iters,
                               tol=cfg.pretrain_tol * chain.dim)
    return p, "identity"


def jko_train_step(chain: JkoChain, potential, cfg: TrainConfig, rng, samples=None,
                   lr: float | None = None) -> tuple[JkoChain, dict]:
    """Train one JKO step and return the extended chain plus diagnostics.

    Training batches are pushed through the existing chain from fresh draws of
    the initial measure, unless ``samples`` (points already distributed as the
    current last marginal) is given, in which case batches are resampled from it.
    """
    lr = cfg.lr if lr is None else lr
    h, inv_beta = chain.h, chain.inv_beta
    if cfg.iters < 1:
        raise ValueError("iters must be >= 1")

    if samples is None and cfg.pool > 0:
        samples = chain.push(chain.initial.sample(cfg.pool, rng))

    def sample_batch(n):
        if samples is not None:
            return samples[rng.integers(0, len(samples), size=n)]
        return chain.push(chain.initial.sample(n, rng))

    params, mode = _init_params(chain, cfg, rng, sample_batch)
    X0 = sample_batch(cfg.batch)
    w2_init = np.mean(np.sum((icnn.icnn_grad(params, X0) - X0) ** 2, axis=1))
    if w2_init > 10.0 * chain.dim * h:
        log.warning("initial W2 term %.3g too large, re-pretraining identity", w2_init)
        params, mode = _init_params(chain, replace(cfg, init="identity"), rng, sample_batch)

    state = icnn.AdamState.for_params(params)
    history = []
    for it in range(cfg.iters):
        X = sample_batch(cfg.batch)
        try:
            loss, grad, terms = icnn.icnn_loss_grad(params, X, potential, h, inv_beta, rng)
        except NonFiniteLoss as exc:
            exc.iteration = it
            raise
        params, state = icnn.adam_step(params, grad, state, lr)
        history.append(loss)
    diag = dict(init=mode, final_loss=history[-1], loss_history=history, last_terms=terms)
    return chain.extended(params), diag


def free_energy_terms(chain: JkoChain, potential, X, k: int):
    """Held-out estimates for map ``k`` (1-based) applied to samples ``X`` of rho^(k-1)."""
    ev = icnn.icnn_eval(chain.maps[k - 1], X, want="hess")
    phi_before, _ = potential.value_grad(X)
    phi_after, _ = potential.value_grad(ev.grad)
    w2 = float(np.mean(np.sum((ev.grad - X) ** 2, axis=1)))
    return dict(w2=w2, u_before=float(np.mean(phi_before)), u_after=float(np.mean(phi_after)),
                entropy_change=float(np.mean(ev.logdet_hess)))


def check_energy_decrease(chain: JkoChain, potential, X, k: int, slack: float = 0.0) -> bool:
    """Soft check that ``F(rho_k) + W2^2 / 2h <= F(rho_{k-1}) + slack``; logs a warning otherwise."""
    t = free_energy_terms(chain, potential, X, k)
    lhs = t["u_after"] - chain.inv_beta * t["entropy_change"] + t["w2"] / (2.0 * chain.h)
    rhs = t["u_before"] + slack
    ok = lhs <= rhs
    if not ok:
        log.warning("JKO step %d: energy rose by %.3g beyond slack %.3g", k, lhs - rhs + slack, slack)
    return ok


def push_sample(chain: JkoChain, z, upto: int | None = None) -> FlowSample:
    """Trajectory of ``z`` (a point or batch) through the first ``upto`` maps."""
    upto = chain.n_steps if upto is None else upto
    _check_stage(chain, upto)
    z = np.asarray(z, dtype=np.float64)
    X = np.atleast_2d(z) if z.ndim > 0 else z.reshape(1, 1)
    traj = [X]
    for psi in chain.maps[:upto]:
        X = icnn.icnn_grad(psi, X)
        traj.append(X)
    return FlowSample(np.stack(traj))


def sample_with_density(chain: JkoChain, rng, upto: int | None = None, n: int = 1,
                        x0=None) -> FlowSample:
    """Draw ``x_0 ~ rho^0`` and push forward, tracking the change-of-variables log density."""
    upto = chain.n_steps if upto is None else upto
    _check_stage(chain, upto)
    X = chain.initial.sample(n, rng) if x0 is None else np.atleast_2d(x0)
    logp = chain.initial.logpdf(X)
    traj, dens = [X], [logp]
    for psi in chain.maps[:upto]:
        ev = icnn.icnn_eval(psi, X, want="hess")
        logp = logp - ev.logdet_hess
        X = ev.grad
        traj.append(X)
        dens.append(logp)
    return FlowSample(np.stack(traj), np.stack(dens))


def invert_grad(psi: IcnnParams, y, x0=None, tol: float = 1e-9, max_iter: int = 200):
    """Solve ``grad psi(x) = y`` by damped Newton on ``psi(x) - <y, x>``.

    Works on a single point or a batch (N, D); every point must reach
    ``|grad psi(x) - y| <= tol * (1 + |y|)``.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    X = Y.copy() if x0 is None else np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    thresh = tol * (1.0 + np.linalg.norm(Y, axis=1))
    active = np.arange(len(Y))
    for _ in range(max_iter):
        ev = icnn.icnn_eval(psi, X[active], want="hess")
        r = ev.grad - Y[active]
        rn = np.linalg.norm(r, axis=1)
        done = rn <= thresh[active]
        if np.all(done):
            active = active[:0]
            break
        keep = ~done
        active, r, rn = active[keep], r[keep], rn[keep]
        Xa, Ya = X[active], Y[active]
        f0 = ev.value[keep] - np.sum(Ya * Xa, axis=1)
        step = -numcore.chol_solve(ev.chol[keep], r[:, :, None])[:, :, 0]
        slope = np.sum(r * step, axis=1)
        t = np.ones(len(active))
        pending = np.ones(len(active), dtype=bool)
        for _ in range(40):
            Xt = Xa[pending] + t[pending, None] * step[pending]
            ft = icnn.icnn_eval(psi, Xt, want="value").value - np.sum(Ya[pending] * Xt, axis=1)
            ok = ft <= f0[pending] + 1e-4 * t[pending] * slope[pending] + 1e-12 * np.abs(f0[pending])
            idx = np.flatnonzero(pending)
            pending[idx[ok]] = False
            if not pending.any():
                break
            t[idx[~ok]] *= 0.5
        X[active] = Xa + t[:, None] * step
    if len(active):
        raise MaxIterationsExceeded(f"{len(active)} point(s) did not converge in {max_iter} Newton steps")
    return X[0] if single else X


def trace_back(chain: JkoChain, x_k, k: int, tol: float = 1e-9):
    """Pre-images ``x_0, .., x_k`` and the summed Hessian log-dets along the way."""
    _check_stage(chain, k)
    X = np.atleast_2d(np.asarray(x_k, dtype=np.float64))
    traj = [X]
    logdet = np.zeros(len(X))
    for psi in reversed(chain.maps[:k]):
        X = invert_grad(psi, X, tol=tol)
        logdet += icnn.icnn_eval(psi, X, want="hess").logdet_hess
        traj.append(X)
    return traj[::-1], logdet


def density_at(chain: JkoChain, x_k, k: int | None = None):
    """Log density of rho^(k) at arbitrary points, by inverting the chain back to rho^0."""
    k = chain.n_steps if k is None else k
    x_k = np.asarray(x_k, dtype=np.float64)
    traj, logdet = trace_back(chain, x_k, k)
    out = chain.initial.logpdf(traj[0]) - logdet
    return float(out[0]) if x_k.ndim == 1 else out
