"""Metropolis-Hastings with pushforward proposals and sequential nonlinear filtering.

Between observations the diffusion is modelled by a JKO chain ``B_i`` trained
on posterior samples from the previous observation time. Proposals for the
posterior at ``t_k`` are ``x_0 ~ p_0`` pushed through ``B_1 .. B_k``; with
these state-independent proposals every Jacobian term cancels from the
acceptance ratio, leaving the ratio of observation likelihoods.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import icnn, jko
from .errors import DegenerateAcceptance
from .jko import EmpiricalMeasure, JkoChain, TrainConfig

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


@dataclass
class FilterState:
    """Observation record plus one trained chain per elapsed interval.

    ``intervals[i]`` maps the law at ``times[i]`` to the law at
    ``times[i + 1]`` (``times[0]`` is the start time). ``observations[i]`` is
    the value observed at ``times[i + 1]``, or ``None`` when no observation
    closes that interval.
    """
    initial: object
    sigma: float
    times: list = field(default_factory=lambda: [0.0])
    observations: list = field(default_factory=list)
    intervals: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.intervals)

    def with_interval(self, chain: JkoChain, t_end: float, obs) -> "FilterState":
        return FilterState(self.initial, self.sigma, self.times + [t_end],
                           self.observations + [None if obs is None else np.atleast_1d(obs)],
                           self.intervals + [chain])


@dataclass
class MhChainConfig:
    burn_in: int = 1000
    thinning: int = 2
    n_chains: int = 1024
    draws_per_chain: int = 1
    min_acceptance: float = 1e-3

    def __post_init__(self):
        if self.burn_in < 0 or self.thinning < 1 or self.n_chains < 1 or self.draws_per_chain < 1:
            raise ValueError("invalid MH configuration")


def obs_loglik(state: FilterState, trajectory, k: int | None = None):
    """``sum_i log N(Y_i; x_i, sigma^2)`` over observed interval ends ``i <= k``.

    ``trajectory[i]`` holds the (N, D) positions at ``times[i]``.
    """
    k = state.k if k is None else k
    total = np.zeros(len(trajectory[0]))
    s2 = state.sigma ** 2
    for i in range(1, k + 1):
        y = state.observations[i - 1]
        if y is None:
            continue
        d = trajectory[i] - y
        total += -0.5 * np.sum(d * d, axis=1) / s2 - 0.5 * d.shape[1] * (LOG2PI + np.log(s2))
    return total


def propose(state: FilterState, n: int, rng, k: int | None = None):
    """Draw ``x_0 ~ p_0`` and push through ``B_1 .. B_k``; returns positions at each ``times[i]``."""
    k = state.k if k is None else k
    X = state.initial.sample(n, rng)
    traj = [X]
    for chain in state.intervals[:k]:
        X = chain.push(X)
        traj.append(X)
    return traj


def filter_acceptance_ratio(state: FilterState, proposal, current, k: int | None = None):
    """Acceptance ratio for moving from ``current`` to ``proposal`` trajectories.

    Only observation likelihoods enter; no determinant or prior term is evaluated.
    """
    return np.exp(obs_loglik(state, proposal, k) - obs_loglik(state, current, k))


@dataclass
class MhResult:
    terminal: np.ndarray  # (n_chains * draws, D)
    trajectories: list  # per interval end, (n_chains * draws, D)
    acceptance_rate: float


def mh_sample(state: FilterState, config: MhChainConfig, rng, k: int | None = None) -> MhResult:
    """Independence Metropolis-Hastings over ``config.n_chains`` parallel chains.

    Each chain discards ``burn_in`` states, then keeps every ``thinning``-th
    state until ``draws_per_chain`` are collected.
    """
    k = state.k if k is None else k
    n = config.n_chains
    cur = propose(state, n, rng, k)
    cur_ll = obs_loglik(state, cur, k)
    has_obs = any(y is not None for y in state.observations[:k])
    kept = []
    accepted = 0
    total_steps = config.burn_in + config.thinning * config.draws_per_chain
    window = max(1, min(200, config.burn_in or 200))
    win_acc = 0
    for step in range(1, total_steps + 1):
        if has_obs:
            prop = propose(state, n, rng, k)
            prop_ll = obs_loglik(state, prop, k)
            accept = np.log(rng.uniform(size=n)) < prop_ll - cur_ll
            cur = [np.where(accept[:, None], p, c) for p, c in zip(prop, cur)]
            cur_ll = np.where(accept, prop_ll, cur_ll)
        else:
            # target equals proposal: every move is accepted
            cur = propose(state, n, rng, k)
            accept = np.ones(n, dtype=bool)
        accepted += int(accept.sum())
        win_acc += int(accept.sum())
        if step % window == 0:
            if win_acc / (window * n) < config.min_acceptance:
                raise DegenerateAcceptance(
                    f"acceptance rate {win_acc / (window * n):.2e} below {config.min_acceptance:g}")
            win_acc = 0
        if step > config.burn_in and (step - config.burn_in) % config.thinning == 0:
            kept.append([c.copy() for c in cur])
    trajs = [np.concatenate([kk[i] for kk in kept]) for i in range(k + 1)]
    return MhResult(trajs[-1], trajs, accepted / (n * total_steps))


def predictive_logdensity(state: FilterState, x_k, k: int | None = None, tol: float = 1e-9):
    """Unnormalized log density of the filtering law at ``times[k]`` given observations up to it.

    Traces ``x_k`` back through every interval chain by convex inversion and
    combines observation likelihoods, Hessian log-determinants and ``log p_0``.
    """
    k = state.k if k is None else k
    X = np.atleast_2d(np.asarray(x_k, dtype=np.float64))
    traj = [X]
    logdet = np.zeros(len(X))
    for chain in reversed(state.intervals[:k]):
        pts, ld = jko.trace_back(chain, X, chain.n_steps, tol)
        X = pts[0]
        logdet += ld
        traj.append(X)
    traj = traj[::-1]
    return state.initial.logpdf(traj[0]) + obs_loglik(state, traj, k) - logdet


def full_log_ratio(state: FilterState, proposal, current, k: int | None = None):
    """Reference acceptance log-ratio built from full target and proposal densities.

    ``log pi(y) + log q(x) - log pi(x) - log q(y)`` with ``q`` the pushforward
    density (forward change of variables) and ``pi`` from
    :func:`predictive_logdensity`. Used to verify the cancellation.
    """
    def log_q(traj):
        logp = state.initial.logpdf(traj[0])
        for i, chain in enumerate(state.intervals[:k]):
            X = traj[i]
            for psi in chain.maps:
                ev = icnn.icnn_eval(psi, X, want="hess")
                logp = logp - ev.logdet_hess
                X = ev.grad
        return logp

    k = state.k if k is None else k
    # tight inversion so tracing error stays well below the comparison tolerance
    return (predictive_logdensity(state, proposal[k], k, 1e-13) + log_q(current)
            - predictive_logdensity(state, current[k], k, 1e-13) - log_q(proposal))


@dataclass
class FilterConfig:
    h: float = 0.1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iters=700, batch=1024, width=64))
    mh: MhChainConfig = field(default_factory=lambda: MhChainConfig(draws_per_chain=8))
    pool: int = 8192


def run_filter(potential, initial, obs_times, observations, sigma: float, t_final: float,
               config: FilterConfig, rng, inv_beta: float = 1.0, callback=None):
    """Sequential filtering up to ``t_final``; returns the final :class:`FilterState`.

    Each interval ``[t_{k-1}, t_k]`` gets ``round((t_k - t_{k-1}) / h)`` JKO
    steps trained on the current posterior samples; posterior samples at an
    observation time come from :func:`mh_sample`.
    """
    state = FilterState(initial, sigma, [0.0])
    samples = initial.sample(config.pool, rng)
    ends = list(obs_times) + ([t_final] if t_final > (obs_times[-1] if len(obs_times) else 0.0) else [])
    obs = list(observations) + [None] * (len(ends) - len(obs_times))
    t_prev = 0.0
    for t_end, y in zip(ends, obs):
        n_steps = max(1, int(round((t_end - t_prev) / config.h)))
        chain = JkoChain(EmpiricalMeasure(samples), h=(t_end - t_prev) / n_steps, inv_beta=inv_beta)
        pool = samples
        for _ in range(n_steps):
            chain, diag = jko.jko_train_step(chain, potential, config.train, rng, samples=pool)
            pool = icnn.icnn_grad(chain.maps[-1], pool)
        state = state.with_interval(chain, t_end, y)
        if y is not None:
            res = mh_sample(state, config.mh, rng)
            samples = res.terminal
            log.info("t=%.2f acceptance %.3f", t_end, res.acceptance_rate)
        else:
            samples = pool
        if callback is not None:
            callback(state, samples)
        t_prev = t_end
    return state


def predictive_on_grid(state: FilterState, x_grid):
    """Predictive density at the last time, normalized by quadrature on a 1-D grid."""
    x_grid = np.asarray(x_grid, dtype=np.float64)
    lp = predictive_logdensity(state, x_grid[:, None])
    dx = x_grid[1] - x_grid[0]
    m = lp.max()
    return lp - m - np.log(np.sum(np.exp(lp - m)) * dx)


def simulate_observations(potential, initial, obs_times, sigma: float, rng, dt: float = 1e-3,
                          inv_beta: float = 1.0):
    """One Euler-Maruyama path of the true diffusion, observed with N(0, sigma^2) noise."""
    from .baselines import ParticleEnsemble, em_simulate
    ens = ParticleEnsemble(initial.sample(1, rng))
    truth, ys = [], []
    for t in obs_times:
        ens = em_simulate(potential, ens, dt, t, rng, inv_beta)
        truth.append(ens.positions[0].copy())
        ys.append(ens.positions[0] + sigma * rng.standard_normal(ens.positions.shape[1]))
    return np.array(truth), np.array(ys)


def grid_filter(potential, grid, obs_times, observations, sigma: float, t_final: float,
                inv_beta: float = 1.0, dt: float = 1e-3):
    """Ground-truth filtering density on a 1-D grid via Chang-Cooper propagation."""
    from .baselines import Grid1D, chang_cooper_evolve
    g = grid
    t = 0.0
    for t_obs, y in zip(obs_times, observations):
        g = chang_cooper_evolve(g, potential, inv_beta, dt, t_obs - t)
        lik = np.exp(-0.5 * (g.x - float(np.atleast_1d(y)[0])) ** 2 / sigma ** 2)
        g = Grid1D(g.x, g.rho * lik).normalized()
        t = t_obs
    if t_final > t:
        g = chang_cooper_evolve(g, potential, inv_beta, dt, t_final - t)
    return g
