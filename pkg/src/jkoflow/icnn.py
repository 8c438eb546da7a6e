"""Dense input-convex network with exact input derivatives.

The network is

    u_1 = A_1 x + b_1
    u_l = W_{l-1} z_{l-1} + A_l x + b_l,   z_l = softplus(u_l)
    psi(x) = alpha/2 |x|^2 + 1/2 |B x|^2 + w_out . z_L

with ``W_l >= 0`` and ``w_out >= 0`` entrywise. The trainable quadratic skip
``B`` keeps the Hessian away from ``alpha I`` outside the data. The input
Hessian has the closed form
``alpha I + B^T B + sum_l M_l^T diag(softplus''(u_l) * beta_l) M_l`` where
``M_l = du_l/dx`` and ``beta_l = dpsi/dz_l >= 0``, so it is always at least
``alpha I``. Everything here operates on a batch ``x`` of shape ``(N, D)``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .errors import NonFiniteLoss, PretrainDiverged

DEFAULT_ALPHA = 0.01


@dataclass
class IcnnParams:
    A: list[np.ndarray]  # input injections, A[l] has shape (w_l, D)
    b: list[np.ndarray]
    W: list[np.ndarray]  # hidden-to-hidden, W[l] has shape (w_{l+1}, w_l), nonnegative
    w_out: np.ndarray
    B: np.ndarray  # quadratic skip, shape (D, D)
    alpha: float = DEFAULT_ALPHA

    @property
    def dim(self) -> int:
        return self.A[0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [a.shape[0] for a in self.A]

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors in canonical order (``alpha`` is a fixed hyperparameter)."""
        out = {"B": self.B}
        for i, (a, bb) in enumerate(zip(self.A, self.b)):
            out[f"A{i}"] = a
            out[f"b{i}"] = bb
        for i, w in enumerate(self.W):
            out[f"W{i}"] = w
        out["w_out"] = self.w_out
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], alpha: float) -> "IcnnParams":
        n = sum(1 for k in tensors if k.startswith("A"))
        return cls(A=[tensors[f"A{i}"] for i in range(n)],
                   b=[tensors[f"b{i}"] for i in range(n)],
                   W=[tensors[f"W{i}"] for i in range(n - 1)],
                   w_out=tensors["w_out"], B=tensors["B"], alpha=float(alpha))

    def copy(self) -> "IcnnParams":
        return copy.deepcopy(self)

    def zeros_like(self) -> "IcnnParams":
        return IcnnParams.from_tensors({k: np.zeros_like(v) for k, v in self.tensors().items()},
                                       self.alpha)

    def check(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if any(np.any(w < 0) for w in self.W) or np.any(self.w_out < 0):
            raise ValueError("hidden and output weights must be nonnegative")


def zero_params(dim: int, widths=(8, 8), alpha: float = 1.0) -> IcnnParams:
    """All-zero weights: ``psi(x) = alpha/2 |x|^2`` (plus a constant)."""
    widths = list(widths)
    return IcnnParams(
        A=[np.zeros((w, dim)) for w in widths],
        b=[np.zeros(w) for w in widths],
        W=[np.zeros((widths[i + 1], widths[i])) for i in range(len(widths) - 1)],
        w_out=np.zeros(widths[-1]),
        B=np.zeros((dim, dim)),
        alpha=alpha,
    )


def random_params(dim: int, widths, rng: np.random.Generator,
                  alpha: float = DEFAULT_ALPHA, quad_scale: float = 0.0) -> IcnnParams:
    """Raw initialization; ``quad_scale`` sets ``B = quad_scale * I``."""
    widths = list(widths)
    A = [rng.normal(0.0, np.sqrt(1.0 / dim), size=(w, dim)) for w in widths]
    W = [np.abs(rng.normal(0.0, np.sqrt(1.0 / widths[i]), size=(widths[i + 1], widths[i])))
         for i in range(len(widths) - 1)]
    w_out = np.abs(rng.normal(0.0, np.sqrt(1.0 / widths[-1]), size=widths[-1]))
    return IcnnParams(A=A, b=[np.zeros(w) for w in widths], W=W, w_out=w_out,
                      B=quad_scale * np.eye(dim), alpha=alpha)


def project_nonneg(params: IcnnParams) -> IcnnParams:
    """Clamp hidden-to-hidden and output weights to be nonnegative."""
    p = params.copy()
    p.W = [np.maximum(w, 0.0) for w in p.W]
    p.w_out = np.maximum(p.w_out, 0.0)
    return p


@dataclass
class IcnnEval:
    """Batched evaluation of psi and its input derivatives.

    ``value`` has shape (N,), ``grad`` (N, D), ``hess`` (N, D, D). Layer
    caches are kept for the parameter backward pass.
    """
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray | None = None
    logdet_hess: np.ndarray | None = None
    chol: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)


def _forward(params: IcnnParams, x):
    L = len(params.A)
    us, zs, ss, cs = [], [], [], []
    z = None
    for l in range(L):
        u = x @ params.A[l].T + params.b[l]
        if l > 0:
            u = u + z @ params.W[l - 1].T
        z = numcore.softplus_d(u, 0)
        s = numcore.sigmoid(u)
        us.append(u)
        zs.append(z)
        ss.append(s)
        cs.append(s * (1.0 - s))
    # back-accumulated output sensitivities beta_l = dpsi/dz_l, g_l = dpsi/du_l
    betas = [None] * L
    gs = [None] * L
    betas[-1] = np.broadcast_to(params.w_out, ss[-1].shape)
    gs[-1] = ss[-1] * params.w_out
    for l in range(L - 2, -1, -1):
        betas[l] = gs[l + 1] @ params.W[l]
        gs[l] = ss[l] * betas[l]
    return us, zs, ss, cs, betas, gs


def _input_jacobians(params: IcnnParams, ss, N):
    """``M_l = du_l/dx`` for every layer, stored as (D, N, w_l): ``M_l[i] = du_l/dx_i``."""
    D = params.dim
    Ms = [params.A[0].T[:, None, :]]
    for l in range(1, len(params.A)):
        SM = np.broadcast_to(ss[l - 1][None] * Ms[l - 1], (D, N, ss[l - 1].shape[1]))
        M = SM.reshape(D * N, -1) @ params.W[l - 1].T
        Ms.append(M.reshape(D, N, -1) + params.A[l].T[:, None, :])
    return Ms


def _quad_form(M, r, D):
    """``sum_w M[i, n, w] r[n, w] M[j, n, w]`` as an (N, D, D) array."""
    RM = M * r[None]
    N = r.shape[0]
    H = np.empty((N, D, D))
    for i in range(D):
        for j in range(i + 1):
            H[:, i, j] = H[:, j, i] = np.sum(RM[i] * M[j], axis=-1)
    return H


def icnn_eval(params: IcnnParams, x, want: str = "hess") -> IcnnEval:
    """Evaluate psi at a batch of points.

    ``want`` is one of ``"value"``, ``"grad"`` or ``"hess"``; ``"hess"`` also
    returns the Cholesky factor and log-determinant of the Hessian.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    N, D = x.shape
    us, zs, ss, cs, betas, gs = _forward(params, x)
    Bx = x @ params.B.T
    value = 0.5 * params.alpha * np.sum(x * x, axis=1) + 0.5 * np.sum(Bx * Bx, axis=1) \
        + zs[-1] @ params.w_out
    grad = params.alpha * x + Bx @ params.B
    for l in range(len(params.A)):
        grad = grad + gs[l] @ params.A[l]
    out = IcnnEval(value=value, grad=grad,
                   cache=dict(x=x, us=us, zs=zs, ss=ss, cs=cs, betas=betas, gs=gs))
    if want == "hess":
        Ms = _input_jacobians(params, ss, N)
        H = np.empty((N, D, D))
        H[:] = params.alpha * np.eye(D) + params.B.T @ params.B
        rs = []
        for l, M in enumerate(Ms):
            r = cs[l] * betas[l]
            rs.append(r)
            H += _quad_form(M, r, D)
        L_, logdet = numcore.chol_logdet(H)
        out.hess, out.logdet_hess, out.chol = H, logdet, L_
        out.cache.update(Ms=Ms, rs=rs)
    elif want not in ("value", "grad"):
        raise ValueError(f"unknown want={want!r}")
    return out


def icnn_grad(params: IcnnParams, x):
    """Just ``grad psi`` (the transport map) at a batch of points."""
    return icnn_eval(params, x, want="grad").grad


def _backward(params: IcnnParams, ev: IcnnEval, G, P) -> IcnnParams:
    """Parameter gradient given upstream ``G = dL/dgrad`` (N, D) and ``P = dL/dH`` (N, D, D).

    ``P`` must be symmetric; pass ``None`` to ignore the Hessian branch.
    """
    c = ev.cache
    x, us, zs, ss, cs, betas, gs = (c[k] for k in ("x", "us", "zs", "ss", "cs", "betas", "gs"))
    L = len(params.A)
    N = x.shape[0]
    dA = [np.zeros_like(a) for a in params.A]
    db = [np.zeros_like(bb) for bb in params.b]
    dW = [np.zeros_like(w) for w in params.W]
    dw_out = np.zeros_like(params.w_out)
    ds = [np.zeros_like(s) for s in ss]
    dc = [np.zeros_like(s) for s in ss]
    dbeta = [np.zeros_like(s) for s in ss]
    dg = [G @ params.A[l].T for l in range(L)]
    for l in range(L):
        dA[l] += gs[l].T @ G

    if P is not None:
        Ms, rs = c["Ms"], c["rs"]
        D = x.shape[1]
        dM = [None] * L
        for l in range(L):
            M = np.broadcast_to(Ms[l], (D, N, Ms[l].shape[2]))
            MP = [sum(M[i] * P[:, i, j, None] for i in range(D)) for j in range(D)]
            dr = sum(MP[j] * M[j] for j in range(D))
            dM[l] = 2.0 * rs[l][None] * np.stack(MP)
            dc[l] += dr * betas[l]
            dbeta[l] += dr * cs[l]
        for l in range(L - 1, 0, -1):
            # M_l = W_{l-1} diag(s_{l-1}) M_{l-1} + A_l
            wl, wp = dM[l].shape[2], ss[l - 1].shape[1]
            dA[l] += dM[l].sum(axis=1).T
            flat = dM[l].reshape(D * N, wl)
            SM = (ss[l - 1][None] * Ms[l - 1]).reshape(D * N, wp)
            dW[l - 1] += flat.T @ SM
            Q = (flat @ params.W[l - 1]).reshape(D, N, wp)
            ds[l - 1] += np.sum(Q * Ms[l - 1], axis=0)
            dM[l - 1] = dM[l - 1] + ss[l - 1][None] * Q
        dA[0] += dM[0].sum(axis=1).T

    for l in range(L):
        # g_l = s_l * beta_l
        ds[l] += dg[l] * betas[l]
        dbeta[l] += dg[l] * ss[l]
        if l < L - 1:
            # beta_l = g_{l+1} @ W_l
            dW[l] += gs[l + 1].T @ dbeta[l]
            dg[l + 1] += dbeta[l] @ params.W[l].T
        else:
            dw_out += np.sum(dbeta[l], axis=0)

    dz = None
    for l in range(L - 1, -1, -1):
        s = ss[l]
        third = cs[l] * (1.0 - 2.0 * s)
        du = ds[l] * cs[l] + dc[l] * third
        if dz is not None:
            du = du + dz * s
        dA[l] += du.T @ x
        db[l] += du.sum(axis=0)
        if l > 0:
            dW[l - 1] += du.T @ zs[l - 1]
            dz = du @ params.W[l - 1]
    # quadratic skip: grad += B^T B x, H += B^T B
    dB = params.B @ (x.T @ G + G.T @ x)
    if P is not None:
        dB += 2.0 * params.B @ P.sum(axis=0)
    return IcnnParams(A=dA, b=db, W=dW, w_out=dw_out, B=dB, alpha=params.alpha)


def icnn_loss_grad(params: IcnnParams, X, potential, h: float, inv_beta: float,
                   rng: np.random.Generator | None = None, with_grad: bool = True):
    """JKO objective on a batch and its exact parameter gradient.

    loss = |grad psi(x) - x|^2 / (2h) + Phi(grad psi(x)) - inv_beta * logdet hess psi(x),
    each averaged over the batch. Returns ``(loss, grad_theta, terms)`` where
    ``terms`` holds the three averaged components.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    need_hess = inv_beta != 0.0
    ev = icnn_eval(params, X, want="hess" if need_hess else "grad")
    Y = ev.grad
    diff = Y - X
    w2 = np.mean(np.sum(diff * diff, axis=1))
    phi, dphi = potential.value_grad(Y, rng)
    u = np.mean(phi)
    dE = float(np.mean(ev.logdet_hess)) if need_hess else 0.0
    loss = w2 / (2.0 * h) + u - inv_beta * dE
    terms = dict(w2=float(w2), potential=float(u), entropy_change=dE)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss}", terms=terms)
    if not with_grad:
        return float(loss), None, terms
    G = (diff / h + dphi) / N
    P = None
    if need_hess:
        D = X.shape[1]
        eye = np.broadcast_to(np.eye(D), (N, D, D))
        Hinv = numcore.chol_solve(ev.chol, eye)
        P = -(inv_beta / N) * numcore.symmetrize(Hinv)
    return float(loss), _backward(params, ev, G, P), terms


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: IcnnParams) -> "AdamState":
        z = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        return cls(m=z, v={k: np.zeros_like(a) for k, a in z.items()}, t=0)


def adam_step(params: IcnnParams, grad: IcnnParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update followed by the nonnegativity projection. Returns ``(params, state)``."""
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    gt = grad.tensors()
    new, m, v = {}, {}, {}
    for k, p in params.tensors().items():
        g = gt[k]
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new[k] = p - lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps)
    out = IcnnParams.from_tensors(new, params.alpha)
    return project_nonneg(out), AdamState(m=m, v=v, t=t)


def pretrain_identity(params: IcnnParams, rng: np.random.Generator, sampler=None,
                      batch: int = 1024, lr: float = 1e-2, max_iters: int = 3000,
                      tol: float = 1e-2, scale: float = 2.0) -> IcnnParams:
    """Fit ``grad psi(x) ~ x`` by Adam on squared error.

    Points come from ``sampler(n)`` if given, else ``N(0, scale^2 I)``.
    Raises :class:`PretrainDiverged` if the held-out error is still above
    ``tol`` after ``max_iters`` steps.
    """
    D = params.dim
    if sampler is None:
        def sampler(n):
            return scale * rng.standard_normal((n, D))
    state = AdamState.for_params(params)
    err = np.inf
    for it in range(1, max_iters + 1):
        X = sampler(batch)
        ev = icnn_eval(params, X, want="grad")
        G = 2.0 * (ev.grad - X) / batch
        params, state = adam_step(params, _backward(params, ev, G, None), state, lr)
        if it % 100 == 0:
            Xt = sampler(batch)
            err = np.mean(np.sum((icnn_grad(params, Xt) - Xt) ** 2, axis=1))
            if err < tol:
                return params
    raise PretrainDiverged(f"identity pretraining stalled at error {err:.3e}")


def icnn_init(dim: int, width, rng: np.random.Generator, mode: str = "identity",
              params: IcnnParams | None = None, alpha: float = DEFAULT_ALPHA,
              layers: int = 2, **pretrain_kw) -> IcnnParams:
    """Fresh parameters, either identity-pretrained or cloned from ``params``.

    ``width`` is an int (same width for every hidden layer) or a sequence.
    """
    if mode == "warm":
        if params is None:
            raise ValueError("warm-start requires params")
        return params.copy()
    if mode != "identity":
        raise ValueError(f"unknown init mode {mode!r}")
    widths = [width] * layers if np.isscalar(width) else list(width)
    p = random_params(dim, widths, rng, alpha=alpha, quad_scale=np.sqrt(max(1.0 - alpha, 0.0)))
    return pretrain_identity(p, rng, **pretrain_kw)
