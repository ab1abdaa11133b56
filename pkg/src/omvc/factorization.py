"""Per-chunk alternating minimization of the weighted joint NMF objective.

Orientation: a chunk of view ``v`` is ``X`` with shape ``(s, D_v)`` (one row per
instance), the basis ``U`` is ``(D_v, K)`` and latent factors ``V`` are
``(s, K)``, so the model is ``X ~ V @ U.T``. Instance weights ``w`` enter every
term squared (``w**2`` is the diagonal of ``W.T @ W``).

The three blocks are:

* basis ``U``: minimize ``tr(U A U^T) - 2 <U, B> + c`` where ``A``, ``B``, ``c``
  summarize every chunk seen so far (the current chunk included);
* latent ``V``: minimize the chunk objective with ``U`` and the consensus fixed;
* consensus ``V*``: closed-form weighted average of the per-view latents.

``U`` and ``V`` are updated by projected Newton steps whose step length is
chosen by an Armijo rule along the projection arc.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .dataset import ChunkBatch, RunningViewStats


_NEGLIGIBLE = 1e-14


class NumericalError(RuntimeError):
    """Non-finite objective or factor encountered while processing a chunk."""


@dataclass
class SolverConfig:
    n_components: int
    alpha: float | Sequence[float] = 1e-2
    beta: float | Sequence[float] = 1e-7
    sigma: float = 0.01
    step_decay: float = 0.1
    max_outer: int = 50
    max_inner: int = 10
    newton_steps: int = 5
    tol_outer: float = 1e-4
    tol_inner: float = 1e-6
    hessian_ridge: float = 1e-8
    checked: bool = False

    def __post_init__(self):
        if int(self.n_components) < 1:
            raise ValueError("n_components must be >= 1")
        if not (0.0 < self.sigma < 1.0):
            raise ValueError("sigma must lie in (0, 1)")
        if not (0.0 < self.step_decay < 1.0):
            raise ValueError("step_decay must lie in (0, 1)")
        if np.any(np.asarray(self.alpha, dtype=float) <= 0):
            raise ValueError("every alpha must be > 0")
        if np.any(np.asarray(self.beta, dtype=float) < 0):
            raise ValueError("every beta must be >= 0")
        for name in ("max_outer", "max_inner", "newton_steps"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tol_outer < 0 or self.tol_inner < 0 or self.hessian_ridge < 0:
            raise ValueError("tolerances and hessian_ridge must be >= 0")

    def alphas(self, n_views: int) -> np.ndarray:
        return _per_view(self.alpha, n_views, "alpha")

    def betas(self, n_views: int) -> np.ndarray:
        return _per_view(self.beta, n_views, "beta")


def _per_view(value, n_views, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n_views, float(arr))
    if arr.shape != (n_views,):
        raise ValueError(f"{name} has {arr.size} entries for {n_views} views")
    return arr


@dataclass
class FactorState:
    """Everything that survives from one chunk to the next."""

    U: list
    A: list
    B: list
    C: list
    stats: RunningViewStats
    pass_index: int = 1
    last_chunk: tuple = (0, 0)

    @classmethod
    def empty(cls, dims: Sequence[int], n_components: int) -> "FactorState":
        k = int(n_components)
        return cls(
            U=[None] * len(dims),
            A=[np.zeros((k, k)) for _ in dims],
            B=[np.zeros((d, k)) for d in dims],
            C=[0.0 for _ in dims],
            stats=RunningViewStats.empty(dims),
        )

    @property
    def initialized(self) -> bool:
        return all(u is not None for u in self.U)

    @property
    def n_views(self) -> int:
        return len(self.A)


@dataclass
class ChunkFactors:
    V: list
    Vstar: np.ndarray
    weights: np.ndarray
    objective: list = field(default_factory=list)
    sweeps: int = 0
    exhausted: int = 0
    loss: float = float("nan")


# --------------------------------------------------------------------------- basis block


def basis_objective(U, A, B, c=0.0) -> float:
    return float(np.sum((U @ A) * U) - 2.0 * np.sum(U * B) + c)


def basis_gradient(U, A, B) -> np.ndarray:
    return 2.0 * (U @ A) - 2.0 * B


def basis_hessian(A) -> np.ndarray:
    """Hessian of the basis objective for each row of ``U`` (shared by all rows)."""
    return 2.0 * np.asarray(A)


def update_basis(U, A, B, config: SolverConfig, c=0.0, monitor=None, view=None):
    """Projected Newton steps on ``U``; returns ``(U_new, n_exhausted_rows)``."""
    k = A.shape[0]
    ridge = config.hessian_ridge * np.trace(A) / k
    hess = basis_hessian(A)
    precond = 2.0 * (A + max(ridge, np.finfo(float).tiny) * np.eye(k))
    return _projected_newton(
        U,
        lambda u: basis_gradient(u, A, B),
        lambda u: basis_objective(u, A, B, c),
        hess, precond, None, config, monitor, ("basis", view), dict(A=A, B=B, c=c),
    )


# --------------------------------------------------------------------------- latent block


def latent_objective(X, w, U, V, Vstar, alpha, beta, XU=None, UtU=None, sq_norms=None) -> float:
    """Weighted reconstruction + disagreement + l1 for one view of one chunk."""
    wt = w * w
    return float(
        np.dot(wt, _recon_rows(X, U, V, XU, UtU, sq_norms))
        + alpha * np.dot(wt, np.einsum("ij,ij->i", V - Vstar, V - Vstar))
        + beta * V.sum()
    )


def latent_objective_direct(X, w, U, V, Vstar, alpha, beta) -> float:
    """Same value as :func:`latent_objective`, from the explicit residual matrix."""
    R = (X - V @ U.T) * w[:, None]
    return float(np.sum(R * R) + alpha * np.sum(((V - Vstar) * w[:, None]) ** 2) + beta * np.abs(V).sum())


def _recon_rows(X, U, V, XU=None, UtU=None, sq_norms=None):
    XU = X @ U if XU is None else XU
    UtU = U.T @ U if UtU is None else UtU
    sq = np.einsum("ij,ij->i", X, X) if sq_norms is None else sq_norms
    return sq - 2.0 * np.einsum("ij,ij->i", XU, V) + np.einsum("ij,ij->i", V @ UtU, V)


def latent_gradient(X, w, U, V, Vstar, alpha, beta, XU=None, UtU=None) -> np.ndarray:
    wt = (w * w)[:, None]
    XU = X @ U if XU is None else XU
    UtU = U.T @ U if UtU is None else UtU
    return 2.0 * wt * (V @ UtU - XU) + 2.0 * alpha * wt * (V - Vstar) + beta


def latent_row_hessian(w_row: float, U, alpha) -> np.ndarray:
    k = U.shape[1]
    return 2.0 * w_row * w_row * (U.T @ U + alpha * np.eye(k))


def update_latent(X, w, U, V, Vstar, alpha, beta, config: SolverConfig,
                  XU=None, UtU=None, sq_norms=None, monitor=None, view=None):
    """Row-wise projected Newton steps on ``V``; returns ``(V_new, n_exhausted_rows)``.

    All rows share ``U^T U + alpha I``; each row's Hessian is that matrix times
    ``2 w_i^2``.
    """
    XU = X @ U if XU is None else XU
    UtU = U.T @ U if UtU is None else UtU
    base = 2.0 * (UtU + alpha * np.eye(U.shape[1]))
    if config.checked:
        objective = lambda v: latent_objective_direct(X, w, U, v, Vstar, alpha, beta)
    else:
        objective = lambda v: latent_objective(X, w, U, v, Vstar, alpha, beta, XU, UtU, sq_norms)
    return _projected_newton(
        V,
        lambda v: latent_gradient(X, w, U, v, Vstar, alpha, beta, XU, UtU),
        objective, base, base, w * w, config, monitor, ("latent", view),
        dict(X=X, w=w, U=U, Vstar=Vstar, alpha=alpha, beta=beta),
    )


# --------------------------------------------------------------------------- consensus block


def solve_consensus(Vs: Sequence[np.ndarray], weights: np.ndarray, alphas) -> np.ndarray:
    """Minimizer of ``sum_v alpha_v ||W_v (V_v - V*)||_F^2``: a per-row convex combination."""
    coef = np.asarray(alphas, dtype=float)[None, :] * weights ** 2
    num = sum(coef[:, v, None] * Vs[v] for v in range(len(Vs)))
    return num / coef.sum(axis=1)[:, None]


def consensus_residual(Vs, weights, alphas, Vstar) -> np.ndarray:
    """Gradient of the consensus objective (halved), which vanishes at the optimum."""
    coef = np.asarray(alphas, dtype=float)[None, :] * weights ** 2
    return sum(coef[:, v, None] * (Vstar - Vs[v]) for v in range(len(Vs)))


# --------------------------------------------------------------------------- projected Newton


def _projected_newton(x, grad_fn, obj_fn, hess, precond, scale, config, monitor, tag, context=None):
    """Minimize a sum of independent row quadratics ``q_r`` over ``x >= 0``.

    Row ``r`` has Hessian ``scale[r] * hess``. The search direction applies the
    inverse of ``precond`` on the free variables of each row and plain diagonal
    scaling on variables held at zero with a positive gradient. Each row takes
    the first trial step in ``1, eta, eta^2, ...`` satisfying the sufficient
    decrease test; a row whose trials are exhausted is left unchanged.

    ``monitor``, if given, is called after every accepted step with the
    iterates, the gradient, both objective values and ``context`` (the block's
    inputs), so callers can re-check the step independently.
    """
    sigma, eta = config.sigma, config.step_decay
    exhausted = 0
    for _ in range(config.newton_steps):
        g = grad_fn(x)
        pg = np.where(x > 0, g, np.minimum(g, 0.0))
        f0 = obj_fn(x)
        if not np.isfinite(f0):
            raise NumericalError(f"{tag[0]} block: non-finite objective")
        if np.linalg.norm(pg) <= config.tol_inner * (1.0 + abs(f0)):
            break
        d = _newton_direction(x, g, precond, scale)
        # rows whose predicted decrease is lost in rounding are treated as stationary
        predicted = np.einsum("ij,ij->i", pg, d)
        pending = predicted > _NEGLIGIBLE * (1.0 + abs(f0)) / x.shape[0]
        new = x.copy()
        moved = False
        gamma = 1.0
        for _trial in range(config.max_inner):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            xr = x[idx]
            cand = np.maximum(xr - gamma * d[idx], 0.0)
            delta = cand - xr
            lin = np.einsum("ij,ij->i", g[idx], delta)
            quad = np.einsum("ij,ij->i", delta @ hess, delta)
            if scale is not None:
                quad = quad * scale[idx]
            ok = (lin < 0) & ((1.0 - sigma) * lin + 0.5 * quad <= 0)
            if ok.any():
                new[idx[ok]] = cand[ok]
                pending[idx[ok]] = False
                moved = True
            gamma *= eta
        exhausted += int(pending.sum())
        if not moved:
            break
        if config.checked or monitor is not None:
            f1 = obj_fn(new)
            ip = float(np.sum(g * (new - x)))
            if config.checked and not f1 - f0 <= sigma * ip:
                break
            if monitor is not None:
                monitor(kind=tag[0], view=tag[1], before=x, after=new, grad=g,
                        f_before=f0, f_after=f1, objective=obj_fn, context=context)
        x = new
    return x, exhausted


def _newton_direction(x, g, precond, scale):
    # variables held at (or within eps of) zero whose gradient pushes them further down
    eps = np.minimum(np.linalg.norm(x - np.maximum(x - g, 0.0), axis=1), 1e-8)
    binding = (x <= eps[:, None]) & (g > 0)
    if not binding.any():
        d = linalg.solve(precond, g.T, assume_a="pos").T
    else:
        d = np.empty_like(g)
        diag = np.diag(precond)
        patterns, inverse = np.unique(binding, axis=0, return_inverse=True)
        inverse = np.ravel(inverse)
        for p, pat in enumerate(patterns):
            rows = inverse == p
            gp = g[rows]
            dp = np.empty_like(gp)
            free = ~pat
            if free.all():
                dp = linalg.solve(precond, gp.T, assume_a="pos").T
            else:
                if free.any():
                    sub = precond[np.ix_(free, free)]
                    dp[:, free] = linalg.solve(sub, gp[:, free].T, assume_a="pos").T
                dp[:, pat] = gp[:, pat] / diag[pat]
            d[rows] = dp
    if scale is not None:
        d = d / scale[:, None]
    return d


# --------------------------------------------------------------------------- chunk driver


def initialize_latents(chunk: ChunkBatch, state: FactorState, config: SolverConfig, rng) -> list:
    """Random start for the very first chunk, least-squares warm start afterwards.

    When the basis is uninitialized it is drawn here too. Random entries are
    uniform(0, 1) scaled by ``sqrt(mean(X) / K)``.
    """
    k = config.n_components
    alphas = config.alphas(chunk.n_views)
    Vs = []
    for v, X in enumerate(chunk.X):
        if state.U[v] is None:
            scale = np.sqrt(max(X.mean(), 0.0) / k)
            state.U[v] = rng.uniform(0.0, 1.0, size=(X.shape[1], k)) * scale
            Vs.append(rng.uniform(0.0, 1.0, size=(X.shape[0], k)) * scale)
        else:
            U = state.U[v]
            G = U.T @ U + alphas[v] * np.eye(k)
            Vs.append(np.maximum(linalg.solve(G, (X @ U).T, assume_a="pos").T, 0.0))
    return Vs


def chunk_objective(chunk, state, U, Vs, Vstar, config, XUs=None) -> float:
    """Historical basis terms plus the chunk objective, summed over views."""
    alphas, betas = config.alphas(chunk.n_views), config.betas(chunk.n_views)
    total = 0.0
    for v, X in enumerate(chunk.X):
        XU = XUs[v] if XUs is not None else None
        total += basis_objective(U[v], state.A[v], state.B[v], state.C[v])
        total += latent_objective(X, chunk.weights[:, v], U[v], Vs[v], Vstar, alphas[v], betas[v],
                                  XU=XU, sq_norms=chunk.sq_norms[v])
    return total


def current_accumulators(chunk, state, v, V):
    """``A``, ``B``, ``c`` including the (not yet committed) current chunk."""
    wt = chunk.weights[:, v] ** 2
    wV = wt[:, None] * V
    A = state.A[v] + V.T @ wV
    B = state.B[v] + chunk.X[v].T @ wV
    c = state.C[v] + float(np.dot(wt, chunk.sq_norms[v]))
    return A, B, c


def chunk_alternation(chunk: ChunkBatch, state: FactorState, config: SolverConfig,
                      rng=None, monitor: Callable | None = None) -> ChunkFactors:
    """Alternate basis, latent and consensus updates on one chunk until convergence.

    Updates ``state.U`` in place; accumulators are not committed here (see
    :func:`accumulate`). A sweep that would raise the tracked objective (possible
    only through rounding) is discarded and ends the loop.
    """
    n_views = chunk.n_views
    alphas, betas = config.alphas(n_views), config.betas(n_views)
    if rng is None:
        rng = np.random.default_rng()
    Vs = initialize_latents(chunk, state, config, rng)
    weights = chunk.weights
    Vstar = solve_consensus(Vs, weights, alphas)
    U = list(state.U)
    f_prev = chunk_objective(chunk, state, U, Vs, Vstar, config)
    if not np.isfinite(f_prev):
        raise NumericalError(f"chunk {chunk.index}: non-finite objective at initialization")
    trace = [f_prev]
    exhausted = 0
    sweeps = 0
    for _ in range(config.max_outer):
        U_new, V_new, XUs = [], [], []
        for v in range(n_views):
            A, B, c = current_accumulators(chunk, state, v, Vs[v])
            u, n_bad = update_basis(U[v], A, B, config, c=c, monitor=monitor, view=v)
            U_new.append(u)
            exhausted += n_bad
        for v, X in enumerate(chunk.X):
            XU = X @ U_new[v]
            UtU = U_new[v].T @ U_new[v]
            vv, n_bad = update_latent(X, weights[:, v], U_new[v], Vs[v], Vstar, alphas[v], betas[v],
                                      config, XU=XU, UtU=UtU, sq_norms=chunk.sq_norms[v],
                                      monitor=monitor, view=v)
            V_new.append(vv)
            XUs.append(XU)
            exhausted += n_bad
        Vstar_new = solve_consensus(V_new, weights, alphas)
        f = chunk_objective(chunk, state, U_new, V_new, Vstar_new, config, XUs)
        if not np.isfinite(f):
            raise NumericalError(f"chunk {chunk.index}: non-finite objective after sweep {sweeps + 1}")
        if f > f_prev:
            break
        U, Vs, Vstar = U_new, V_new, Vstar_new
        sweeps += 1
        trace.append(f)
        converged = f_prev - f <= config.tol_outer * abs(f_prev)
        f_prev = f
        if converged:
            break
    state.U[:] = U
    factors = ChunkFactors(V=Vs, Vstar=Vstar, weights=weights, objective=trace,
                           sweeps=sweeps, exhausted=exhausted)
    factors.loss = chunk_loss(chunk, state.U, factors, config)
    return factors


def chunk_loss(chunk, U, factors, config) -> float:
    """Per-chunk term of the average loss: reconstruction + alpha * disagreement + beta * l1."""
    alphas, betas = config.alphas(chunk.n_views), config.betas(chunk.n_views)
    return sum(
        latent_objective(X, chunk.weights[:, v], U[v], factors.V[v], factors.Vstar,
                         alphas[v], betas[v], sq_norms=chunk.sq_norms[v])
        for v, X in enumerate(chunk.X)
    )


def accumulate(state: FactorState, chunk: ChunkBatch, factors: ChunkFactors):
    """Commit the chunk's sufficient statistics into ``A``, ``B`` and ``c``."""
    key = (state.pass_index, chunk.index)
    if key <= state.last_chunk:
        raise ValueError(f"chunk {chunk.index} of pass {state.pass_index} already accumulated")
    for v in range(chunk.n_views):
        state.A[v], state.B[v], state.C[v] = current_accumulators(chunk, state, v, factors.V[v])
    state.last_chunk = key


@dataclass
class PassLoss:
    """Running sums behind the average loss of one pass.

    The reconstruction part of every chunk seen so far is evaluated with the
    current basis through per-pass copies of ``A``, ``B`` and ``c``; the
    disagreement and l1 parts depend only on each chunk's own factors and are
    summed as they arrive. ``recorded`` keeps the alternative: each chunk's
    loss as it stood when the chunk finished, never re-scored.
    """

    A: list
    B: list
    C: list
    penalty: float = 0.0
    chunks: int = 0
    recorded: float = 0.0

    @classmethod
    def empty(cls, dims: Sequence[int], n_components: int) -> "PassLoss":
        k = n_components
        return cls([np.zeros((k, k)) for _ in dims], [np.zeros((d, k)) for d in dims],
                   [0.0 for _ in dims])

    def add(self, chunk: ChunkBatch, factors: ChunkFactors, config: SolverConfig):
        alphas, betas = config.alphas(chunk.n_views), config.betas(chunk.n_views)
        for v in range(chunk.n_views):
            wt = chunk.weights[:, v] ** 2
            V = factors.V[v]
            wV = wt[:, None] * V
            self.A[v] = self.A[v] + V.T @ wV
            self.B[v] = self.B[v] + chunk.X[v].T @ wV
            self.C[v] = self.C[v] + float(np.dot(wt, chunk.sq_norms[v]))
            diff = V - factors.Vstar
            self.penalty += alphas[v] * float(np.dot(wt, np.einsum("ij,ij->i", diff, diff)))
            self.penalty += betas[v] * float(V.sum())
        self.recorded += factors.loss
        self.chunks += 1

    def total(self, U: Sequence[np.ndarray]) -> float:
        recon = sum(basis_objective(U[v], self.A[v], self.B[v], self.C[v]) for v in range(len(U)))
        return recon + self.penalty


def average_loss(total: float, t: int, chunk_size: int, n_instances: int) -> float:
    """Loss summed over the first ``t`` chunks, per instance seen."""
    if t < 1:
        raise ValueError("average loss is undefined before the first chunk")
    return float(total) / min(chunk_size * t, n_instances)


def kkt_residuals(chunk, state, factors, config) -> dict:
    """Infinity norm of ``min(x, grad)`` for every block at the current point.

    Call after :func:`accumulate` so the basis objective covers the whole history.
    """
    alphas, betas = config.alphas(chunk.n_views), config.betas(chunk.n_views)
    out = {}
    for v, X in enumerate(chunk.X):
        gu = basis_gradient(state.U[v], state.A[v], state.B[v])
        out[f"U{v}"] = float(np.abs(np.minimum(state.U[v], gu)).max())
        gv = latent_gradient(X, chunk.weights[:, v], state.U[v], factors.V[v], factors.Vstar,
                             alphas[v], betas[v])
        out[f"V{v}"] = float(np.abs(np.minimum(factors.V[v], gv)).max())
    gs = 2.0 * consensus_residual(factors.V, chunk.weights, alphas, factors.Vstar)
    out["Vstar"] = float(np.abs(np.minimum(factors.Vstar, gs)).max())
    return out
