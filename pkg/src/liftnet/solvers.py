"""Convex sub-problems of the block coordinate descent and their primitives.

Every iterative solve here goes through ``apg_minimize``: accelerated projected
gradient on a batch of independent quadratics that share one Hessian,

    minimize_x  1/2 x^T H x - b^T x   subject to x in C,

one problem per row. Step 1/L with L from power iteration (or given); a row's
L doubles whenever a step violates the descent condition, and its momentum is
reset whenever a step would increase its objective, so every row's objective
is non-increasing from its (projected) starting point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from ._pool import map_ordered, row_chunks
from .arch import ArchitectureSpec, EdgeKind, WeightSet
from .lifting import LiftedBatch, LiftedQuadratic, broadcast_gammas

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 2000


def relu_project(x: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the nonnegative orthant, i.e. ReLU."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def project_l1_rows(W: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Project every row of W onto {v : ||v||_1 <= radius} (sort-based, exact)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    W = np.asarray(W, dtype=np.float64)
    out = W.copy()
    a = np.abs(W)
    over = a.sum(axis=-1) > radius
    if not np.any(over):
        return out
    a = a[over]
    mu = -np.sort(-a, axis=-1)
    cs = np.cumsum(mu, axis=-1) - radius
    j = np.arange(1, a.shape[-1] + 1)
    cond = mu - cs / j > 0
    rho = a.shape[-1] - np.argmax(cond[:, ::-1], axis=-1)
    tau = cs[np.arange(len(rho)), rho - 1] / rho
    out[over] = np.sign(W[over]) * np.maximum(a - tau[:, None], 0.0)
    return out


def project_l1_ball_row(w: np.ndarray, radius: float = 1.0) -> np.ndarray:
    return project_l1_rows(np.atleast_2d(w), radius)[0]


@dataclass
class ApgResult:
    x: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def power_lipschitz(apply: Callable, dim: int, mask=None, iters: int = 30, seed: int = 0) -> float:
    """Largest-eigenvalue estimate of a symmetric PSD operator acting on rows."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((1, dim))
    if mask is not None:
        v *= mask
    lam = 0.0
    for _ in range(iters):
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v = v / nv
        w = apply(v)
        if mask is not None:
            w = w * mask
        lam = float(np.linalg.norm(w))
        v = w
    return lam


def apg_minimize(apply: Callable, b: np.ndarray, project: Callable, residual: Callable,
                 x0: np.ndarray, lipschitz: float, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER) -> ApgResult:
    """Row-batched accelerated projected gradient.

    ``apply(X)`` returns X H for row-stacked X; ``project`` maps rows onto the
    feasible set; ``residual(x, g, L)`` gives each row's optimality residual
    given gradient g = xH - b. Row i stops once its residual is at most
    tol * (1 + ||b_i||).
    """
    x = project(np.array(x0, dtype=np.float64))
    m = x.shape[0]
    b = np.broadcast_to(b, x.shape)
    L = np.full(m, max(lipschitz * 1.05, 1e-12))
    thresh = tol * (1.0 + np.linalg.norm(b, axis=1))

    Hx = apply(x)
    f = 0.5 * np.sum(x * Hx, axis=1) - np.sum(b * x, axis=1)
    res = residual(x, Hx - b, L)
    done = res <= thresh
    iters = np.zeros(m, dtype=np.int64)
    y, Hy = x.copy(), Hx.copy()
    t = np.ones(m)
    fresh = np.ones(m, dtype=bool)  # y == x for this row

    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        iters[act] += 1
        xa, ya, ba, La = x[act], y[act], b[act], L[act]
        xn = project(ya - (Hy[act] - ba) / La[:, None])
        Hxn = apply(xn)
        # backtracking: the step must satisfy d^T H d <= L ||d||^2, else double L and retry
        # (skipped for steps lost in roundoff, where the test is meaningless)
        d = xn - ya
        dd = np.sum(d * d, axis=1)
        curv = np.sum(d * (Hxn - Hy[act]), axis=1)
        tiny = dd <= (1e-10 * (1.0 + np.linalg.norm(ya, axis=1))) ** 2
        steep = ~tiny & (curv > La * dd * (1.0 + 1e-12))
        L[act[steep]] *= 2.0
        fn = 0.5 * np.sum(xn * Hxn, axis=1) - np.sum(ba * xn, axis=1)
        # a plain step that passed the curvature test cannot increase f, so only
        # momentum steps are ever rejected
        bad = ~steep & ~fresh[act] & (fn > f[act] + 1e-15 * (1.0 + np.abs(f[act])))
        good = ~steep & ~bad

        # rejected rows: restart momentum from x
        rb = act[bad]
        y[rb], Hy[rb], t[rb] = x[rb], Hx[rb], 1.0
        fresh[rb] = True

        rg = act[good]
        xg, Hxg = xn[good], Hxn[good]
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t[rg] ** 2))
        beta = ((t[rg] - 1.0) / tn)[:, None]
        y[rg] = xg + beta * (xg - xa[good])
        Hy[rg] = Hxg + beta * (Hxg - Hx[rg])
        x[rg], Hx[rg], f[rg], t[rg] = xg, Hxg, fn[good], tn
        fresh[rg] = beta[:, 0] == 0.0
        res[rg] = residual(xg, Hxg - ba[good], L[rg])
        done[rg] = res[rg] <= thresh[rg]

    return ApgResult(x, done, iters, res)


# ---------------------------------------------------------------------------
# nonnegative QP

@dataclass
class NnqpProblem:
    """minimize 1/2 u^T H u - b^T u over u >= 0, with fixed coordinates held at the start value.

    ``hessian_apply`` acts on row-stacked vectors. ``free_mask`` (bool, length D)
    marks the coordinates that are optimized; None means all free.
    """

    hessian_apply: Callable
    linear: np.ndarray
    free_mask: np.ndarray | None = None


def nonneg_pg_residual(x, g, L=None, free=None):
    pg = np.where(x > 0, g, np.minimum(g, 0.0))
    if free is not None:
        pg = pg * free
    return np.linalg.norm(pg, axis=-1)


def solve_nnqp(p: NnqpProblem, start: np.ndarray, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER, lipschitz: float | None = None) -> ApgResult:
    """Solve one NNQP (1-D start) or a batch sharing H (2-D start, one problem per row)."""
    start = np.asarray(start, dtype=np.float64)
    single = start.ndim == 1
    x0 = np.atleast_2d(start)
    D = x0.shape[1]
    b = np.asarray(p.linear, dtype=np.float64)
    b = b.reshape(1, D) if b.ndim == 1 else b
    free = None if p.free_mask is None else np.asarray(p.free_mask, dtype=bool)
    if lipschitz is None:
        lipschitz = power_lipschitz(p.hessian_apply, D,
                                    None if free is None else free.astype(np.float64))
    if free is None:
        result = apg_minimize(p.hessian_apply, b, relu_project,
                              lambda x, g, L: nonneg_pg_residual(x, g), x0, lipschitz,
                              tol, max_iter)
    else:
        result = _apg_fixed(p.hessian_apply, b, free, x0, lipschitz, tol, max_iter)
    if single:
        return ApgResult(result.x[0], result.converged[0], result.iterations[0], result.residual[0])
    return result


def _apg_fixed(apply, b, free, x0, lipschitz, tol, max_iter):
    """NNQP over the free coordinates only, fixed coordinates folded into the linear term."""
    xf = x0[:, ~free]
    fixed_part = np.zeros_like(x0)
    fixed_part[:, ~free] = xf
    offset = apply(fixed_part)[:, free]
    bf = np.broadcast_to(b, x0.shape)[:, free] - offset
    D = x0.shape[1]
    idx = np.flatnonzero(free)

    def sub_apply(Z):
        full = np.zeros((Z.shape[0], D))
        full[:, idx] = Z
        return apply(full)[:, idx]

    r = apg_minimize(sub_apply, bf, relu_project, lambda x, g, L: nonneg_pg_residual(x, g),
                     x0[:, free], lipschitz, tol, max_iter)
    x = x0.copy()
    x[:, free] = r.x
    return ApgResult(x, r.converged, r.iterations, r.residual)


def dense_hessian_apply(H: np.ndarray) -> Callable:
    H = np.asarray(H, dtype=np.float64)
    return lambda X: X @ H


# ---------------------------------------------------------------------------
# u sub-problem

@dataclass
class SolveInfo:
    converged: bool
    iterations: int
    unconverged: int = 0
    max_residual: float = 0.0


def solve_u_subproblem(batch: LiftedBatch, q: LiftedQuadratic, V: np.ndarray, theta: float,
                       prev: LiftedBatch, tol: float = DEFAULT_TOL,
                       max_iter: int = DEFAULT_MAX_ITER, start: LiftedBatch | None = None):
    """Per-sample proximal NNQP for the lifted activations.

    For each sample: H = P^T V^T V P + Q + (1-theta)^2 I and
    b = P^T V^T y_i + (1-theta)^2 u_i^prev, with u_{i,0} pinned to x_i. The
    fixed input block is eliminated up front so the iteration only touches
    blocks 1..N. Returns (LiftedBatch, SolveInfo).
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    spec = q.spec
    N = spec.num_hidden
    c = (1.0 - theta) ** 2
    dims = spec.dims[1:N + 1]
    offs = np.cumsum((0,) + dims)
    Df = int(offs[-1])
    VtV = V.T @ V
    hidden = list(range(1, N + 1))

    def split(Z):
        return [None] + [Z[:, offs[k]:offs[k + 1]] for k in range(N)]

    def apply(Z):
        out = q.apply(split(Z), want=hidden)
        out[N] = out[N] + Z[:, offs[N - 1]:] @ VtV
        return np.concatenate(out[1:], axis=1) + c * Z

    x = batch.blocks[0]
    const = q.apply([x] + [None] * N, want=hidden)
    const = np.concatenate(const[1:], axis=1)
    b = c * np.concatenate(prev.blocks[1:], axis=1) - const
    b[:, offs[N - 1]:] += batch.targets @ V

    z0 = np.concatenate((start or prev).blocks[1:], axis=1)
    L = power_lipschitz(apply, Df)

    def run(sl):
        return apg_minimize(apply, b[sl], relu_project,
                            lambda xx, g, LL: nonneg_pg_residual(xx, g),
                            z0[sl], L, tol, max_iter)

    results = map_ordered(run, row_chunks(batch.n))
    Z = np.concatenate([r.x for r in results], axis=0)
    conv = np.concatenate([r.converged for r in results])
    its = np.concatenate([r.iterations for r in results])
    res = np.concatenate([r.residual for r in results])
    blocks = [x] + [Z[:, offs[k]:offs[k + 1]] for k in range(N)]
    out = LiftedBatch(blocks, batch.labels, batch.targets)
    info = SolveInfo(bool(conv.all()), int(its.max(initial=0)), int((~conv).sum()),
                     float(res.max(initial=0.0)))
    return out, info


# ---------------------------------------------------------------------------
# V sub-problem

def _spd_right_solve(A: np.ndarray, G: np.ndarray, shift: float) -> np.ndarray:
    """A (G + shift I)^{-1} for symmetric PSD G; minimum-norm when the system is singular."""
    M = G + shift * np.eye(G.shape[0])
    if shift > 0:
        try:
            cf = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
            return scipy.linalg.cho_solve(cf, A.T, check_finite=False).T
        except np.linalg.LinAlgError:
            pass
    w, U = np.linalg.eigh(M)
    cutoff = max(w.max(initial=0.0), 0.0) * M.shape[0] * np.finfo(float).eps
    inv = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return ((A @ U) * inv) @ U.T


def solve_v_subproblem(batch: LiftedBatch, V_prev: np.ndarray, theta: float,
                       weight_decay: float = 0.0) -> np.ndarray:
    """Ridge-type closed form (Y^T F + c V_prev)(F^T F + c I)^{-1}, c = (1-theta)^2."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    c = (1.0 - theta) ** 2
    F = batch.features
    A = batch.targets.T @ F + c * V_prev
    return _spd_right_solve(A, F.T @ F, c + weight_decay)


# ---------------------------------------------------------------------------
# W sub-problem

def _layer_system(batch: LiftedBatch, spec: ArchitectureSpec, n: int):
    learn = [m for m, k in spec.edges(n) if k is EdgeKind.LEARNABLE]
    target = batch.blocks[n]
    for m, k in spec.edges(n):
        if k is EdgeKind.IDENTITY:
            target = target - batch.blocks[m]
    Z = np.concatenate([batch.blocks[m] for m in learn], axis=1)
    return learn, target, Z


def _segment_projector(widths, radius):
    bounds = np.cumsum((0,) + tuple(widths))

    def project(X):
        out = np.empty_like(X)
        for a, b in zip(bounds[:-1], bounds[1:]):
            out[:, a:b] = project_l1_rows(X[:, a:b], radius)
        return out

    return project


def _mapping_residual(project):
    def residual(x, g, L):
        return L * np.linalg.norm(x - project(x - g / L[:, None]), axis=1)
    return residual


def solve_w_subproblem(batch: LiftedBatch, spec: ArchitectureSpec, W_prev: WeightSet, gammas,
                       theta: float, sparse: bool = False, *, radius: float = 1.0,
                       tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                       start: WeightSet | None = None, weight_decay: float = 0.0):
    """Per-layer proximal least squares for the hidden weights.

    Layer n regresses c_n = u_n - (identity inputs) on the stacked learnable
    inputs z_n. Dense mode is the closed form
    (g C^T Z + c W_prev)(g Z^T Z + c I)^{-1}; sparse mode runs accelerated
    projected gradient with every row of every edge matrix kept in the l1 ball.
    Returns (WeightSet, SolveInfo); the classifier is carried over from W_prev.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    gammas = broadcast_gammas(gammas, spec.num_hidden)
    c = (1.0 - theta) ** 2
    shift = c + weight_decay
    layers = [n for n in range(1, spec.num_hidden + 1)
              if any(k is EdgeKind.LEARNABLE for _, k in spec.edges(n))]

    def solve_layer(n):
        learn, target, Z = _layer_system(batch, spec, n)
        g = gammas[n - 1]
        Wp = np.concatenate([W_prev.hidden[(n, m)] for m in learn], axis=1)
        G = g * (Z.T @ Z)
        B = g * (target.T @ Z) + c * Wp
        if not sparse:
            return learn, _spd_right_solve(B, G, shift), None
        widths = [spec.dims[m] for m in learn]
        project = _segment_projector(widths, radius)
        src = start if start is not None else W_prev
        W0 = np.concatenate([src.hidden[(n, m)] for m in learn], axis=1)
        H = G + shift * np.eye(G.shape[0])
        L = float(scipy.linalg.eigvalsh(H, subset_by_index=[H.shape[0] - 1, H.shape[0] - 1],
                                        check_finite=False)[0])
        r = apg_minimize(lambda X: X @ H, B, project, _mapping_residual(project), W0, L,
                         tol, max_iter)
        return learn, r.x, r

    hidden = dict(W_prev.hidden)
    converged, iters, bad, worst = True, 0, 0, 0.0
    for n, (learn, Wn, r) in zip(layers, map_ordered(solve_layer, layers)):
        col = 0
        for m in learn:
            d = spec.dims[m]
            hidden[(n, m)] = Wn[:, col:col + d]
            col += d
        if r is not None:
            converged &= r.all_converged
            iters = max(iters, int(r.iterations.max(initial=0)))
            bad += int((~r.converged).sum())
            worst = max(worst, float(r.residual.max(initial=0.0)))
    return W_prev.replace(hidden=hidden), SolveInfo(converged, iters, bad, worst)
