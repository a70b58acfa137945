"""Block coordinate descent driver.

Each iteration t solves three proximal sub-problems in order (activations u,
classifier V, hidden weights W) and moves every block a fraction theta_t of
the way to its sub-problem solution:

    x_t = x_{t-1} + theta_t (x* - x_{t-1}).

The schedule is theta_t = (t + 1)^(-p) with p > 1. The shift by one keeps
theta_t < 1 from the first iteration, so every proximal term
(1 - theta_t)^2 / 2 ||x - x_{t-1}||^2 is strictly positive and the tail sums of
theta_k / (1 - theta_k) are finite from k = 1 on.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import solvers
from .arch import ArchitectureSpec, WeightSet, check, init_weights
from .data import Dataset
from .lifting import LiftedBatch, broadcast_gammas, build_quadratic, full_objective

log = logging.getLogger(__name__)

NNZ_THRESHOLD = 1e-6


class TrainingError(RuntimeError):
    """Training stopped early; ``trace`` and ``weights`` hold the state reached."""

    def __init__(self, message, trace=None, weights=None, diagnostics=None):
        super().__init__(message)
        self.trace = trace
        self.weights = weights
        self.diagnostics = diagnostics or {}


def theta(t: int, p: float, offset: int = 1) -> float:
    """(t + offset)^(-p); offset 0 gives the unshifted schedule with theta_1 = 1."""
    if p <= 1:
        raise ValueError(f"schedule power must exceed 1, got {p}")
    if t < 1:
        raise ValueError("iterations are numbered from 1")
    if offset < 0:
        raise ValueError("offset must be >= 0")
    return (1.0 / (t + offset)) ** p


@dataclass
class TrainConfig:
    gammas: object = 0.1
    schedule_power: float = 2.0
    schedule_offset: int = 1
    max_epochs: int = 100
    seed: int = 0
    sparse: bool = False
    radius: float = 1.0
    init_scale: float = 0.01
    classifier_init_scale: float | None = None
    u_tol: float = solvers.DEFAULT_TOL
    w_tol: float = solvers.DEFAULT_TOL
    max_iter: int = solvers.DEFAULT_MAX_ITER
    weight_decay: float = 0.0
    strict_solvers: bool = False
    # replaces the schedule, e.g. lambda t: 0.0 for a frozen run
    theta_fn: Callable | None = None

    def __post_init__(self):
        if self.schedule_power <= 1:
            raise ValueError("schedule_power must exceed 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def schedule(self, t: int) -> float:
        if self.theta_fn is not None:
            return float(self.theta_fn(t))
        return theta(t, self.schedule_power, self.schedule_offset)


def edge_name(key) -> str:
    return "V" if key == "V" else f"W{key[0]}_{key[1]}"


def nnz_fractions(weights: WeightSet, threshold: float = NNZ_THRESHOLD) -> dict:
    out = {edge_name(k): float(np.mean(np.abs(w) > threshold)) for k, w in weights.hidden.items()}
    out["V"] = float(np.mean(np.abs(weights.classifier) > threshold))
    return out


def hidden_nnz_fraction(weights: WeightSet, threshold: float = NNZ_THRESHOLD) -> float:
    """Nonzero fraction over all hidden weights together; the classifier is excluded."""
    total = sum(w.size for w in weights.hidden.values())
    if total == 0:
        return 0.0
    nnz = sum(int(np.sum(np.abs(w) > threshold)) for w in weights.hidden.values())
    return nnz / total


@dataclass
class TrainTrace:
    columns: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_objective: float = float("nan")

    def __len__(self):
        return len(self.rows)

    def append(self, row: dict, seconds: float):
        if not self.columns:
            self.columns = list(row)
        self.rows.append(row)
        self.seconds.append(seconds)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def objective(self) -> np.ndarray:
        return self.column("objective")

    def total_delta(self) -> np.ndarray:
        return self.column("du") + self.column("dV") + self.column("dW")

    def to_csv(self, path, with_timing: bool = False) -> None:
        cols = list(self.columns) or ["iter", "objective", "du", "dV", "dW", "theta"]
        if with_timing:
            cols.insert(cols.index("theta") + 1, "seconds")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row, sec in zip(self.rows, self.seconds):
                vals = dict(row, seconds=sec)
                w.writerow([_fmt(vals[c]) for c in cols])

    def timing_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "seconds"])
            for row, sec in zip(self.rows, self.seconds):
                w.writerow([row["iter"], _fmt(sec)])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_trace_csv(path) -> TrainTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    trace = TrainTrace()
    for r in rows:
        row = {k: (int(v) if k in ("iter", "u_iters", "w_iters", "unconverged") else float(v))
               for k, v in r.items() if k != "seconds"}
        trace.append(row, float(r.get("seconds", "nan")))
    return trace


def _objective(batch, q, V, W, weight_decay):
    f = full_objective(batch, q, V)
    if weight_decay:
        f += 0.5 * weight_decay * (float(np.sum(V * V)) +
                                   sum(float(np.sum(w * w)) for w in W.hidden.values()))
    return f


def _row_norm_sum(a, b) -> float:
    return float(np.sum(np.linalg.norm(a - b, axis=1)))


def train(data: Dataset, spec: ArchitectureSpec, config: TrainConfig,
          init: WeightSet | None = None, callback: Callable | None = None):
    """Run the BCD iterations; returns (WeightSet, TrainTrace).

    ``callback(t, batch, weights)`` is called after every iteration.
    Raises TrainingError on a non-finite objective, a failed sub-solver, or a
    sustained objective increase.
    """
    from .inference import forward_batch

    check(spec)
    if data.dim != spec.dims[0]:
        raise ValueError(f"data has dimension {data.dim}, architecture expects {spec.dims[0]}")
    if data.labels.max() >= spec.num_classes:
        raise ValueError("labels exceed the architecture's class count")
    gammas = broadcast_gammas(config.gammas, spec.num_hidden)

    W = init if init is not None else init_weights(
        spec, config.seed, config.init_scale, sparse=config.sparse, radius=config.radius,
        classifier_scale=config.classifier_init_scale)
    V = np.array(W.classifier)
    x = data.features
    # initial lifted variables: the feed-forward pass of the initial weights (feasible)
    batch = LiftedBatch.from_blocks(forward_batch(spec, W, x), data.labels, spec.num_classes)
    q = build_quadratic(spec, W, gammas)
    trace = TrainTrace(initial_objective=_objective(batch, q, V, W, config.weight_decay))

    u_star, w_star = None, None
    rising = 0
    f_prev = trace.initial_objective
    t0 = time.perf_counter()
    for t in range(1, config.max_epochs + 1):
        th = config.schedule(t)

        u_new, uinfo = solvers.solve_u_subproblem(batch, q, V, th, batch, config.u_tol,
                                                  config.max_iter, start=u_star)
        u_star = u_new
        blocks = [x]
        du = 0.0
        for k in range(1, spec.num_hidden + 1):
            old = batch.blocks[k]
            nb = np.maximum(old + th * (u_new.blocks[k] - old), 0.0)
            du += _row_norm_sum(nb, old)
            blocks.append(nb)
        batch = LiftedBatch(blocks, batch.labels, batch.targets)

        V_star = solvers.solve_v_subproblem(batch, V, th, config.weight_decay)
        V_new = V + th * (V_star - V)
        dV = float(np.linalg.norm(V_new - V))
        V = V_new

        W_opt, winfo = solvers.solve_w_subproblem(
            batch, spec, W, gammas, th, config.sparse, radius=config.radius, tol=config.w_tol,
            max_iter=config.max_iter, start=w_star, weight_decay=config.weight_decay)
        w_star = W_opt
        hidden = {}
        dW = 0.0
        for key, w_old in W.hidden.items():
            hidden[key] = w_old + th * (W_opt.hidden[key] - w_old)
            dW += float(np.linalg.norm(hidden[key] - w_old))
        W = WeightSet(hidden, V)
        q = build_quadratic(spec, W, gammas)

        f = _objective(batch, q, V, W, config.weight_decay)
        row = {"iter": t, "objective": f, "du": du, "dV": dV, "dW": dW, "theta": th,
               "u_iters": uinfo.iterations, "w_iters": winfo.iterations,
               "unconverged": uinfo.unconverged + winfo.unconverged}
        row.update({f"nnz_{k}": v for k, v in nnz_fractions(W).items()})
        trace.append(row, time.perf_counter() - t0)
        if callback is not None:
            callback(t, batch, W)

        if not np.isfinite(f) or not W.is_finite():
            raise TrainingError(f"non-finite objective at iteration {t}", trace, W)
        if not (uinfo.converged and winfo.converged):
            msg = (f"iteration {t}: {uinfo.unconverged} u-rows and {winfo.unconverged} W-rows "
                   f"hit max_iter (worst residual {max(uinfo.max_residual, winfo.max_residual):.3g})")
            if config.strict_solvers:
                raise TrainingError("sub-solver failed: " + msg, trace, W)
            log.warning(msg)
        if f > f_prev + 1e-6 * abs(f_prev):
            rising += 1
            if rising >= 5:
                diag = {"objective": [trace.initial_objective, *trace.objective][-6:],
                        "du": trace.column("du")[-5:].tolist(),
                        "dV": trace.column("dV")[-5:].tolist(),
                        "dW": trace.column("dW")[-5:].tolist()}
                log.error("objective rose for 5 consecutive iterations: %s", diag)
                raise TrainingError("objective increased for 5 consecutive iterations",
                                    trace, W, diag)
        else:
            rising = 0
        f_prev = f
        log.info("iter %d  f=%.6g  theta=%.3g  du=%.3g dV=%.3g dW=%.3g", t, f, th, du, dV, dW)

    return W, trace


@dataclass
class ConvergenceReport:
    constant: float
    dominated: bool
    ratios: np.ndarray
    observed_tail: np.ndarray
    bound_tail: np.ndarray
    analytic_tail: np.ndarray


def convergence_report(trace: TrainTrace, p: float | None = None) -> ConvergenceReport:
    """Check total block deltas against C * theta_t / (1 - theta_t).

    C is the smallest constant that bounds every observed iteration. Tail sums
    of the observed deltas are reported next to C times the tail of the
    schedule, and (when ``p`` is given) the integral bound
    (p-1)^{-1} (s^p - 1)^{1/p - 1} with s = t + 1 for the shifted schedule.
    This is an empirical probe over the recorded window, not a proof.
    """
    if len(trace) < 10:
        raise ValueError("need at least 10 iterations")
    th = trace.column("theta")
    delta = trace.total_delta()
    weight = th / (1.0 - th)
    ratios = np.divide(delta, weight, out=np.zeros_like(delta), where=weight > 0)
    if np.any((weight == 0) & (delta > 0)):
        C = float("inf")
    else:
        C = float(ratios.max(initial=0.0))
    observed_tail = np.cumsum(delta[::-1])[::-1]
    bound_tail = C * np.cumsum(weight[::-1])[::-1] if np.isfinite(C) else np.full_like(delta, np.inf)
    if p is not None:
        s = trace.column("iter") + 1.0
        analytic = (s ** p - 1.0) ** (1.0 / p - 1.0) / (p - 1.0)
    else:
        analytic = np.full_like(delta, np.nan)
    return ConvergenceReport(C, bool(np.isfinite(C)), ratios, observed_tail, bound_tail, analytic)
