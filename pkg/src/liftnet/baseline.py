"""Backprop + minibatch SGD with momentum, the comparison trainer.

The loss is the same squared error as the lifted objective's data term,
1/2 sum_i ||y_i - V u_{i,N}||^2 with u given by the feed-forward pass. A
preactivation of exactly zero gets ReLU subgradient 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .arch import ArchitectureSpec, EdgeKind, WeightSet, check, init_weights
from .bcd import TrainingError, TrainTrace, nnz_fractions
from .data import Dataset
from .lifting import one_hot


@dataclass
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _forward(spec, weights, X):
    blocks, pre = [X], [None]
    for n in range(1, spec.num_hidden + 1):
        z = np.zeros((X.shape[0], spec.dims[n]))
        for m, kind in spec.edges(n):
            z += blocks[m] if kind is EdgeKind.IDENTITY else blocks[m] @ weights.hidden[(n, m)].T
        pre.append(z)
        blocks.append(np.maximum(z, 0.0))
    return blocks, pre


def squared_loss(spec, weights, X, Y) -> float:
    blocks, _ = _forward(spec, weights, np.asarray(X, dtype=np.float64))
    r = blocks[-1] @ weights.classifier.T - Y
    return 0.5 * float(np.sum(r * r))


def backprop_grads(spec: ArchitectureSpec, weights: WeightSet, X, Y) -> tuple:
    """Gradients of the summed squared loss; returns (dict of dW, dV, loss)."""
    X = np.asarray(X, dtype=np.float64)
    blocks, pre = _forward(spec, weights, X)
    V = weights.classifier
    r = blocks[-1] @ V.T - Y
    loss = 0.5 * float(np.sum(r * r))
    gV = r.T @ blocks[-1]
    gu = [None] * (spec.num_hidden + 1)
    gu[-1] = r @ V
    grads = {}
    for n in range(spec.num_hidden, 0, -1):
        if gu[n] is None:
            continue
        d = gu[n] * (pre[n] > 0)
        for m, kind in spec.edges(n):
            if kind is EdgeKind.LEARNABLE:
                grads[(n, m)] = d.T @ blocks[m]
                back = d @ weights.hidden[(n, m)]
            else:
                back = d
            if m > 0:
                gu[m] = back if gu[m] is None else gu[m] + back
    for key, w in weights.hidden.items():
        grads.setdefault(key, np.zeros_like(w))
    return grads, gV, loss


def train_sgd(data: Dataset, spec: ArchitectureSpec, config: SgdConfig,
              init: WeightSet | None = None):
    """Minibatch SGD with classical momentum on the mean minibatch loss.

    Returns (WeightSet, TrainTrace); the trace's objective column is the
    full-batch summed loss after each epoch. Raises TrainingError if the loss
    stops being finite.
    """
    check(spec)
    if data.dim != spec.dims[0]:
        raise ValueError(f"data has dimension {data.dim}, architecture expects {spec.dims[0]}")
    W = init if init is not None else init_weights(spec, config.seed, config.init_scale)
    hidden = {k: np.array(w) for k, w in W.hidden.items()}
    V = np.array(W.classifier)
    X = data.features
    Y = one_hot(data.labels, spec.num_classes)
    vel = {k: np.zeros_like(w) for k, w in hidden.items()}
    velV = np.zeros_like(V)
    rng = np.random.default_rng(config.seed)

    trace = TrainTrace(initial_objective=squared_loss(spec, WeightSet(hidden, V), X, Y))
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        start_h = {k: w.copy() for k, w in hidden.items()}
        start_V = V.copy()
        order = rng.permutation(data.n)
        for lo in range(0, data.n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            grads, gV, _ = backprop_grads(spec, WeightSet(hidden, V), X[idx], Y[idx])
            scale = config.lr / len(idx)
            for k in hidden:
                vel[k] = config.momentum * vel[k] - scale * grads[k]
                hidden[k] = hidden[k] + vel[k]
            velV = config.momentum * velV - scale * gV
            V = V + velV
        current = WeightSet(hidden, V)
        f = squared_loss(spec, current, X, Y)
        dW = sum(float(np.linalg.norm(hidden[k] - start_h[k])) for k in hidden)
        row = {"iter": epoch, "objective": f, "du": 0.0, "dV": float(np.linalg.norm(V - start_V)),
               "dW": dW, "theta": 0.0, "u_iters": 0, "w_iters": 0, "unconverged": 0}
        row.update({f"nnz_{k}": v for k, v in nnz_fractions(current).items()})
        trace.append(row, time.perf_counter() - t0)
        if not np.isfinite(f) or not current.is_finite():
            raise TrainingError(f"SGD diverged at epoch {epoch} (loss {f})", trace, current)
    return WeightSet(hidden, V), trace
