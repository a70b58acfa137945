"""Lifted quadratic form over concatenated activations and the training objective.

A sample's lifted vector is u = [u_0; u_1; ...; u_N] with u_0 = x. Layer n's
consistency residual is A_n u = u_n - sum_{m in M_n} W_{n,m} u_m (identity edges
contribute u_m unweighted). We define

    quadratic_form(u) = u^T Q u = sum_n gamma_n ||A_n u||^2,

so Q = sum_n gamma_n A_n^T A_n and the penalty sum_n gamma_n/2 ||A_n u||^2 is
exactly (1/2) u^T Q u. Q is never materialized except by ``dense()``, which
exists for small-dimension checks.

Batches are row-major: a block is an (n_samples, d_k) array and a weight acts
as ``u_m @ W.T``. Any block may be ``None`` to stand for zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import ArchitectureSpec, EdgeKind, WeightSet


def broadcast_gammas(gammas, num_hidden: int) -> tuple:
    if np.isscalar(gammas):
        gammas = [float(gammas)] * num_hidden
    gammas = tuple(float(g) for g in gammas)
    if len(gammas) != num_hidden:
        raise ValueError(f"need {num_hidden} gammas, got {len(gammas)}")
    if any(g < 0 or not np.isfinite(g) for g in gammas):
        raise ValueError(f"gammas must be finite and nonnegative, got {gammas}")
    return gammas


def split_blocks(u: np.ndarray, spec: ArchitectureSpec) -> list:
    """Views of u_0..u_N from a (D,) or (n, D) lifted array."""
    u = np.asarray(u)
    if u.shape[-1] != spec.lifted_dim:
        raise ValueError(f"lifted vector has length {u.shape[-1]}, expected {spec.lifted_dim}")
    offs = spec.offsets()
    return [u[..., o:o + d] for o, d in zip(offs, spec.dims[:-1])]


def join_blocks(blocks) -> np.ndarray:
    return np.concatenate(blocks, axis=-1)


def select_output(u: np.ndarray, spec: ArchitectureSpec) -> np.ndarray:
    """P u: the last hidden block u_N."""
    return split_blocks(u, spec)[-1]


def embed_output(v: np.ndarray, spec: ArchitectureSpec) -> np.ndarray:
    """P^T v: a lifted vector that is zero except for block N."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.feature_dim:
        raise ValueError("feature length mismatch")
    out = np.zeros(v.shape[:-1] + (spec.lifted_dim,))
    out[..., spec.lifted_dim - spec.feature_dim:] = v
    return out


class LiftedQuadratic:
    """Block residual operators for a fixed set of hidden weights."""

    def __init__(self, spec: ArchitectureSpec, hidden: dict, gammas):
        self.spec = spec
        self.hidden = hidden
        self.gammas = broadcast_gammas(gammas, spec.num_hidden)

    @property
    def total_dim(self) -> int:
        return self.spec.lifted_dim

    def _edge_terms(self, n):
        for m, kind in self.spec.edges(n):
            yield m, (None if kind is EdgeKind.IDENTITY else self.hidden[(n, m)])

    def residuals(self, blocks) -> list:
        """[A_1 u, ..., A_N u] for block input; entries are None when identically zero."""
        out = []
        for n in range(1, self.spec.num_hidden + 1):
            r = None if blocks[n] is None else np.array(blocks[n], dtype=np.float64)
            for m, W in self._edge_terms(n):
                if blocks[m] is None:
                    continue
                term = blocks[m] if W is None else blocks[m] @ W.T
                r = -term if r is None else r - term
            out.append(r)
        return out

    def apply(self, blocks, want=None) -> list:
        """Q u in block form. ``want`` restricts which output blocks are computed."""
        want = set(range(self.spec.num_hidden + 1)) if want is None else set(want)
        shape0 = next(b.shape[:-1] for b in blocks if b is not None)
        out = [np.zeros(shape0 + (d,)) if k in want else None
               for k, d in enumerate(self.spec.dims[:-1])]
        for n, r in enumerate(self.residuals(blocks), start=1):
            g = self.gammas[n - 1]
            if r is None or g == 0.0:
                continue
            if n in want:
                out[n] += g * r
            for m, W in self._edge_terms(n):
                if m in want:
                    out[m] -= g * (r if W is None else r @ W)
        return out

    def quadratic_form(self, u: np.ndarray):
        """u^T Q u for a (D,) vector, or per row for an (n, D) array."""
        total = 0.0
        for g, r in zip(self.gammas, self.residuals(split_blocks(u, self.spec))):
            if r is not None:
                total = total + g * np.sum(r * r, axis=-1)
        return total

    def tikhonov(self, u: np.ndarray) -> np.ndarray:
        """Gamma u: stacked sqrt(gamma_n) A_n u, so ||Gamma u||^2 = u^T Q u."""
        blocks = split_blocks(u, self.spec)
        parts = []
        for n, (g, r) in enumerate(zip(self.gammas, self.residuals(blocks)), start=1):
            if r is None:
                r = np.zeros(np.shape(u)[:-1] + (self.spec.dims[n],))
            parts.append(np.sqrt(g) * r)
        return np.concatenate(parts, axis=-1)

    def dense(self) -> np.ndarray:
        """Materialize Q (D x D). Small dimensions only."""
        D = self.total_dim
        cols = self.apply(split_blocks(np.eye(D), self.spec))
        return join_blocks(cols)


def build_quadratic(spec: ArchitectureSpec, weights: WeightSet, gammas) -> LiftedQuadratic:
    return LiftedQuadratic(spec, weights.hidden, gammas)


def apply_tikhonov_factor(q: LiftedQuadratic, u: np.ndarray) -> np.ndarray:
    return q.tikhonov(u)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class LiftedBatch:
    """Lifted variables for a set of samples: blocks[k] is (n, d_k); blocks[0] holds x."""

    blocks: list
    labels: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_blocks(cls, blocks, labels, num_classes: int) -> "LiftedBatch":
        labels = np.asarray(labels, dtype=np.int64)
        return cls([np.asarray(b, dtype=np.float64) for b in blocks], labels,
                   one_hot(labels, num_classes))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def features(self) -> np.ndarray:
        return self.blocks[-1]

    def as_matrix(self) -> np.ndarray:
        return join_blocks(self.blocks)

    def copy(self) -> "LiftedBatch":
        return LiftedBatch([b.copy() for b in self.blocks], self.labels.copy(), self.targets.copy())

    def violations(self, x: np.ndarray | None = None, atol: float = 0.0) -> list:
        problems = []
        if x is not None and not np.array_equal(self.blocks[0], x):
            problems.append("block 0 differs from the inputs")
        for k, b in enumerate(self.blocks[1:], start=1):
            if b.size and b.min() < -atol:
                problems.append(f"block {k} has negative entries (min {b.min():.3g})")
        return problems


def output_loss(batch: LiftedBatch, V: np.ndarray) -> float:
    resid = batch.targets - batch.features @ V.T
    return 0.5 * float(np.sum(resid * resid))


def full_objective(batch: LiftedBatch, q: LiftedQuadratic, V: np.ndarray) -> float:
    """sum_i 1/2 ||y_i - V u_{i,N}||^2 + 1/2 u_i^T Q u_i."""
    if batch.n == 0:
        return 0.0
    penalty = 0.0
    for g, r in zip(q.gammas, q.residuals(batch.blocks)):
        if r is not None:
            penalty += g * float(np.sum(r * r))
    return output_loss(batch, V) + 0.5 * penalty
