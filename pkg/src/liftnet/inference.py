"""Feed-forward evaluation, linear SVM head, accuracy and weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import ArchitectureSpec, EdgeKind, WeightSet, check
from .data import Dataset


def forward_batch(spec: ArchitectureSpec, weights: WeightSet, X: np.ndarray) -> list:
    """Activations u_0..u_N for row-stacked inputs (u_0 = X)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != spec.dims[0]:
        raise ValueError(f"input has dimension {X.shape[-1]}, expected {spec.dims[0]}")
    blocks = [X]
    for n in range(1, spec.num_hidden + 1):
        pre = np.zeros(X.shape[:-1] + (spec.dims[n],))
        for m, kind in spec.edges(n):
            if kind is EdgeKind.IDENTITY:
                pre += blocks[m]
            else:
                pre += blocks[m] @ weights.hidden[(n, m)].T
        blocks.append(np.maximum(pre, 0.0))
    return blocks


def forward(spec: ArchitectureSpec, weights: WeightSet, x: np.ndarray) -> list:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single vector; use forward_batch")
    return forward_batch(spec, weights, x)


def extract_features(spec, weights, X) -> np.ndarray:
    return forward_batch(spec, weights, X)[-1]


@dataclass
class LinearClassifier:
    weights: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, F: np.ndarray) -> np.ndarray:
        return np.asarray(F) @ self.weights.T + self.bias

    def predict(self, F: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(F), axis=1)]


def _binary_sq_hinge(Xa, y, reg, tol, max_iter):
    n, d = Xa.shape
    w = np.zeros(d)

    def value(w):
        slack = np.maximum(0.0, 1.0 - y * (Xa @ w))
        return 0.5 * reg * (w @ w) + (slack @ slack) / n

    f = value(w)
    for it in range(max_iter):
        margin = y * (Xa @ w)
        act = margin < 1.0
        XA = Xa[act]
        grad = reg * w - (2.0 / n) * (XA.T @ (y[act] * (1.0 - margin[act])))
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol:
            return w, it, gnorm
        # generalized Newton step on the active set
        H = (2.0 / n) * (XA.T @ XA)
        H[np.diag_indices_from(H)] += reg
        step = np.linalg.solve(H, grad)
        alpha, slope = 1.0, grad @ step
        while True:
            cand = w - alpha * step
            fc = value(cand)
            if fc <= f - 1e-4 * alpha * slope or alpha < 1e-12:
                break
            alpha *= 0.5
        w, f = cand, fc
    return w, max_iter, gnorm


def fit_linear_svm(features: np.ndarray, labels: np.ndarray, reg: float = 1e-3,
                   tol: float = 1e-5, max_iter: int = 200) -> LinearClassifier:
    """One-vs-rest L2-regularized squared-hinge SVM; the bias rides on a constant feature.

    Per-class objective: reg/2 ||w||^2 + mean_i max(0, 1 - y_i w.x_i)^2,
    minimized by a generalized Newton method until ||grad|| <= tol.
    """
    if reg <= 0:
        raise ValueError("reg must be positive")
    F = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes to train a classifier")
    Xa = np.hstack([F, np.ones((F.shape[0], 1))])
    Ws, iters, gnorms = [], [], []
    for c in classes:
        y = np.where(labels == c, 1.0, -1.0)
        w, it, g = _binary_sq_hinge(Xa, y, reg, tol, max_iter)
        Ws.append(w)
        iters.append(it)
        gnorms.append(g)
    Ws = np.array(Ws)
    return LinearClassifier(Ws[:, :-1], Ws[:, -1], classes,
                            {"reg": reg, "newton_iters": iters, "grad_norms": gnorms})


SVM_REG_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


def select_svm_reg(features, labels, grid=SVM_REG_GRID, holdout: float = 0.2,
                   seed: int = 0) -> tuple:
    """Pick reg by error on a stratified holdout carved from the training set.

    Returns (best reg, {reg: holdout error}). Ties go to the larger reg.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    val = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = int(round(holdout * len(idx)))
        val[rng.choice(idx, size=min(k, len(idx) - 1), replace=False)] = True
    F = np.asarray(features, dtype=np.float64)
    errors = {}
    for reg in sorted(grid, reverse=True):
        clf = fit_linear_svm(F[~val], labels[~val], reg)
        errors[reg] = float(np.mean(clf.predict(F[val]) != labels[val]))
    best = min(errors, key=lambda r: (errors[r], -r))
    return best, errors


@dataclass
class EvalMetrics:
    error: float
    n: int
    per_class_total: dict
    per_class_correct: dict

    def per_class_accuracy(self) -> dict:
        return {c: self.per_class_correct[c] / t for c, t in self.per_class_total.items() if t}

    def to_dict(self) -> dict:
        return {"error": self.error, "n": self.n,
                "per_class_total": {str(k): v for k, v in self.per_class_total.items()},
                "per_class_correct": {str(k): v for k, v in self.per_class_correct.items()},
                "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy().items()}}


def score(predicted: np.ndarray, labels: np.ndarray) -> EvalMetrics:
    labels = np.asarray(labels)
    correct = predicted == labels
    total, right = {}, {}
    for c in np.unique(labels):
        sel = labels == c
        total[int(c)] = int(sel.sum())
        right[int(c)] = int(correct[sel].sum())
    return EvalMetrics(float(1.0 - correct.mean()), int(len(labels)), total, right)


def evaluate(spec, weights, classifier: LinearClassifier, dataset: Dataset) -> EvalMetrics:
    """Top-1 error of ``classifier`` on the network's last hidden features."""
    F = extract_features(spec, weights, dataset.features)
    return score(classifier.predict(F), dataset.labels)


def ideal_decision(spec, weights, gammas, x, tol=1e-10, max_iter=20000) -> tuple:
    """Label minimizing the lifted objective over u for each candidate label.

    Solves one NNQP per class, so it is only usable on tiny networks. Returns
    (label, per-label objective values).
    """
    from .lifting import LiftedQuadratic, one_hot
    from .solvers import NnqpProblem, solve_nnqp

    q = LiftedQuadratic(spec, weights.hidden, gammas)
    V = weights.classifier
    N = spec.num_hidden
    D = spec.lifted_dim
    free = np.ones(D, dtype=bool)
    free[:spec.dims[0]] = False
    VtV = V.T @ V
    dN = spec.feature_dim

    def apply(X):
        out = np.concatenate(q.apply([X[:, o:o + d] for o, d in zip(spec.offsets(), spec.dims[:-1])]),
                             axis=1)
        out[:, D - dN:] += X[:, D - dN:] @ VtV
        return out

    start = np.concatenate(forward(spec, weights, x))
    values = []
    for y in one_hot(np.arange(spec.num_classes), spec.num_classes):
        b = np.zeros(D)
        b[D - dN:] = V.T @ y
        r = solve_nnqp(NnqpProblem(apply, b, free), start, tol, max_iter)
        u = r.x
        uN = u[D - dN:]
        values.append(0.5 * float(np.sum((y - V @ uN) ** 2)) + 0.5 * float(q.quadratic_form(u)))
    values = np.array(values)
    return int(np.argmin(values)), values


# ---------------------------------------------------------------------------
# weight files
#
# Little-endian throughout.
#   4 bytes   magic b"LNWT"
#   u32       format version (1)
#   u32       L = number of layers including input and output (N + 2)
#   u32 * L   dims d_0..d_{N+1}
#   u32       E = number of edges
#   E * (u32 n, u32 m, u8 kind)   kind 0 = learnable, 1 = identity; ordered by n then
#                                 the layer's input order
#   body      float64 row-major: each learnable W_{n,m} in edge order, then V

MAGIC = b"LNWT"
VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(path, spec: ArchitectureSpec, weights: WeightSet) -> None:
    problems = weights.matches(spec)
    if problems:
        raise WeightFileError("; ".join(problems))
    edges = [(n, m, k) for n in range(1, spec.num_hidden + 1) for m, k in spec.edges(n)]
    parts = [MAGIC, struct.pack("<II", VERSION, len(spec.dims)),
             struct.pack(f"<{len(spec.dims)}I", *spec.dims), struct.pack("<I", len(edges))]
    for n, m, k in edges:
        parts.append(struct.pack("<IIB", n, m, 0 if k is EdgeKind.LEARNABLE else 1))
    for n, m, k in edges:
        if k is EdgeKind.LEARNABLE:
            parts.append(np.ascontiguousarray(weights.hidden[(n, m)], dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(weights.classifier, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> tuple:
    """Read a weight file; returns (ArchitectureSpec from the header, WeightSet)."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise WeightFileError(f"{path}: truncated weight file")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    if raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic)")
    pos = 4
    version, L = take("<II")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    if not 3 <= L <= 10_000:
        raise WeightFileError(f"{path}: implausible layer count {L}")
    dims = take(f"<{L}I")
    (E,) = take("<I")
    edges = [take("<IIB") for _ in range(E)]
    inputs = [[] for _ in range(L - 2)]
    for n, m, k in edges:
        if not 1 <= n <= L - 2 or k not in (0, 1):
            raise WeightFileError(f"{path}: bad edge record ({n}, {m}, {k})")
        inputs[n - 1].append((m, EdgeKind.LEARNABLE if k == 0 else EdgeKind.IDENTITY))
    try:
        spec = check(ArchitectureSpec(dims, inputs))
    except ValueError as exc:
        raise WeightFileError(f"{path}: invalid architecture in header: {exc}") from None

    def matrix(r, c):
        nonlocal pos
        size = r * c * 8
        if pos + size > len(raw):
            raise WeightFileError(f"{path}: truncated weight file")
        a = np.frombuffer(raw, dtype="<f8", count=r * c, offset=pos).reshape(r, c)
        pos += size
        return a.astype(np.float64)

    hidden = {}
    for n, m, k in edges:
        if k == 0:
            hidden[(n, m)] = matrix(dims[n], dims[m])
    V = matrix(dims[-1], dims[-2])
    if pos != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - pos} trailing bytes")
    weights = WeightSet(hidden, V)
    if not weights.is_finite():
        raise WeightFileError(f"{path}: non-finite weights")
    return spec, weights
