"""Layered DAG architectures with multi-input ReLU units, and weight storage.

Layer 0 is the input, layers 1..N are hidden ReLU layers and layer N+1 is the
linear classifier. Hidden layer ``n`` sums contributions from the layers in its
input set; each incoming edge is either a learnable matrix or an unweighted
identity skip (which requires equal widths).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EdgeKind(enum.Enum):
    LEARNABLE = "learnable"
    IDENTITY = "identity"


class ArchitectureError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ArchitectureSpec:
    """``dims`` is d_0..d_{N+1}; ``inputs[n-1]`` lists (m, kind) edges into hidden layer n."""

    dims: tuple
    inputs: tuple

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "inputs", tuple(
            tuple((int(m), EdgeKind(k)) for m, k in layer) for layer in self.inputs))

    @property
    def num_hidden(self) -> int:
        return len(self.dims) - 2

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    @property
    def feature_dim(self) -> int:
        return self.dims[-2]

    @property
    def lifted_dim(self) -> int:
        return sum(self.dims[:-1])

    def offsets(self) -> list:
        """Start offset of each block u_0..u_N inside the concatenated lifted vector."""
        return list(np.cumsum([0] + list(self.dims[:-2])))

    def edges(self, n: int) -> tuple:
        return self.inputs[n - 1]

    def learnable_edges(self) -> list:
        return [(n, m) for n in range(1, self.num_hidden + 1)
                for m, k in self.edges(n) if k is EdgeKind.LEARNABLE]

    def identity_edges(self) -> list:
        return [(n, m) for n in range(1, self.num_hidden + 1)
                for m, k in self.edges(n) if k is EdgeKind.IDENTITY]

    def children(self, m: int) -> list:
        """Hidden layers that read from layer ``m``, with the edge kind."""
        return [(n, k) for n in range(m + 1, self.num_hidden + 1)
                for mm, k in self.edges(n) if mm == m]


def validate(spec: ArchitectureSpec) -> list:
    """Return a list of problems; empty means the architecture is usable."""
    problems = []
    N = spec.num_hidden
    if N < 1:
        problems.append("need at least one hidden layer (dims must have >= 3 entries)")
        return problems
    if any(d < 1 for d in spec.dims):
        problems.append(f"all dims must be positive, got {list(spec.dims)}")
    if len(spec.inputs) != N:
        problems.append(f"expected input sets for {N} hidden layers, got {len(spec.inputs)}")
        return problems
    for n in range(1, N + 1):
        edges = spec.edges(n)
        if not edges:
            problems.append(f"layer {n}: empty input set")
        seen = set()
        for m, kind in edges:
            if m in seen:
                problems.append(f"layer {n}: duplicate input {m}")
            seen.add(m)
            if m >= n or m < 0:
                problems.append(f"layer {n}: cyclic reference to layer {m} (inputs must be < {n})")
                continue
            if kind is EdgeKind.IDENTITY and spec.dims[n] != spec.dims[m]:
                problems.append(
                    f"layer {n}: identity edge from {m} has dim mismatch "
                    f"({spec.dims[n]} != {spec.dims[m]})")
    return problems


def check(spec: ArchitectureSpec) -> ArchitectureSpec:
    problems = validate(spec)
    if problems:
        raise ArchitectureError(problems)
    return spec


@dataclass(frozen=True)
class WeightSet:
    """Learnable hidden matrices keyed by (n, m) plus the classifier V.

    Arrays are marked read-only; updates build a new WeightSet.
    """

    hidden: dict
    classifier: np.ndarray

    def __post_init__(self):
        frozen = {}
        for key in sorted(self.hidden):
            a = np.array(self.hidden[key], dtype=np.float64)
            a.setflags(write=False)
            frozen[tuple(key)] = a
        V = np.array(self.classifier, dtype=np.float64)
        V.setflags(write=False)
        object.__setattr__(self, "hidden", frozen)
        object.__setattr__(self, "classifier", V)

    def replace(self, hidden=None, classifier=None) -> "WeightSet":
        return WeightSet(self.hidden if hidden is None else hidden,
                         self.classifier if classifier is None else classifier)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.hidden.values()) and bool(
            np.all(np.isfinite(self.classifier)))

    def matches(self, spec: ArchitectureSpec) -> list:
        """Shape/key mismatches against ``spec`` (empty when consistent)."""
        problems = []
        expected = spec.learnable_edges()
        if sorted(self.hidden) != sorted(expected):
            problems.append(f"weight keys {sorted(self.hidden)} != learnable edges {expected}")
        for (n, m), w in self.hidden.items():
            if n <= spec.num_hidden and m < len(spec.dims) and w.shape != (spec.dims[n], spec.dims[m]):
                problems.append(f"W[{n},{m}] has shape {w.shape}, expected {(spec.dims[n], spec.dims[m])}")
        if self.classifier.shape != (spec.num_classes, spec.feature_dim):
            problems.append(f"V has shape {self.classifier.shape}, "
                            f"expected {(spec.num_classes, spec.feature_dim)}")
        return problems


def init_weights(spec: ArchitectureSpec, seed: int, scale: float = 0.01, *,
                 sparse: bool = False, radius: float = 1.0,
                 classifier_scale: float | None = None) -> WeightSet:
    """I.i.d. uniform[-scale, scale] weights; rows projected onto the l1 ball when sparse.

    With a large ``scale`` the projection keeps only a handful of entries per
    row, which gives a sparse feasible start. ``classifier_scale`` (default
    ``scale``) sets the range for V separately.
    """
    check(spec)
    rng = np.random.default_rng(seed)
    hidden = {}
    for n, m in spec.learnable_edges():
        w = rng.uniform(-scale, scale, size=(spec.dims[n], spec.dims[m]))
        if sparse:
            from .solvers import project_l1_rows
            w = project_l1_rows(w, radius)
        hidden[(n, m)] = w
    cs = scale if classifier_scale is None else classifier_scale
    V = rng.uniform(-cs, cs, size=(spec.num_classes, spec.feature_dim))
    return WeightSet(hidden, V)


# ---------------------------------------------------------------------------
# plain-text config
#
#   # comment
#   dims = 784 784 784 784 10
#   layer 1 = 0
#   layer 2 = 0:identity 1
#   layer 3 = 0:identity 1:identity 2
#
# An input written without a kind is learnable. Every hidden layer 1..N must
# have a "layer n" line; N is implied by dims.

def parse_arch(text: str) -> ArchitectureSpec:
    dims = None
    layers = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArchitectureError([f"line {lineno}: expected 'key = value'"])
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "dims":
                dims = [int(tok) for tok in value.replace(",", " ").split()]
            elif key.startswith("layer"):
                n = int(key.split()[1])
                edges = []
                for tok in value.replace(",", " ").split():
                    m, _, kind = tok.partition(":")
                    edges.append((int(m), EdgeKind(kind or "learnable")))
                layers[n] = edges
            else:
                raise ArchitectureError([f"line {lineno}: unknown key {key!r}"])
        except (ValueError, IndexError) as exc:
            if isinstance(exc, ArchitectureError):
                raise
            raise ArchitectureError([f"line {lineno}: {exc}"]) from None
    if dims is None:
        raise ArchitectureError(["missing 'dims'"])
    N = len(dims) - 2
    missing = [n for n in range(1, N + 1) if n not in layers]
    extra = [n for n in layers if not 1 <= n <= N]
    if missing or extra:
        raise ArchitectureError([f"layer lines missing for {missing}" if missing else
                                 f"layer lines out of range: {extra}"])
    return ArchitectureSpec(tuple(dims), tuple(tuple(layers[n]) for n in range(1, N + 1)))


def format_arch(spec: ArchitectureSpec) -> str:
    lines = ["dims = " + " ".join(str(d) for d in spec.dims)]
    for n in range(1, spec.num_hidden + 1):
        toks = [str(m) if k is EdgeKind.LEARNABLE else f"{m}:{k.value}" for m, k in spec.edges(n)]
        lines.append(f"layer {n} = " + " ".join(toks))
    return "\n".join(lines) + "\n"


def load_arch(path) -> ArchitectureSpec:
    return check(parse_arch(Path(path).read_text()))


def fig2_spec(width: int = 784, input_dim: int = 784, classes: int = 10) -> ArchitectureSpec:
    """Three hidden layers with skip edges from the input and from layer 1.

    u1 = relu(W10 x), u2 = relu(x + W21 u1), u3 = relu(x + u1 + W32 u2). When the
    hidden width differs from the input width, the input skips cannot be
    identities and become learnable matrices instead.
    """
    skip = EdgeKind.IDENTITY if width == input_dim else EdgeKind.LEARNABLE
    L, I = EdgeKind.LEARNABLE, EdgeKind.IDENTITY
    return ArchitectureSpec(
        (input_dim, width, width, width, classes),
        (((0, L),), ((0, skip), (1, L)), ((0, skip), (1, I), (2, L))),
    )
