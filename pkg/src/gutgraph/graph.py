"""Sample-similarity graphs from abundance profiles.

One relation graph per distance metric: pairwise distances are min-max
rescaled to [0, 1] over the off-diagonal entries and an undirected edge
is drawn wherever the rescaled distance falls strictly below a
threshold. Self-loops enter only later, inside the symmetric degree
normalization (A + I).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class GraphBuildError(ValueError):
    """Raised when a relation graph cannot be constructed."""


class DistanceKind(enum.Enum):
    BRAY_CURTIS = "bray_curtis"
    EUCLIDEAN = "euclidean"
    CANBERRA = "canberra"


# Fixed iteration order for everything that loops over relation types.
ALL_KINDS: tuple[DistanceKind, ...] = (
    DistanceKind.BRAY_CURTIS, DistanceKind.EUCLIDEAN, DistanceKind.CANBERRA)


def bray_curtis(m: np.ndarray, n: np.ndarray) -> float:
    """sum|m_i - n_i| / (sum m + sum n); undefined when both profiles
    are all zero."""
    denom = m.sum() + n.sum()
    if denom == 0:
        raise GraphBuildError("bray-curtis undefined for two all-zero profiles")
    return float(np.abs(m - n).sum() / denom)


def euclidean(m: np.ndarray, n: np.ndarray) -> float:
    d = m - n
    return float(np.sqrt((d * d).sum()))


def canberra(m: np.ndarray, n: np.ndarray) -> float:
    """sum over features of |m_i - n_i| / (|m_i| + |n_i|), with 0/0
    terms contributing zero."""
    num = np.abs(m - n)
    den = np.abs(m) + np.abs(n)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(terms.sum())


_METRICS = {
    DistanceKind.BRAY_CURTIS: bray_curtis,
    DistanceKind.EUCLIDEAN: euclidean,
    DistanceKind.CANBERRA: canberra,
}


def pairwise_distances(values: np.ndarray, kind: DistanceKind) -> np.ndarray:
    """Dense symmetric distance matrix with an exactly-zero diagonal."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n < 2:
        raise GraphBuildError(f"need at least 2 samples, got {n}")
    metric = _METRICS[kind]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = metric(values[i], values[j])
            out[i, j] = d
            out[j, i] = d
    return out


@dataclass
class RelationGraph:
    """One undirected relation type: binary adjacency, no self-loops."""

    kind: DistanceKind
    adjacency: np.ndarray
    threshold: float

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphBuildError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise GraphBuildError("adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise GraphBuildError("adjacency must have an empty diagonal")
        self.adjacency = a

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum()) // 2


def build_relation_graph(distances: np.ndarray, kind: DistanceKind,
                         threshold: float = 0.6) -> RelationGraph:
    """Threshold min-max rescaled distances into a relation graph.

    The rescale uses only off-diagonal entries; an edge (i, j), i != j,
    exists iff (d_ij - min) / (max - min) < threshold, strictly. A
    degenerate matrix whose off-diagonal distances are all equal has no
    usable scale and is rejected.
    """
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n or n < 2:
        raise GraphBuildError(f"distances must be square with n >= 2, got {d.shape}")
    if not np.array_equal(d, d.T):
        raise GraphBuildError("distance matrix must be symmetric")
    if np.any(np.diag(d) != 0):
        raise GraphBuildError("distance matrix must have a zero diagonal")
    if not (0.0 < threshold < 1.0):
        raise GraphBuildError(f"threshold must lie in (0, 1), got {threshold}")
    off = ~np.eye(n, dtype=bool)
    lo = d[off].min()
    hi = d[off].max()
    if lo == hi:
        raise GraphBuildError(
            f"all off-diagonal {kind.value} distances equal {lo}; "
            "no scale to threshold against")
    rescaled = (d - lo) / (hi - lo)
    adjacency = (rescaled < threshold) & off
    return RelationGraph(kind, adjacency, threshold)


@dataclass
class NormalizedAdjacency:
    """Symmetric degree-normalized adjacency with self-loops folded in:
    D^(-1/2) (A + I) D^(-1/2)."""

    matrix: np.ndarray


def normalize_adjacency(graph: RelationGraph) -> NormalizedAdjacency:
    a_hat = graph.adjacency.astype(np.float64) + np.eye(graph.n_nodes)
    deg = a_hat.sum(axis=1)
    # entry (i, j) becomes a_hat_ij / sqrt(deg_i * deg_j)
    return NormalizedAdjacency(a_hat / np.sqrt(np.outer(deg, deg)))


def shuffle_features(values: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Corruption step: permute feature rows across nodes.

    Returns (shuffled, permutation) with shuffled[i] = values[perm[i]].
    The identity permutation is resampled away whenever N >= 2, so the
    corrupted view never equals the original pairing.
    """
    values = np.asarray(values)
    n = values.shape[0]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    while n >= 2 and np.array_equal(perm, np.arange(n)):
        perm = rng.permutation(n)
    return values[perm].copy(), perm


@dataclass
class MultiGraph:
    """Shared node features plus one relation graph per distance kind,
    along with the corruption permutation used for the shuffled view."""

    features: np.ndarray
    relations: dict[DistanceKind, RelationGraph]
    shuffle_permutation: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        for kind, g in self.relations.items():
            if g.n_nodes != n:
                raise GraphBuildError(
                    f"{kind.value} graph has {g.n_nodes} nodes for {n} samples")
        if sorted(self.shuffle_permutation.tolist()) != list(range(n)):
            raise GraphBuildError("shuffle_permutation is not a permutation of [0, N)")

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def kinds(self) -> tuple[DistanceKind, ...]:
        return tuple(k for k in ALL_KINDS if k in self.relations)

    def shuffled_features(self) -> np.ndarray:
        return self.features[self.shuffle_permutation].copy()


def build_multigraph(values: np.ndarray, threshold: float = 0.6, seed: int = 0,
                     kinds: tuple[DistanceKind, ...] = ALL_KINDS) -> MultiGraph:
    values = np.asarray(values, dtype=np.float64)
    relations = {}
    for kind in kinds:
        d = pairwise_distances(values, kind)
        relations[kind] = build_relation_graph(d, kind, threshold)
    _, perm = shuffle_features(values, seed)
    return MultiGraph(values.copy(), relations, perm)


def edge_list_lines(graph: RelationGraph) -> list[str]:
    """Tab-separated `i<TAB>j` lines, i < j, sorted."""
    i_idx, j_idx = np.nonzero(np.triu(graph.adjacency, k=1))
    return [f"{i}\t{j}" for i, j in zip(i_idx.tolist(), j_idx.tolist())]


def edge_list_sidecar(graph: RelationGraph) -> dict:
    """Metadata written next to an exported edge list."""
    return {
        "relation": graph.kind.value,
        "threshold": graph.threshold,
        "n_nodes": graph.n_nodes,
        "n_edges": graph.n_edges,
    }
