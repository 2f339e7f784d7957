"""Adjacency matrices and everything derived from them.

Plain numpy implementations are the reference used for data handling and
verification; the ``*_t`` variants mirror the same arithmetic on engine
tensors so graph refinement stays differentiable. Both paths share the
identical sequence of float operations, which lets the zero-gate identity
hold bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import numerics as nm

ROW_EPS = 1e-8

KIND_RAW = "raw"
KIND_SYMMETRIC = "symmetric"
KIND_STOCHASTIC = "stochastic"


class GraphError(ValueError):
    pass


@dataclass
class Adjacency:
    """Nonnegative K x K edge weights, tagged with how far they were normalized."""

    w: np.ndarray
    kind: str = KIND_RAW

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise GraphError(f"adjacency must be square, got {self.w.shape}")
        if (self.w < 0).any():
            raise GraphError("adjacency weights must be nonnegative")

    @property
    def k(self) -> int:
        return self.w.shape[0]


@dataclass
class MarkovFeatures:
    """Stacked transition powers: p[i, j, h] = (A^h)_ij, h = 0..hops-1."""

    k: int
    hops: int
    p: np.ndarray  # (K, K, hops)


def from_edge_list(k: int, edges, self_loops: bool = False) -> Adjacency:
    """Raw adjacency from (i, j, weight) triples; duplicates sum."""
    w = np.zeros((k, k), dtype=np.float64)
    for i, j, weight in edges:
        i, j = int(i), int(j)
        if not (0 <= i < k and 0 <= j < k):
            raise GraphError(f"edge index ({i}, {j}) out of range for k={k}")
        if weight < 0:
            raise GraphError(f"negative edge weight {weight} at ({i}, {j})")
        w[i, j] += float(weight)
    if self_loops:
        w[np.diag_indices(k)] += 1.0
    return Adjacency(w, KIND_RAW)


def symmetrize(a: Adjacency) -> Adjacency:
    return Adjacency((a.w + a.w.T) * 0.5, KIND_SYMMETRIC)


def row_normalize(a: Adjacency, eps: float = ROW_EPS) -> Adjacency:
    """Divide each row by its sum; near-zero rows become unit self-loops first."""
    w = a.w
    keep = (w.sum(axis=1, keepdims=True) >= eps).astype(np.float64)
    w = w * keep + np.eye(a.k) * (1.0 - keep)
    sums = w.sum(axis=1, keepdims=True)
    return Adjacency(w / sums, KIND_STOCHASTIC)


def markov_features(a: Adjacency, hops: int) -> MarkovFeatures:
    """Stack [I, A, A^2, ...] up to ``hops`` slices for a stochastic matrix."""
    if a.kind != KIND_STOCHASTIC:
        raise GraphError("markov_features needs a row-stochastic adjacency")
    if hops < 1:
        raise GraphError("hops must be >= 1")
    k = a.k
    slices = [np.eye(k)]
    for _ in range(hops - 1):
        slices.append(slices[-1] @ a.w)
    return MarkovFeatures(k=k, hops=hops, p=np.stack(slices, axis=2))


def shortest_path_distances(a: Adjacency, binarize_threshold: float = 0.0) -> np.ndarray:
    """BFS hop counts over edges with weight > threshold.

    Disconnected pairs get the finite sentinel K + 1 so distances can index
    a bias table directly.
    """
    k = a.k
    adj = a.w > binarize_threshold
    sentinel = k + 1
    dist = np.full((k, k), sentinel, dtype=np.int64)
    for src in range(k):
        dist[src, src] = 0
        frontier = [src]
        d = 0
        while frontier:
            d += 1
            nxt = []
            for u in frontier:
                for v in np.nonzero(adj[u])[0]:
                    if dist[src, v] == sentinel and v != src:
                        dist[src, v] = d
                        nxt.append(int(v))
            frontier = nxt
    return dist


def walk_probability_oracle(a: Adjacency, i: int, j: int, k: int) -> float:
    """Total probability over all length-k walks i -> j, by enumeration.

    Exponential in k; limited to small graphs so it can serve as an
    independent oracle for ``markov_features``.
    """
    if a.kind != KIND_STOCHASTIC:
        raise GraphError("oracle expects a stochastic adjacency")
    if a.k > 8 or k > 5:
        raise GraphError(f"oracle limits exceeded (K={a.k}, k={k})")
    if k == 0:
        return 1.0 if i == j else 0.0
    total = 0.0
    for middle in product(range(a.k), repeat=k - 1):
        path = (i, *middle, j)
        p = 1.0
        for u, v in zip(path[:-1], path[1:]):
            p *= a.w[u, v]
            if p == 0.0:
                break
        total += p
    return total


def permute(a: Adjacency, perm) -> Adjacency:
    perm = np.asarray(perm)
    return Adjacency(a.w[np.ix_(perm, perm)], a.kind)


# ---------------------------------------------------------------------------
# Differentiable twins (same arithmetic, on engine tensors)


def symmetrize_t(w: nm.Tensor) -> nm.Tensor:
    return nm.scale(nm.add(w, nm.transpose(w)), 0.5)


def row_normalize_t(w: nm.Tensor, eps: float = ROW_EPS) -> nm.Tensor:
    k = w.shape[0]
    keep = (w.values.sum(axis=1, keepdims=True) >= eps).astype(np.float64)
    w = nm.add(nm.mul(w, nm.constant(keep)), nm.constant(np.eye(k) * (1.0 - keep)))
    return nm.div(w, nm.row_sum(w))


def markov_stack_t(a_tilde: nm.Tensor, hops: int):
    """Tensor-valued [I, A, A^2, ...] power stack."""
    k = a_tilde.shape[0]
    slices = [nm.constant(np.eye(k))]
    for _ in range(hops - 1):
        slices.append(nm.matmul(slices[-1], a_tilde))
    return slices
