"""Exact graph algorithms over latent indices.

Directed graphs use a (child, parent) adjacency convention: ``edges[i, j]``
is True when node j is a parent of node i (edge Z_j -> Z_i).  This matches
the estimator's gated adjacency matrix, where row i holds the incoming
edges of node i.  Indices are 0-based everywhere in code; human-facing
formatting (``node_label``) is 1-based.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np


class GraphDimensionError(ValueError):
    """Raised when two graphs with incompatible node counts are combined."""


def node_label(i: int) -> str:
    """1-based display name for a latent index, e.g. 0 -> 'Z1'."""
    return f"Z{i + 1}"


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over n latent nodes.

    ``edges[i, j]`` True means Z_j -> Z_i.  Construction validates
    acyclicity and the empty diagonal; instances are immutable.
    """

    n: int
    edges: np.ndarray = field(compare=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=bool)
        if e.shape != (self.n, self.n):
            raise GraphDimensionError(f"edge matrix shape {e.shape} != ({self.n}, {self.n})")
        if e.diagonal().any():
            raise ValueError("self-loops are not allowed")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)
        self.topological_order()  # raises if cyclic

    @classmethod
    def from_edge_list(cls, n: int, pairs) -> "Dag":
        """Build from (child, parent) pairs."""
        e = np.zeros((n, n), dtype=bool)
        for child, parent in pairs:
            e[child, parent] = True
        return cls(n, e)

    def __eq__(self, other):
        return isinstance(other, Dag) and self.n == other.n and bool(np.array_equal(self.edges, other.edges))

    def __hash__(self):
        return hash((self.n, self.edges.tobytes()))

    def parents(self, i: int) -> set[int]:
        return {int(v) for v in np.flatnonzero(self.edges[i])}

    def children(self, i: int) -> set[int]:
        return {int(v) for v in np.flatnonzero(self.edges[:, i])}

    def edge_list(self) -> list[tuple[int, int]]:
        """Sorted (child, parent) pairs."""
        return sorted((int(i), int(j)) for i, j in zip(*np.nonzero(self.edges)))

    def num_edges(self) -> int:
        return int(self.edges.sum())

    def topological_order(self) -> list[int]:
        """Kahn's algorithm with lowest-index tie-breaking (deterministic)."""
        indeg = self.edges.sum(axis=1).astype(int).copy()
        order: list[int] = []
        ready = sorted(np.flatnonzero(indeg == 0))
        while ready:
            v = ready.pop(0)
            order.append(int(v))
            for c in sorted(self.children(v)):
                indeg[c] -= 1
                if indeg[c] == 0:
                    # keep the frontier sorted so ties break on lowest index
                    ready = sorted(ready + [c])
        if len(order) != self.n:
            raise ValueError("graph contains a cycle")
        return order

    def to_json_obj(self) -> dict:
        return {"n": self.n, "edges": self.edge_list()}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Dag":
        return cls.from_edge_list(int(obj["n"]), obj["edges"])


@dataclass(frozen=True)
class UGraph:
    """Undirected graph: symmetric boolean adjacency, zero diagonal."""

    n: int
    edges: np.ndarray = field(compare=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=bool)
        if e.shape != (self.n, self.n):
            raise GraphDimensionError(f"edge matrix shape {e.shape} != ({self.n}, {self.n})")
        if not np.array_equal(e, e.T):
            raise ValueError("undirected adjacency must be symmetric")
        if e.diagonal().any():
            raise ValueError("self-loops are not allowed")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_edge_list(cls, n: int, pairs) -> "UGraph":
        e = np.zeros((n, n), dtype=bool)
        for i, j in pairs:
            e[i, j] = e[j, i] = True
        return cls(n, e)

    def __eq__(self, other):
        return isinstance(other, UGraph) and self.n == other.n and bool(np.array_equal(self.edges, other.edges))

    def __hash__(self):
        return hash((self.n, self.edges.tobytes()))

    def neighbors(self, i: int) -> set[int]:
        return {int(v) for v in np.flatnonzero(self.edges[i])}

    def edge_list(self) -> list[tuple[int, int]]:
        """Sorted (i, j) pairs with i < j."""
        return sorted((int(i), int(j)) for i, j in zip(*np.nonzero(self.edges)) if i < j)

    def num_edges(self) -> int:
        return len(self.edge_list())

    def triangles(self) -> list[tuple[int, int, int]]:
        """All i < j < k with the three pairwise edges present."""
        out = []
        for i, j, k in itertools.combinations(range(self.n), 3):
            if self.edges[i, j] and self.edges[j, k] and self.edges[i, k]:
                out.append((i, j, k))
        return out

    def is_subgraph_of(self, other: "UGraph") -> bool:
        if self.n != other.n:
            raise GraphDimensionError("node counts differ")
        return bool(np.all(~self.edges | other.edges))

    def to_json_obj(self) -> dict:
        return {"n": self.n, "edges": self.edge_list()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "UGraph":
        return cls.from_edge_list(int(obj["n"]), obj["edges"])


@dataclass(frozen=True)
class NodePermutation:
    """Bijection on {0..n-1}; mapping[i] is the image of i."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        m = tuple(int(v) for v in self.mapping)
        if sorted(m) != list(range(len(m))):
            raise ValueError(f"not a bijection on 0..{len(m) - 1}: {m}")
        object.__setattr__(self, "mapping", m)

    @classmethod
    def identity(cls, n: int) -> "NodePermutation":
        return cls(tuple(range(n)))

    def __call__(self, i: int) -> int:
        return self.mapping[i]

    def inverse(self) -> "NodePermutation":
        inv = [0] * len(self.mapping)
        for i, v in enumerate(self.mapping):
            inv[v] = i
        return NodePermutation(tuple(inv))

    def __len__(self):
        return len(self.mapping)


# --- canonical small graphs -------------------------------------------------

def chain(n: int = 3) -> Dag:
    """Z1 -> Z2 -> ... -> Zn."""
    return Dag.from_edge_list(n, [(i + 1, i) for i in range(n - 1)])


def collider3() -> Dag:
    """Z1 -> Z2 <- Z3."""
    return Dag.from_edge_list(3, [(1, 0), (1, 2)])


def pair3() -> Dag:
    """Z1 -> Z3 <- Z2 (two independent parents into the last node)."""
    return Dag.from_edge_list(3, [(2, 0), (2, 1)])


def empty(n: int) -> Dag:
    return Dag(n, np.zeros((n, n), dtype=bool))


# --- operations ---------------------------------------------------------------

def moralize(g: Dag) -> UGraph:
    """Skeleton plus edges between all co-parents (nodes sharing a child)."""
    e = np.zeros((g.n, g.n), dtype=bool)
    e |= g.edges | g.edges.T
    for i in range(g.n):
        pa = sorted(g.parents(i))
        for a, b in itertools.combinations(pa, 2):
            e[a, b] = e[b, a] = True
    return UGraph(g.n, e)


def sinks(g: Dag) -> set[int]:
    """Nodes with no children; nonempty for every DAG."""
    return {i for i in range(g.n) if not g.children(i)}


def surrounding_parents(g: Dag, i: int) -> set[int]:
    """Parents of Z_i that are parents of every child of Z_i."""
    ch = g.children(i)
    return {p for p in g.parents(i) if all(p in g.parents(c) for c in ch)}


def intimate_neighbors(m: UGraph, i: int) -> set[int]:
    """Neighbors of i adjacent to every other neighbor of i."""
    nb = m.neighbors(i)
    return {j for j in nb if all(m.edges[j, k] for k in nb if k != j)}


def ancestral_closure(g: Dag, s) -> set[int]:
    """Smallest superset of s closed under taking parents."""
    closed = set(s)
    frontier = list(closed)
    while frontier:
        v = frontier.pop()
        for p in g.parents(v):
            if p not in closed:
                closed.add(p)
                frontier.append(p)
    return closed


def is_ancestrally_closed(g: Dag, s) -> bool:
    s = set(s)
    return all(g.parents(v) <= s for v in s)


def induced_subdag(g: Dag, s) -> tuple[Dag, list[int]]:
    """Sub-DAG over sorted(s); returns (subgraph, original indices in order)."""
    keep = sorted(set(s))
    idx = np.asarray(keep, dtype=int)
    return Dag(len(keep), g.edges[np.ix_(idx, idx)].copy()), keep


def transitive_closure(g: Dag) -> Dag:
    """Edge (i, j) for every nonempty directed path Z_j -> ... -> Z_i."""
    reach = g.edges.copy()
    for k in range(g.n):
        reach |= reach[:, k][:, None] & reach[k, :][None, :]
    return Dag(g.n, reach)


def shd(a: Dag, b: Dag) -> int:
    """Structural Hamming distance: insertions + deletions + reversals."""
    if a.n != b.n:
        raise GraphDimensionError("node counts differ")
    d = 0
    for i, j in itertools.combinations(range(a.n), 2):
        ea = (bool(a.edges[i, j]), bool(a.edges[j, i]))
        eb = (bool(b.edges[i, j]), bool(b.edges[j, i]))
        if ea != eb:
            d += 1
    return d


def undirected_shd(a: UGraph, b: UGraph) -> int:
    if a.n != b.n:
        raise GraphDimensionError("node counts differ")
    return int(np.triu(a.edges ^ b.edges, 1).sum())


def relabel(g: Dag, p: NodePermutation) -> Dag:
    """Graph with node i renamed to p(i)."""
    if len(p) != g.n:
        raise GraphDimensionError("permutation length differs from node count")
    e = np.zeros((g.n, g.n), dtype=bool)
    for i, j in zip(*np.nonzero(g.edges)):
        e[p(int(i)), p(int(j))] = True
    return Dag(g.n, e)


def graphs_identical_under(p: NodePermutation, a: Dag, b: Dag) -> bool:
    """True iff edge Z_j->Z_i in a exactly when Z_p(j)->Z_p(i) in b."""
    if a.n != b.n:
        raise GraphDimensionError("node counts differ")
    return relabel(a, p) == b


def all_dags(n: int):
    """Every labelled DAG on n nodes (exhaustive; use only for small n)."""
    cells = [(i, j) for i in range(n) for j in range(n) if i != j]
    for bits in itertools.product([False, True], repeat=len(cells)):
        e = np.zeros((n, n), dtype=bool)
        for (i, j), b in zip(cells, bits):
            e[i, j] = b
        try:
            yield Dag(n, e)
        except ValueError:
            continue
