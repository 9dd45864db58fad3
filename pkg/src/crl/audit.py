"""Sufficient-change audits: derivative change vectors and rank tests.

For an ancestrally closed subset the marginal density equals the product
of the subset nodes' conditionals, so derivative vectors are evaluated
exactly on the induced sub-SEM.  The tau vector stacks first-order,
second-diagonal and Markov-edge cross entries; the w vectors extend it
with third-order blocks whose index sets depend on the model class.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .graphs import Dag, induced_subdag, is_ancestrally_closed, moralize, sinks
from .oracle import derivatives_analytic
from .synth import SemSpec

MAX_AUDIT_NODES = 12  # closed-subset enumeration is exponential

KINDS = ("tau", "w_anm", "w_hnm")


def induced_sub_sem(spec: SemSpec, subset) -> tuple[SemSpec, list[int]]:
    """Sub-SEM over an ancestrally closed subset (marginal is exact)."""
    if not is_ancestrally_closed(spec.graph, subset):
        raise ValueError(f"subset {sorted(subset)} is not ancestrally closed")
    sub_graph, keep = induced_subdag(spec.graph, subset)
    envs = tuple(tuple(env[i] for i in keep) for env in spec.envs)
    return SemSpec(sub_graph, spec.model_class, envs), keep


def vector_layout(sub_graph: Dag, kind: str, both_orderings: bool = False) -> list[tuple[str, tuple[int, ...]]]:
    """Entry descriptors, in block order, with local (subset) indices."""
    if kind not in KINDS:
        raise ValueError(f"unknown vector kind {kind!r}")
    n = sub_graph.n
    moral = moralize(sub_graph)
    edges = moral.edge_list()
    layout: list[tuple[str, tuple[int, ...]]] = []
    layout += [("d1", (i,)) for i in range(n)]
    layout += [("d2", (i, i)) for i in range(n)]
    layout += [("d2", e) for e in edges]
    if kind == "tau":
        return layout
    sink_set = sinks(sub_graph)
    layout += [("d3", (i, i, i)) for i in range(n) if i not in sink_set]
    for i, j in edges:
        if kind == "w_hnm" or i not in sink_set:
            layout.append(("d3", (i, i, j)))
        if kind == "w_anm" and both_orderings and j not in sink_set:
            layout.append(("d3", (j, j, i)))
    layout += [("d3", t) for t in moral.triangles()]
    return layout


@dataclass(frozen=True)
class ChangeVector:
    subset: tuple[int, ...]
    env: int
    kind: str
    entries: np.ndarray
    layout: tuple  # (order, original-index tuple) per entry

    def __post_init__(self):
        if len(self.entries) != len(self.layout):
            raise ValueError("entry count does not match layout")


def build_vector(spec: SemSpec, subset, u: int, z_prime: np.ndarray, kind: str,
                 both_orderings: bool = False) -> ChangeVector:
    """Derivative vector of the subset marginal at z_prime (subset order)."""
    sub_spec, keep = induced_sub_sem(spec, subset)
    z_prime = np.asarray(z_prime, dtype=float)
    if z_prime.shape != (len(keep),):
        raise ValueError(f"point must have one value per subset node, got {z_prime.shape}")
    layout = vector_layout(sub_spec.graph, kind, both_orderings)
    bundle = derivatives_analytic(sub_spec, u, z_prime)
    tensors = {"d1": bundle.grad, "d2": bundle.hess, "d3": bundle.third}
    entries = np.array([float(tensors[order][idx]) for order, idx in layout])
    global_layout = tuple((order, tuple(keep[k] for k in idx)) for order, idx in layout)
    return ChangeVector(tuple(keep), u, kind, entries, global_layout)


@dataclass(frozen=True)
class RankReport:
    subset: tuple[int, ...]
    kind: str
    point: np.ndarray
    num_envs: int
    singular_values: np.ndarray
    rank: int
    required_rank: int
    passed: bool

    def to_json_obj(self) -> dict:
        return {
            "subset": [i + 1 for i in self.subset],  # 1-based for reports
            "kind": self.kind,
            "point": self.point.tolist(),
            "num_envs": self.num_envs,
            "singular_values": self.singular_values.tolist(),
            "rank": self.rank,
            "required_rank": self.required_rank,
            "pass": self.passed,
        }


def rank_test(spec: SemSpec, subset, kind: str, envs, z_prime: np.ndarray,
              svd_tol: float = 1e-8, both_orderings: bool = False) -> RankReport:
    """Numeric rank of stacked difference vectors v(u_j) - v(u_0)."""
    envs = list(envs)
    vectors = [build_vector(spec, subset, u, z_prime, kind, both_orderings) for u in envs]
    required = len(vectors[0].entries)
    if len(envs) < 2:
        rows = np.zeros((0, required))
    else:
        rows = np.stack([v.entries - vectors[0].entries for v in vectors[1:]])
    if rows.size == 0 or not rows.any():
        sv = np.zeros(0)
        rank = 0
    else:
        sv = np.linalg.svd(rows, compute_uv=False)
        rank = int(np.sum(sv > svd_tol * sv[0]))
    return RankReport(
        subset=tuple(sorted(subset)),
        kind=kind,
        point=np.asarray(z_prime, dtype=float),
        num_envs=len(envs),
        singular_values=sv,
        rank=rank,
        required_rank=required,
        passed=rank >= required,
    )


def ancestrally_closed_subsets(g: Dag) -> list[tuple[int, ...]]:
    """All nonempty subsets closed under taking parents, sorted."""
    if g.n > MAX_AUDIT_NODES:
        raise ValueError(
            f"subset enumeration needs n <= {MAX_AUDIT_NODES}, got n = {g.n}"
        )
    out = []
    for r in range(1, g.n + 1):
        for combo in itertools.combinations(range(g.n), r):
            if is_ancestrally_closed(g, combo):
                out.append(combo)
    return out


def audit_all_subsets(spec: SemSpec, envs, points: np.ndarray, kinds=("tau",),
                      svd_tol: float = 1e-8, both_orderings: bool = False) -> list[RankReport]:
    """Rank tests for every ancestrally closed subset at each probe point.

    `points` has one row per probe point over the full latent vector; each
    subset reads its own coordinates."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    reports = []
    for subset in ancestrally_closed_subsets(spec.graph):
        for kind in kinds:
            for z in points:
                reports.append(
                    rank_test(spec, subset, kind, envs, z[list(subset)], svd_tol, both_orderings)
                )
    return reports


# -- environment counting --------------------------------------------------------

def required_environments(g: Dag) -> int:
    """Closed-form environment requirement:
    3n + 3|E(M)| + |triangles(M)| - 2|sinks| + 1."""
    m = moralize(g)
    return 3 * g.n + 3 * m.num_edges() + len(m.triangles()) - 2 * len(sinks(g)) + 1


def env_count_report(g: Dag) -> dict:
    """The closed-form count next to the literal |w|+1 counts (they can
    disagree; both are reported rather than adjudicated)."""
    return {
        "formula_count": required_environments(g),
        "literal_count": len(vector_layout(g, "w_anm")) + 1,
        "literal_count_both_orderings": len(vector_layout(g, "w_anm", both_orderings=True)) + 1,
        "literal_count_hnm": len(vector_layout(g, "w_hnm")) + 1,
    }
