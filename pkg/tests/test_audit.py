"""Change-vector layouts, rank tests, and environment counting."""

import itertools

import numpy as np
import pytest

from crl.audit import (
    ancestrally_closed_subsets,
    audit_all_subsets,
    build_vector,
    env_count_report,
    rank_test,
    required_environments,
    vector_layout,
)
from crl.graphs import Dag, all_dags, chain, collider3, empty, induced_subdag, moralize, sinks
from crl.oracle import model_grid
from crl.synth import sample_sem


def bf_layout_sizes(sub, kind):
    """Brute-force block sizes straight from the definitions."""
    n = sub.n
    # recompute moral adjacency without using moralize(): skeleton + co-parents
    moral_pairs = set()
    for i in range(n):
        for j in range(i + 1, n):
            skel = bool(sub.edges[i, j] or sub.edges[j, i])
            co = any(sub.edges[c, i] and sub.edges[c, j] for c in range(n))
            if skel or co:
                moral_pairs.add((i, j))
    sink_set = {i for i in range(n) if not any(sub.edges[:, i])}
    first = n
    diag2 = n
    cross2 = len(moral_pairs)
    diag3 = n - len(sink_set)
    if kind == "w_anm":
        mixed3 = sum(1 for i, j in moral_pairs if i not in sink_set)
    else:
        mixed3 = len(moral_pairs)
    tri3 = sum(
        1
        for a, b, c in itertools.combinations(range(n), 3)
        if {(a, b), (b, c), (a, c)} <= moral_pairs
    )
    if kind == "tau":
        return first + diag2 + cross2
    return first + diag2 + cross2 + diag3 + mixed3 + tri3


class TestLayout:
    def test_chain_singleton_tau(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=0)
        v = build_vector(spec, [0], 0, np.array([0.2]), "tau")
        assert len(v.entries) == 2
        assert v.layout == (("d1", (0,)), ("d2", (0, 0)))

    def test_chain_full_tau_length(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=0)
        v = build_vector(spec, [0, 1, 2], 0, np.zeros(3), "tau")
        assert len(v.entries) == 2 * 3 + 2

    def test_chain_full_w_anm_blocks(self):
        layout = vector_layout(chain(), "w_anm")
        orders = [o for o, _ in layout]
        assert orders == ["d1"] * 3 + ["d2"] * 5 + ["d3"] * 4
        d3 = [idx for o, idx in layout if o == "d3"]
        # non-sink cubes then mixed entries over moral edges with non-sink square
        assert d3 == [(0, 0, 0), (1, 1, 1), (0, 0, 1), (1, 1, 2)]

    def test_both_orderings_flag_adds_reversed_entries(self):
        base = vector_layout(chain(), "w_anm")
        more = vector_layout(chain(), "w_anm", both_orderings=True)
        assert len(more) == len(base) + 1  # edge {1,2}: position 1 non-sink adds (1,1,0)
        assert ("d3", (1, 1, 0)) in more

    def test_hnm_mixed_covers_all_edges(self):
        layout = vector_layout(collider3(), "w_hnm")
        mixed = [idx for o, idx in layout if o == "d3" and len(set(idx)) == 2]
        assert len(mixed) == 3  # triangle moral graph: every edge contributes

    def test_tau_size_matches_brute_force_all_small_dags(self):
        for n in (1, 2, 3, 4):
            for g in all_dags(n):
                for subset in ancestrally_closed_subsets(g):
                    sub, _ = induced_subdag(g, subset)
                    assert len(vector_layout(sub, "tau")) == bf_layout_sizes(sub, "tau")
                    assert len(vector_layout(sub, "tau")) == 2 * sub.n + moralize(sub).num_edges()

    def test_w_sizes_match_brute_force(self):
        for g in all_dags(3):
            for kind in ("w_anm", "w_hnm"):
                assert len(vector_layout(g, kind)) == bf_layout_sizes(g, kind)

    def test_not_closed_subset_rejected(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=0)
        with pytest.raises(ValueError, match="ancestrally closed"):
            build_vector(spec, [1], 0, np.zeros(1), "tau")


class TestRankTest:
    def test_single_environment_fails(self):
        spec = sample_sem(chain(), 1, "anm", rng_seed=1)
        rep = rank_test(spec, [0, 1, 2], "tau", [0], np.zeros(3))
        assert rep.rank == 0 and not rep.passed

    def test_duplicated_environments_fail(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=2)
        rep = rank_test(spec, [0, 1, 2], "tau", [0, 0, 0], np.zeros(3))
        assert rep.rank == 0 and not rep.passed

    def test_generic_tanh_chain_passes(self):
        need = required_environments(chain())
        passes = 0
        for seed in range(5):
            spec = sample_sem(chain(), need, "anm", rng_seed=seed)
            z = model_grid(spec, 0, k=1, rng_seed=seed)[0]
            rep = rank_test(spec, [0, 1, 2], "tau", range(need), z)
            assert rep.required_rank == 8
            passes += rep.passed
        assert passes >= 4

    def test_rank_invariant_to_reference_environment(self):
        spec = sample_sem(chain(), 5, "anm", rng_seed=3)
        z = model_grid(spec, 0, k=1, rng_seed=3)[0]
        ranks = set()
        for ref in range(5):
            order = [ref] + [u for u in range(5) if u != ref]
            ranks.add(rank_test(spec, [0, 1, 2], "tau", order, z).rank)
        assert len(ranks) == 1

    def test_linear_mechanisms_never_reach_w_rank(self):
        # third-order blocks vanish identically for linear-Gaussian SEMs, so
        # any subset with a non-empty third block stays rank deficient
        for seed in range(5):
            spec = sample_sem(chain(), 20, "anm", rng_seed=seed, activation="identity")
            z = model_grid(spec, 0, k=1, rng_seed=seed)[0]
            rep = rank_test(spec, [0, 1, 2], "w_anm", range(20), z)
            v = build_vector(spec, [0, 1, 2], 0, z, "w_anm")
            third = [e for (o, _), e in zip(v.layout, v.entries) if o == "d3"]
            assert np.max(np.abs(third)) == 0.0
            assert not rep.passed
            assert rep.rank <= 8  # tau-part rank at most


class TestSubsetEnumeration:
    def test_chain_subsets(self):
        assert ancestrally_closed_subsets(chain()) == [(0,), (0, 1), (0, 1, 2)]

    def test_empty_graph_all_subsets(self):
        assert len(ancestrally_closed_subsets(empty(3))) == 7

    def test_collider_subsets(self):
        assert ancestrally_closed_subsets(collider3()) == [(0,), (2,), (0, 2), (0, 1, 2)]

    def test_refusal_beyond_bound(self):
        with pytest.raises(ValueError, match="12"):
            ancestrally_closed_subsets(empty(13))

    def test_audit_all_subsets_counts(self):
        spec = sample_sem(collider3(), 3, "anm", rng_seed=5)
        pts = model_grid(spec, 0, k=2, rng_seed=0)
        reports = audit_all_subsets(spec, range(3), pts, kinds=("tau",))
        assert len(reports) == 4 * 2


class TestEnvironmentCount:
    def test_chain3(self):
        assert required_environments(chain()) == 14

    def test_collider3(self):
        assert required_environments(collider3()) == 18

    def test_single_node(self):
        assert required_environments(empty(1)) == 2

    def test_report_includes_literal_counts(self):
        rep = env_count_report(chain())
        assert rep["formula_count"] == 14
        assert rep["literal_count"] == len(vector_layout(chain(), "w_anm")) + 1
        assert rep["literal_count"] == 13
        assert rep["literal_count_both_orderings"] == 14

    def test_collider_discrepancy_documented(self):
        rep = env_count_report(collider3())
        assert rep["formula_count"] == 18
        assert rep["literal_count"] == 15  # stated index set is smaller here
