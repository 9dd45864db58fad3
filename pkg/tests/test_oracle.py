"""Log-density derivative oracle: closed forms, FD cross-checks, lemma claims."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from crl.graphs import Dag, chain, collider3, empty, moralize, sinks
from crl.oracle import (
    LOG_2PI,
    DerivativeBundle,
    DiffeoProbe,
    chain_rule_probe,
    check_lemma_sink,
    derivatives_analytic,
    derivatives_fd,
    fd_third_iij,
    log_density,
    markov_network_from_density,
    model_grid,
)
from crl.synth import (
    MechanismNet,
    NodeParams,
    ProfileError,
    SemSpec,
    sample_sem,
    softplus,
)


def standard_spec(graph, stds=None, means=None):
    stds = stds or [1.0] * graph.n
    means = means or [0.0] * graph.n
    nodes = tuple(
        NodeParams(
            MechanismNet(
                ((np.zeros((2, len(graph.parents(i)))), np.zeros(2)), (np.zeros((1, 2)), np.zeros(1))),
                "tanh",
            ),
            means[i],
            stds[i],
        )
        for i in range(graph.n)
    )
    return SemSpec(graph, "anm", (nodes,))


def linear_chain_spec(coeffs=(0.8, -1.1), means=(0.1, -0.4, 0.7), stds=(1.0, 0.6, 1.5)):
    """Linear-mechanism chain: Z1, Z2 = c1*Z1 + e, Z3 = c2*Z2 + e."""
    n = 3
    g = chain(n)
    nodes = []
    for i in range(n):
        arity = len(g.parents(i))
        W1 = np.full((1, arity), coeffs[i - 1] if arity else 0.0)
        net = MechanismNet(((W1, np.zeros(1)), (np.ones((1, 1)), np.zeros(1))), "identity")
        nodes.append(NodeParams(net, means[i], stds[i]))
    return SemSpec(g, "anm", (tuple(nodes),))


def tanh_pair_spec():
    """Z2 = tanh(Z1) + eps: one-unit tanh mechanism."""
    g = Dag.from_edge_list(2, [(1, 0)])
    root = MechanismNet(((np.zeros((1, 0)), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))), "tanh")
    mech = MechanismNet(((np.ones((1, 1)), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))), "tanh")
    return SemSpec(g, "anm", ((NodeParams(root, 0.0, 1.0), NodeParams(mech, 0.0, 0.7)),))


def random_dag(n, rng, p=0.5):
    order = rng.permutation(n)
    e = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < p:
                e[order[b], order[a]] = True
    return Dag(n, e)


def mild_tanh_spec(graph, seed=0):
    """tanh SEM with weights ~ Unif[-0.8, 0.8] and unit-ish noise scales,
    i.e. O(1) density derivatives."""
    rng = np.random.default_rng(seed)
    nodes = []
    for i in range(graph.n):
        arity = len(graph.parents(i))
        layers = (
            (rng.uniform(-0.8, 0.8, (4, arity)), rng.uniform(-0.8, 0.8, 4)),
            (rng.uniform(-0.8, 0.8, (1, 4)), rng.uniform(-0.8, 0.8, 1)),
        )
        nodes.append(NodeParams(MechanismNet(layers, "tanh"), 0.0, 1.0))
    return SemSpec(graph, "anm", (tuple(nodes),))


class TestLogDensity:
    def test_standard_normal_at_origin(self):
        spec = standard_spec(empty(3))
        assert log_density(spec, 0, np.zeros(3)) == pytest.approx(3 * (-0.5 * LOG_2PI), abs=1e-14)

    def test_linear_chain_matches_closed_form(self):
        spec = linear_chain_spec()
        B = np.zeros((3, 3))
        B[1, 0], B[2, 1] = 0.8, -1.1
        inv = np.linalg.inv(np.eye(3) - B)
        mean = inv @ np.array([0.1, -0.4, 0.7])
        cov = inv @ np.diag(np.array([1.0, 0.6, 1.5]) ** 2) @ inv.T
        rng = np.random.default_rng(0)
        for z in rng.normal(size=(5, 3)) * 2:
            expect = multivariate_normal(mean=mean, cov=cov).logpdf(z)
            assert log_density(spec, 0, z) == pytest.approx(expect, abs=1e-10)

    def test_hnm_constant_scale_reduces_to_anm(self):
        g = chain(2)
        raw = 0.3
        sigma = float(softplus(np.array(raw)) + 0.1)
        mech = MechanismNet(((np.ones((1, 1)), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))), "tanh")
        root = MechanismNet(((np.zeros((1, 0)), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))), "tanh")
        const_scale = lambda a: MechanismNet(
            ((np.zeros((1, a)), np.zeros(1)), (np.zeros((1, 1)), np.array([raw]))), "tanh"
        )
        anm = SemSpec(g, "anm", ((NodeParams(root, 0.0, sigma), NodeParams(mech, 0.0, sigma)),))
        hnm = SemSpec(
            g, "hnm",
            ((NodeParams(root, 0.0, sigma, const_scale(0)), NodeParams(mech, 0.0, sigma, const_scale(1))),),
        )
        z = np.array([0.4, -1.2])
        assert log_density(hnm, 0, z) == pytest.approx(log_density(anm, 0, z), abs=1e-14)

    def test_nonfinite_names_node(self):
        spec = standard_spec(empty(2), stds=[1.0, 1e-300])
        with pytest.raises(ValueError, match="Z2"):
            log_density(spec, 0, np.array([0.0, 1.0]))


class TestAnalyticDerivatives:
    def test_linear_profile_third_vanishes(self):
        spec = linear_chain_spec()
        rng = np.random.default_rng(1)
        for z in rng.normal(size=(5, 3)):
            b = derivatives_analytic(spec, 0, z)
            assert np.max(np.abs(b.third)) == 0.0

    def test_empty_graph_hessian(self):
        spec = standard_spec(empty(3), stds=[1.0, 0.5, 2.0], means=[0.3, 0.0, -0.2])
        z = np.array([0.1, -0.7, 1.3])
        b = derivatives_analytic(spec, 0, z)
        assert np.allclose(np.diag(b.hess), [-1.0, -4.0, -0.25], atol=1e-14)
        assert np.max(np.abs(b.hess - np.diag(np.diag(b.hess)))) == 0.0
        assert np.allclose(b.grad, -(z - np.array([0.3, 0.0, -0.2])) / np.array([1.0, 0.5, 2.0]) ** 2)

    def test_tanh_pair_cross_terms(self):
        spec = tanh_pair_spec()
        rng = np.random.default_rng(2)
        for z in rng.normal(size=(5, 2)):
            b = derivatives_analytic(spec, 0, z)
            assert abs(b.hess[0, 1]) > 1e-3
            assert b.third[1, 1, 0] == 0.0
            fd = derivatives_fd(spec, 0, z, h=1e-3)
            assert np.allclose(b.grad, fd.grad, atol=1e-6)
            assert np.allclose(b.hess, fd.hess, atol=1e-5)
            assert np.allclose(b.third, fd.third, atol=1e-4)

    def test_leaky_relu_profile_rejected(self):
        spec = sample_sem(chain(), 1, "anm", rng_seed=0, activation="leaky_relu")
        with pytest.raises(ProfileError):
            derivatives_analytic(spec, 0, np.zeros(3))

    @pytest.mark.parametrize("model_class", ["anm", "hnm"])
    def test_fd_agreement_random_specs(self, model_class):
        # Richardson-extrapolated central differences kill the h^2 term, so
        # the oracle stays sharp even where the density is very curved
        # (e.g. HNM scale close to its floor).
        rng = np.random.default_rng(3)
        for trial in range(5):
            g = random_dag(3, rng)
            spec = sample_sem(g, 2, model_class, rng_seed=100 + trial)
            z = model_grid(spec, 1, k=2, rng_seed=trial)[0]
            a = derivatives_analytic(spec, 1, z)
            coarse = derivatives_fd(spec, 1, z, h=2e-3)
            fine = derivatives_fd(spec, 1, z, h=1e-3)
            for field in ("grad", "hess", "third"):
                got = getattr(a, field)
                rich = (4 * getattr(fine, field) - getattr(coarse, field)) / 3
                scale = max(1.0, np.abs(got).max())
                assert np.allclose(got, rich, atol=1e-5 * scale)

    def test_symmetry(self):
        spec = sample_sem(collider3(), 1, "hnm", rng_seed=7)
        for z in model_grid(spec, 0, k=5, rng_seed=0):
            assert derivatives_analytic(spec, 0, z).max_asymmetry() <= 1e-10


class TestFiniteDifferences:
    def test_standard_normal_gradient(self):
        spec = standard_spec(empty(3))
        z = np.array([0.5, -1.0, 2.0])
        fd = derivatives_fd(spec, 0, z, h=1e-4)
        assert np.allclose(fd.grad, -z, atol=1e-7)

    def test_quadratic_third_small(self):
        spec = linear_chain_spec()
        fd = derivatives_fd(spec, 0, np.array([0.3, -0.2, 0.9]), h=1e-2)
        assert np.max(np.abs(fd.third)) < 1e-4

    def test_step_underflow(self):
        spec = standard_spec(empty(2))
        with pytest.raises(ValueError):
            derivatives_fd(spec, 0, np.array([1.0, 1.0]), h=1e-17)
        with pytest.raises(ValueError):
            derivatives_fd(spec, 0, np.array([1.0, 1.0]), h=0.0)

    def test_fd_bundle_is_symmetric_by_construction(self):
        spec = tanh_pair_spec()
        fd = derivatives_fd(spec, 0, np.array([0.2, 0.4]), h=1e-2)
        assert fd.max_asymmetry() == 0.0


class TestLemmaChecks:
    def test_anm_chain_sink_passes(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=11)
        grid = model_grid(spec, 0, k=10, rng_seed=1)
        rep = check_lemma_sink(spec, 0, grid, mode="analytic")
        assert rep["pass"]
        assert all(v["max_abs"] <= 1e-8 for v in rep["per_pair_max_abs"].values())
        rep_fd = check_lemma_sink(spec, 0, grid[:3], mode="fd")
        assert rep_fd["pass"]

    def test_hnm_collider_zero_only_off_parents(self):
        spec = sample_sem(collider3(), 1, "hnm", rng_seed=13)
        grid = model_grid(spec, 0, k=10, rng_seed=2)
        rep = check_lemma_sink(spec, 0, grid, mode="analytic")
        assert rep["pass"]
        per = rep["per_pair_max_abs"]
        assert per["(Z2,Z2,Z2)"]["claimed_zero"] and per["(Z2,Z2,Z2)"]["max_abs"] <= 1e-8
        assert not per["(Z2,Z2,Z1)"]["claimed_zero"]
        assert max(per["(Z2,Z2,Z1)"]["max_abs"], per["(Z2,Z2,Z3)"]["max_abs"]) > 1e-3

    def test_non_sink_third_nonzero(self):
        spec = sample_sem(chain(), 1, "anm", rng_seed=17)
        grid = model_grid(spec, 0, k=10, rng_seed=3)
        worst = max(abs(float(derivatives_analytic(spec, 0, z).third[0, 0, 1])) for z in grid)
        assert worst > 1e-8

    def test_fd_targeted_matches_full(self):
        spec = sample_sem(chain(), 1, "anm", rng_seed=19)
        z = model_grid(spec, 0, k=1, rng_seed=4)[0]
        full = derivatives_fd(spec, 0, z, h=1e-2)
        for i in range(3):
            for j in range(3):
                assert fd_third_iij(spec, 0, z, i, j, h=1e-2) == pytest.approx(
                    full.third[i, i, j], abs=1e-12
                )


class TestMarkovNetwork:
    def test_chain(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=23)
        m = markov_network_from_density(spec, range(2), model_grid(spec, 0, 10, rng_seed=0))
        assert m.edge_list() == [(0, 1), (1, 2)]

    def test_collider_triangle(self):
        spec = sample_sem(collider3(), 2, "anm", rng_seed=29)
        m = markov_network_from_density(spec, range(2), model_grid(spec, 0, 10, rng_seed=0))
        assert m.edge_list() == [(0, 1), (0, 2), (1, 2)]

    def test_empty(self):
        spec = sample_sem(empty(3), 1, "anm", rng_seed=31)
        m = markov_network_from_density(spec, [0], model_grid(spec, 0, 10, rng_seed=0))
        assert m.num_edges() == 0

    def test_always_subgraph_of_moral(self):
        rng = np.random.default_rng(37)
        for trial in range(10):
            g = random_dag(4, rng)
            spec = sample_sem(g, 2, "anm", rng_seed=200 + trial)
            m = markov_network_from_density(spec, range(2), model_grid(spec, 0, 8, rng_seed=trial))
            assert m.is_subgraph_of(moralize(g))

    def test_empty_grid_rejected(self):
        spec = sample_sem(empty(3), 1, "anm", rng_seed=31)
        with pytest.raises(ValueError):
            markov_network_from_density(spec, [0], np.zeros((0, 3)))


class TestChainRuleProbe:
    def test_identity_probe(self):
        spec = sample_sem(chain(), 1, "anm", rng_seed=41)
        z = model_grid(spec, 0, k=1, rng_seed=5)[0]
        assert chain_rule_probe(spec, 0, DiffeoProbe.identity(3), z) <= 1e-8

    def test_linear_orthonormal_probe(self):
        spec = sample_sem(chain(), 1, "anm", rng_seed=43)
        rng = np.random.default_rng(6)
        Q, R = np.linalg.qr(rng.uniform(-1, 1, size=(3, 3)))
        probe = DiffeoProbe(Q * np.sign(np.diag(R)), rng.uniform(-0.5, 0.5, 3), 0.0)
        z = model_grid(spec, 0, k=1, rng_seed=6)[0]
        assert chain_rule_probe(spec, 0, probe, z, h=1e-2) <= 1e-4

    def test_nonlinear_probe(self):
        # moderate-curvature spec so the documented 1e-3 FD tolerance at
        # h=1e-2 is meaningful (the residual is pure truncation error)
        spec = mild_tanh_spec(collider3())
        rng = np.random.default_rng(7)
        Q, R = np.linalg.qr(rng.uniform(-1, 1, size=(3, 3)))
        probe = DiffeoProbe(Q * np.sign(np.diag(R)), rng.uniform(-0.5, 0.5, 3), 0.6)
        z = model_grid(spec, 0, k=1, rng_seed=7)[0]
        assert chain_rule_probe(spec, 0, probe, z, h=1e-2) <= 1e-3

    def test_residual_scales_quadratically_in_step(self):
        # on harsher random specs the residual is FD-limited: halving the
        # step must shrink it by about 4x
        spec = sample_sem(collider3(), 1, "anm", rng_seed=47)
        rng = np.random.default_rng(7)
        Q, R = np.linalg.qr(rng.uniform(-1, 1, size=(3, 3)))
        probe = DiffeoProbe(Q * np.sign(np.diag(R)), rng.uniform(-0.5, 0.5, 3), 0.6)
        z = model_grid(spec, 0, k=1, rng_seed=7)[0]
        r_coarse = chain_rule_probe(spec, 0, probe, z, h=1e-2)
        r_fine = chain_rule_probe(spec, 0, probe, z, h=5e-3)
        assert 3.0 <= r_coarse / r_fine <= 5.0

    def test_probe_validation(self):
        with pytest.raises(ValueError):
            DiffeoProbe(np.ones((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            DiffeoProbe(np.eye(2), np.zeros(2), bend=1.5)


class TestLemmaProperties:
    def test_lemma_sink_random_anm(self):
        rng = np.random.default_rng(53)
        for trial in range(10):
            n = int(rng.integers(2, 5))
            g = random_dag(n, rng)
            spec = sample_sem(g, 1, "anm", rng_seed=300 + trial)
            for z in model_grid(spec, 0, k=5, rng_seed=trial):
                b = derivatives_analytic(spec, 0, z)
                for i in sorted(sinks(g)):
                    assert np.max(np.abs(b.third[i, i, :])) <= 1e-8

    def test_lemma_sink_random_hnm(self):
        rng = np.random.default_rng(59)
        for trial in range(10):
            n = int(rng.integers(2, 5))
            g = random_dag(n, rng)
            spec = sample_sem(g, 1, "hnm", rng_seed=400 + trial)
            for z in model_grid(spec, 0, k=5, rng_seed=trial):
                b = derivatives_analytic(spec, 0, z)
                for i in sorted(sinks(g)):
                    for j in range(n):
                        if j not in g.parents(i):
                            assert abs(b.third[i, i, j]) <= 1e-8
