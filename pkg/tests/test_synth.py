"""Latent SEM sampling, mixing injectivity, and dataset determinism."""

import filecmp
import json
import os

import numpy as np
import pytest

from crl.graphs import chain, collider3, empty, moralize
from crl.synth import (
    Dataset,
    MechanismNet,
    MixingSpec,
    NodeParams,
    SemSpec,
    generate_dataset,
    invert_mix,
    load_dataset,
    mix,
    sample_latents,
    sample_mixing,
    sample_sem,
    softplus,
    write_dataset,
)


def zero_net(arity, hidden=4):
    return MechanismNet(
        ((np.zeros((hidden, arity)), np.zeros(hidden)), (np.zeros((1, hidden)), np.zeros(1))),
        "tanh",
    )


def standard_spec(graph, model_class="anm"):
    """All mechanisms zero, standard-normal noises."""
    nodes = tuple(
        NodeParams(zero_net(len(graph.parents(i))), 0.0, 1.0,
                   zero_net(len(graph.parents(i))) if model_class == "hnm" else None)
        for i in range(graph.n)
    )
    return SemSpec(graph, model_class, (nodes,))


class TestSampleSem:
    def test_environments_get_distinct_parameters(self):
        spec = sample_sem(chain(), 14, "anm", rng_seed=1)
        assert spec.m == 14
        for i in range(3):
            means = {spec.envs[u][i].noise_mean for u in range(14)}
            stds = {spec.envs[u][i].noise_std for u in range(14)}
            assert len(means) == 14 and len(stds) == 14
            weights = [
                b"".join(W.tobytes() + b.tobytes() for W, b in spec.envs[u][i].mech.layers)
                for u in range(14)
            ]
            assert len(set(weights)) == 14

    def test_empty_graph_arity_zero(self):
        spec = sample_sem(empty(3), 1, "anm", rng_seed=0)
        for i in range(3):
            assert spec.envs[0][i].mech.arity == 0

    def test_hnm_scale_net_arity(self):
        spec = sample_sem(collider3(), 2, "hnm", rng_seed=7)
        assert spec.envs[0][1].scale_net is not None
        assert spec.envs[0][1].scale_net.arity == 2
        assert spec.envs[1][0].scale_net.arity == 0

    def test_weight_ranges(self):
        spec = sample_sem(chain(), 3, "anm", rng_seed=5)
        for env in spec.envs:
            for p in env:
                for W, b in p.mech.layers:
                    assert np.all(np.abs(W) <= 2.0) and np.all(np.abs(b) <= 2.0)
                assert -1.0 <= p.noise_mean <= 1.0
                assert 0.5 <= p.noise_std <= 2.0

    def test_rejects_zero_environments(self):
        with pytest.raises(ValueError):
            sample_sem(chain(), 0, "anm", rng_seed=0)


class TestSampleLatents:
    def test_pure_noise_moments(self):
        N = 10000
        Z = sample_latents(standard_spec(empty(3)), 0, N, rng_seed=3)
        bound = 3.0 / np.sqrt(N)
        assert np.all(np.abs(Z.mean(axis=0)) < 3 * bound)
        assert np.all(np.abs(Z.var(axis=0) - 1.0) < 5 * bound)

    def test_zero_weight_chain_is_independent(self):
        N = 20000
        Z = sample_latents(standard_spec(chain()), 0, N, rng_seed=4)
        c = np.corrcoef(Z.T)
        off = c[~np.eye(3, dtype=bool)]
        assert np.all(np.abs(off) < 4.0 / np.sqrt(N))

    def test_same_seed_reproduces(self):
        spec = sample_sem(chain(), 2, "anm", rng_seed=9)
        a = sample_latents(spec, 1, 100, rng_seed=11)
        b = sample_latents(spec, 1, 100, rng_seed=11)
        assert np.array_equal(a, b)

    def test_env_out_of_range(self):
        with pytest.raises(IndexError):
            sample_latents(standard_spec(chain()), 1, 10, rng_seed=0)

    def test_hnm_constant_scale_matches_anm_bitwise(self):
        graph = chain()
        rng = np.random.default_rng(21)
        anm_nodes, hnm_nodes = [], []
        for i in range(graph.n):
            arity = len(graph.parents(i))
            W1 = rng.uniform(-2, 2, size=(4, arity))
            b1 = rng.uniform(-2, 2, size=4)
            W2 = rng.uniform(-2, 2, size=(1, 4))
            b2 = rng.uniform(-2, 2, size=1)
            mech = MechanismNet(((W1, b1), (W2, b2)), "tanh")
            # constant scale net: zero weights, bias picks the scale
            raw = 0.5
            scale = MechanismNet(
                ((np.zeros((4, arity)), np.zeros(4)), (np.zeros((1, 4)), np.array([raw]))),
                "tanh",
            )
            sigma = float(softplus(np.array(raw)) + 0.1)
            anm_nodes.append(NodeParams(mech, 0.3, sigma))
            hnm_nodes.append(NodeParams(mech, 0.3, sigma, scale))
        anm = SemSpec(graph, "anm", (tuple(anm_nodes),))
        hnm = SemSpec(graph, "hnm", (tuple(hnm_nodes),))
        a = sample_latents(anm, 0, 500, rng_seed=6)
        b = sample_latents(hnm, 0, 500, rng_seed=6)
        assert np.array_equal(a, b)

    def test_linear_anm_partial_correlation_factorizes(self):
        # linear profile makes the latents jointly Gaussian, so a vanishing
        # partial correlation is an exact conditional-independence check
        N = 20000
        spec = sample_sem(chain(), 1, "anm", rng_seed=12, activation="identity")
        Z = sample_latents(spec, 0, N, rng_seed=13)
        m = moralize(chain())
        prec = np.linalg.inv(np.cov(Z.T))
        for i in range(3):
            for j in range(i + 1, 3):
                if not m.edges[i, j]:
                    pc = -prec[i, j] / np.sqrt(prec[i, i] * prec[j, j])
                    assert abs(pc) < 4.0 / np.sqrt(N)


class TestMixing:
    def test_single_layer_hand_value(self):
        spec = MixingSpec(((np.eye(2), np.zeros(2)),), slope=0.2)
        out = mix(spec, np.array([[1.0, -1.0]]))
        assert np.allclose(out, [[1.0, -0.2]], atol=0)

    def test_zero_input_gives_activated_bias(self):
        spec = sample_mixing(3, rng_seed=2)
        out = mix(spec, np.zeros((1, 3)))
        h = np.zeros(3)
        for W, b in spec.layers:
            h = np.where(W @ h + b >= 0, W @ h + b, spec.slope * (W @ h + b))
        assert np.allclose(out[0], h, atol=0)

    def test_inversion_oracle(self):
        spec = sample_mixing(3, rng_seed=8)
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(50, 3)) * 3
        back = invert_mix(spec, mix(spec, Z))
        assert np.max(np.abs(back - Z)) <= 1e-9

    def test_tall_mixing(self):
        spec = sample_mixing(2, rng_seed=4, d=5)
        assert spec.d == 5
        Z = np.random.default_rng(1).normal(size=(20, 2))
        assert mix(spec, Z).shape == (20, 5)
        assert np.max(np.abs(invert_mix(spec, mix(spec, Z)) - Z)) <= 1e-9

    def test_dimension_mismatch(self):
        spec = sample_mixing(3, rng_seed=2)
        with pytest.raises(ValueError):
            mix(spec, np.zeros((4, 2)))

    def test_injectivity_probe(self):
        spec = sample_mixing(3, rng_seed=15)
        rng = np.random.default_rng(16)
        lower = spec.slope ** len(spec.layers)  # slope * sigma_min per layer
        a = rng.normal(size=(1000, 3)) * 3
        b = rng.normal(size=(1000, 3)) * 3
        num = np.linalg.norm(mix(spec, a) - mix(spec, b), axis=1)
        den = np.linalg.norm(a - b, axis=1)
        assert np.all(num >= lower * den * (1 - 1e-12))


class TestDataset:
    def test_shapes(self):
        sem = sample_sem(chain(), 3, "anm", rng_seed=1)
        ds = generate_dataset(sem, sample_mixing(3, rng_seed=2), N=200, seed=5)
        assert ds.m == 3
        for u in range(3):
            assert ds.X[u].shape == (200, 3)
            assert ds.Z[u].shape == (200, 3)
            assert np.array_equal(ds.X[u], mix(ds.mixing, ds.Z[u]))

    def test_empty_dataset_valid(self, tmp_path):
        sem = sample_sem(chain(), 2, "anm", rng_seed=1)
        ds = generate_dataset(sem, sample_mixing(3, rng_seed=2), N=0, seed=5)
        write_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        assert back.N == 0 and back.X[0].shape == (0, 3)

    def test_rerun_byte_identical(self, tmp_path):
        sem = sample_sem(chain(), 2, "anm", rng_seed=1)
        mixing = sample_mixing(3, rng_seed=2)
        for name in ("a", "b"):
            write_dataset(generate_dataset(sem, mixing, N=50, seed=5), str(tmp_path / name))
        files = sorted(os.listdir(tmp_path / "a"))
        assert files == sorted(os.listdir(tmp_path / "b"))
        for f in files:
            assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)

    def test_roundtrip_preserves_values_and_digest(self, tmp_path):
        sem = sample_sem(collider3(), 2, "hnm", rng_seed=3)
        ds = generate_dataset(sem, sample_mixing(3, rng_seed=4), N=20, seed=6)
        write_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(str(tmp_path / "d"))
        assert back.sem.digest() == sem.digest()
        for u in range(2):
            assert np.array_equal(back.X[u], ds.X[u])
            assert np.array_equal(back.Z[u], ds.Z[u])
        with open(tmp_path / "d" / "meta.json") as fh:
            meta = json.load(fh)
        assert meta["spec_digest"] == sem.digest()
        assert meta["model_class"] == "hnm"
