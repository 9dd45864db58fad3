"""Ground-truth multi-environment latent SEMs and injective mixing.

Latents follow, per environment u,

    Z_i = f_i(PA_i) + noise_mean_i + sigma_i * eps_i,   eps_i ~ N(0, 1),

with sigma_i a constant (ANM) or a softplus-floored function of the
parents (HNM).  Observations are X = mix(Z) through a stack of
orthonormal-column affine layers with leaky-ReLU activations, which is
injective for any slope in (0, 1).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .graphs import Dag

SCALE_FLOOR = 0.1  # keeps HNM noise scales bounded away from 0


class ProfileError(ValueError):
    """Raised when an operation needs a smoothness profile the spec lacks."""


def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def inv_leaky_relu(y, slope):
    return np.where(y >= 0, y, y / slope)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class MechanismNet:
    """Small feed-forward net; `layers` is a tuple of (W, b) with activation
    applied between layers (linear output).  Input arity may be zero, in
    which case the net is a constant."""

    layers: tuple
    activation: str = "tanh"  # "tanh" | "leaky_relu" | "identity"
    slope: float = 0.2

    def __post_init__(self):
        for W, b in self.layers:
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError("non-finite mechanism weights")
        if self.activation not in ("tanh", "leaky_relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def arity(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def is_smooth(self) -> bool:
        """True when the net is three-times differentiable everywhere."""
        return self.activation in ("tanh", "identity")

    def _act(self, x):
        if self.activation == "tanh":
            return np.tanh(x)
        if self.activation == "identity":
            return x
        return leaky_relu(x, self.slope)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """x: (..., arity) -> (...,) scalar output."""
        x = np.asarray(x, dtype=float)
        h = x
        for k, (W, b) in enumerate(self.layers):
            h = h @ W.T + b
            if k < len(self.layers) - 1:
                h = self._act(h)
        return h[..., 0]

    def to_json_obj(self):
        return {
            "layers": [[W.tolist(), b.tolist()] for W, b in self.layers],
            "activation": self.activation,
            "slope": self.slope,
        }

    @classmethod
    def from_json_obj(cls, obj):
        layers = tuple((np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in obj["layers"])
        return cls(layers, obj["activation"], float(obj["slope"]))


@dataclass(frozen=True)
class NodeParams:
    mech: MechanismNet
    noise_mean: float
    noise_std: float
    scale_net: MechanismNet | None = None  # present for HNM

    def __post_init__(self):
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")


@dataclass(frozen=True)
class SemSpec:
    """Per-environment latent SEM parameters over a shared DAG."""

    graph: Dag
    model_class: str  # "anm" | "hnm"
    envs: tuple  # envs[u][i] -> NodeParams

    def __post_init__(self):
        if self.model_class not in ("anm", "hnm"):
            raise ValueError(f"unknown model class {self.model_class!r}")
        if len(self.envs) < 1:
            raise ValueError("need at least one environment")
        for env in self.envs:
            for i, p in enumerate(env):
                if p.mech.arity != len(self.graph.parents(i)):
                    raise ValueError(f"mechanism arity mismatch at node {i}")
                if self.model_class == "hnm" and p.scale_net is None:
                    raise ValueError(f"HNM node {i} missing scale net")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def m(self) -> int:
        return len(self.envs)

    @property
    def is_smooth(self) -> bool:
        return all(
            p.mech.is_smooth and (p.scale_net is None or p.scale_net.is_smooth)
            for env in self.envs
            for p in env
        )

    def parent_index(self, i: int) -> list[int]:
        """Sorted parent indices of node i; fixes mechanism input order."""
        return sorted(self.graph.parents(i))

    def sigma(self, u: int, i: int, pa_values: np.ndarray) -> np.ndarray:
        """Noise scale of node i in env u given parent values (..., arity)."""
        p = self.envs[u][i]
        if self.model_class == "anm":
            return np.broadcast_to(p.noise_std, np.asarray(pa_values).shape[:-1]).copy()
        return softplus(p.scale_net(pa_values)) + SCALE_FLOOR

    def to_json_obj(self):
        return {
            "graph": self.graph.to_json_obj(),
            "model_class": self.model_class,
            "envs": [
                [
                    {
                        "mech": p.mech.to_json_obj(),
                        "noise_mean": p.noise_mean,
                        "noise_std": p.noise_std,
                        "scale_net": p.scale_net.to_json_obj() if p.scale_net else None,
                    }
                    for p in env
                ]
                for env in self.envs
            ],
        }

    @classmethod
    def from_json_obj(cls, obj):
        envs = tuple(
            tuple(
                NodeParams(
                    mech=MechanismNet.from_json_obj(p["mech"]),
                    noise_mean=float(p["noise_mean"]),
                    noise_std=float(p["noise_std"]),
                    scale_net=MechanismNet.from_json_obj(p["scale_net"]) if p["scale_net"] else None,
                )
                for p in env
            )
            for env in obj["envs"]
        )
        return cls(Dag.from_json_obj(obj["graph"]), obj["model_class"], envs)

    def digest(self) -> str:
        payload = json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class MixingSpec:
    """Injective leaky-ReLU network: every weight matrix has orthonormal
    columns, activation applied after every affine layer."""

    layers: tuple  # ((W, b), ...), W of shape (out, in)
    slope: float = 0.2

    def __post_init__(self):
        if not 0 < self.slope < 1:
            raise ValueError("slope must lie in (0, 1)")
        for W, b in self.layers:
            if W.shape[0] < W.shape[1]:
                raise ValueError("mixing layers must not reduce dimension")
            gram = W.T @ W
            if not np.allclose(gram, np.eye(W.shape[1]), atol=1e-10):
                raise ValueError("mixing weight columns must be orthonormal")

    @property
    def n(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def d(self) -> int:
        return self.layers[-1][0].shape[0]

    def to_json_obj(self):
        return {
            "layers": [[W.tolist(), b.tolist()] for W, b in self.layers],
            "slope": self.slope,
        }

    @classmethod
    def from_json_obj(cls, obj):
        layers = tuple((np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in obj["layers"])
        return cls(layers, float(obj["slope"]))


def mix(spec: MixingSpec, Z: np.ndarray) -> np.ndarray:
    """Row-wise application of the layered map; injective on R^n."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != spec.n:
        raise ValueError(f"expected (N, {spec.n}) latents, got {Z.shape}")
    h = Z
    for W, b in spec.layers:
        h = leaky_relu(h @ W.T + b, spec.slope)
    return h


def invert_mix(spec: MixingSpec, X: np.ndarray) -> np.ndarray:
    """Numerical inverse (exact on the image): per layer, invert the
    activation then least-squares-invert the affine map."""
    h = np.asarray(X, dtype=float)
    for W, b in reversed(spec.layers):
        h = inv_leaky_relu(h, spec.slope) - b
        h = h @ W  # W^+ = W^T for orthonormal columns
    return h


# -- sampling -----------------------------------------------------------------

def _sample_net(rng, arity: int, hidden: int, activation: str, slope: float) -> MechanismNet:
    W1 = rng.uniform(-2.0, 2.0, size=(hidden, arity))
    b1 = rng.uniform(-2.0, 2.0, size=hidden)
    W2 = rng.uniform(-2.0, 2.0, size=(1, hidden))
    b2 = rng.uniform(-2.0, 2.0, size=1)
    return MechanismNet(((W1, b1), (W2, b2)), activation, slope)


def sample_sem(
    graph: Dag,
    m: int,
    model_class: str,
    rng_seed,
    hidden: int = 8,
    activation: str = "tanh",
    slope: float = 0.2,
    mech_variation: str = "per_env",
) -> SemSpec:
    """Random per-environment SEM: net weights ~ Unif[-2, 2], noise means
    ~ Unif[-1, 1], noise stds ~ Unif[0.5, 2].  `activation` selects the
    mechanism profile ("tanh" for oracle-grade smoothness, "leaky_relu"
    for the simulation-replication profile, "identity" for linear SEMs).

    `mech_variation` controls how environments differ: "per_env" draws
    fresh mechanism (and HNM scale) nets for every environment, "shared"
    draws them once and varies only the noise means and scales."""
    if m < 1:
        raise ValueError("need at least one environment")
    if mech_variation not in ("per_env", "shared"):
        raise ValueError(f"unknown mech_variation {mech_variation!r}")
    rng = np.random.default_rng(rng_seed)
    shared = None
    if mech_variation == "shared":
        shared = []
        for i in range(graph.n):
            arity = len(graph.parents(i))
            mech = _sample_net(rng, arity, hidden, activation, slope)
            scale_net = _sample_net(rng, arity, hidden, activation, slope) if model_class == "hnm" else None
            shared.append((mech, scale_net))
    envs = []
    for _ in range(m):
        nodes = []
        for i in range(graph.n):
            arity = len(graph.parents(i))
            if shared is None:
                mech = _sample_net(rng, arity, hidden, activation, slope)
                scale_net = _sample_net(rng, arity, hidden, activation, slope) if model_class == "hnm" else None
            else:
                mech, scale_net = shared[i]
            noise_mean = float(rng.uniform(-1.0, 1.0))
            noise_std = float(rng.uniform(0.5, 2.0))
            nodes.append(NodeParams(mech, noise_mean, noise_std, scale_net))
        envs.append(tuple(nodes))
    return SemSpec(graph, model_class, tuple(envs))


def sample_latents(spec: SemSpec, u: int, N: int, rng_seed) -> np.ndarray:
    """Ancestral sampling of N latent vectors from environment u.

    All base noises are drawn up front as an (N, n) standard-normal block,
    so ANM and HNM specs sharing mechanisms and effective scales produce
    identical samples from identical seeds."""
    if not 0 <= u < spec.m:
        raise IndexError(f"environment {u} out of range [0, {spec.m})")
    rng = np.random.default_rng(rng_seed)
    n = spec.n
    eps = rng.standard_normal((N, n))
    Z = np.zeros((N, n))
    for i in spec.graph.topological_order():
        pa = spec.parent_index(i)
        pa_values = Z[:, pa]
        p = spec.envs[u][i]
        f = p.mech(pa_values)
        sigma = spec.sigma(u, i, pa_values)
        Z[:, i] = f + p.noise_mean + sigma * eps[:, i]
    return Z


def sample_mixing(n: int, rng_seed, d: int | None = None, n_layers: int = 2, slope: float = 0.2) -> MixingSpec:
    """Orthonormal-column mixing via QR of Unif[-1, 1] matrices."""
    rng = np.random.default_rng(rng_seed)
    d = n if d is None else d
    if d < n:
        raise ValueError("observed dimension must be >= latent dimension")
    dims = [n] + [d] * n_layers
    layers = []
    for k in range(n_layers):
        raw = rng.uniform(-1.0, 1.0, size=(dims[k + 1], dims[k]))
        Q, R = np.linalg.qr(raw)
        # fix signs so the factorization (and hence the spec) is unique
        Q = Q * np.sign(np.diag(R))[None, :]
        b = rng.uniform(-1.0, 1.0, size=dims[k + 1])
        layers.append((Q, b))
    return MixingSpec(tuple(layers), slope)


# -- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Per-environment observed blocks plus evaluation-only ground truth."""

    sem: SemSpec
    mixing: MixingSpec
    X: tuple  # X[u]: (N, d)
    Z: tuple  # Z[u]: (N, n), never read by the estimator
    seed: int
    N: int

    @property
    def m(self) -> int:
        return len(self.X)

    @property
    def n(self) -> int:
        return self.sem.n

    @property
    def d(self) -> int:
        return self.mixing.d

    def meta_obj(self) -> dict:
        return {
            "graph": self.sem.graph.to_json_obj(),
            "m": self.m,
            "n": self.n,
            "d": self.d,
            "N": self.N,
            "seeds": {"dataset": self.seed},
            "model_class": self.sem.model_class,
            "spec_digest": self.sem.digest(),
        }


def env_seed(seed: int, u: int) -> np.random.SeedSequence:
    """Deterministic per-environment seed stream."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(u,))


def generate_dataset(sem: SemSpec, mixing: MixingSpec, N: int, seed: int) -> Dataset:
    if mixing.n != sem.n:
        raise ValueError("mixing input dimension differs from latent dimension")
    Xs, Zs = [], []
    for u in range(sem.m):
        Z = sample_latents(sem, u, N, env_seed(seed, u))
        Xs.append(mix(mixing, Z))
        Zs.append(Z)
    return Dataset(sem, mixing, tuple(Xs), tuple(Zs), seed, N)


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_dataset(ds: Dataset, out_dir: str) -> None:
    """Write the documented directory layout: meta.json, spec.json and
    headerless 17-significant-digit CSV blocks per environment."""
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "meta.json"), ds.meta_obj())
    _write_json(
        os.path.join(out_dir, "spec.json"),
        {"sem": ds.sem.to_json_obj(), "mixing": ds.mixing.to_json_obj()},
    )
    for u in range(ds.m):
        np.savetxt(os.path.join(out_dir, f"env_{u}_X.csv"), ds.X[u], fmt="%.17g", delimiter=",")
        np.savetxt(os.path.join(out_dir, f"env_{u}_Z.csv"), ds.Z[u], fmt="%.17g", delimiter=",")


def load_dataset(data_dir: str) -> Dataset:
    with open(os.path.join(data_dir, "meta.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(data_dir, "spec.json")) as fh:
        spec = json.load(fh)
    sem = SemSpec.from_json_obj(spec["sem"])
    mixing = MixingSpec.from_json_obj(spec["mixing"])
    Xs, Zs = [], []
    for u in range(meta["m"]):
        if meta["N"] == 0:
            X = np.zeros((0, meta["d"]))
            Z = np.zeros((0, meta["n"]))
        else:
            X = np.loadtxt(os.path.join(data_dir, f"env_{u}_X.csv"), delimiter=",", ndmin=2)
            Z = np.loadtxt(os.path.join(data_dir, f"env_{u}_Z.csv"), delimiter=",", ndmin=2)
        Xs.append(X)
        Zs.append(Z)
    return Dataset(sem, mixing, tuple(Xs), tuple(Zs), int(meta["seeds"]["dataset"]), int(meta["N"]))


def load_spec(data_dir: str) -> SemSpec:
    with open(os.path.join(data_dir, "spec.json")) as fh:
        return SemSpec.from_json_obj(json.load(fh)["sem"])


def load_observations(data_dir: str) -> tuple[dict, list[np.ndarray]]:
    """Observed blocks only; the estimator never reads the latent files."""
    with open(os.path.join(data_dir, "meta.json")) as fh:
        meta = json.load(fh)
    Xs = []
    for u in range(meta["m"]):
        if meta["N"] == 0:
            Xs.append(np.zeros((0, meta["d"])))
        else:
            Xs.append(np.loadtxt(os.path.join(data_dir, f"env_{u}_X.csv"), delimiter=",", ndmin=2))
    return meta, Xs


def load_latents(data_dir: str) -> list[np.ndarray]:
    with open(os.path.join(data_dir, "meta.json")) as fh:
        meta = json.load(fh)
    Zs = []
    for u in range(meta["m"]):
        if meta["N"] == 0:
            Zs.append(np.zeros((0, meta["n"])))
        else:
            Zs.append(np.loadtxt(os.path.join(data_dir, f"env_{u}_Z.csv"), delimiter=",", ndmin=2))
    return Zs
