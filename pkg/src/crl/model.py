"""VAE estimator with a structured Gaussian prior over the latents.

The prior factorizes as independent Gaussian residuals
Z_i - f_i(A_{i,:} * Z) - mu_i^(u) with environment-specific mean and
scale, where A is a gated strictly-lower-triangular adjacency.  Gates
are deterministic sigmoids of logits over a temperature; entries in the
frozen set are replaced by pinned binary constants and receive no
gradient.  The training objective is
elbo + lambda1 * sparsity + lambda2 * moral, summed in exactly that
order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, const
from .graphs import Dag


class TrainDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lambda1: float = 0.01
    lambda2: float = 0.0
    lr: float = 0.001
    prior_lr: float | None = None  # default: same as lr; the per-environment
    # prior nets see only 1/m of the steps and may need a faster rate
    batch_size: int = 256
    steps: int = 4000
    seed: int = 0
    gate_temperature: float = 0.2
    gate_threshold: float = 0.5
    sigma_x2: float = 0.01
    hidden: int = 64
    prior_hidden: int = 16
    env_hidden: int = 16
    n_latent: int | None = None  # defaults to the data's latent count
    gate_logit_init: float = 0.3  # open gates: lambda1 = 0 stays dense
    envs_per_step: int = 1  # minibatches per step, each from one environment
    sink_trial_steps: int = 0  # 0: pick sinks from the thresholded graph;
    # > 0: pick by objective comparison of candidate relabelings, each
    # adapted prior-side for this many steps with the encoder held fixed
    prior_env_mech: bool = False  # False: one mechanism net per node with
    # environment-specific mean/scale offsets; True: a net per (node, env)
    slope: float = 0.2
    prior_kind: str = "anm"  # "anm" | "hnm" (parent-conditioned scale)
    cold_start: bool = False
    standardize: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if not 0 < self.gate_threshold < 1:
            raise ValueError("gate threshold must lie in (0, 1)")

    def to_json_obj(self) -> dict:
        return asdict(self)


def _mlp_params(rng, name, dims):
    """Affine stack parameters with 1/sqrt(fan_in) init and zero biases."""
    out = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        W = ad.param(rng.normal(size=(fan_out, fan_in)) / math.sqrt(max(fan_in, 1)), f"{name}.l{k}.W")
        b = ad.param(np.zeros((1, fan_out)), f"{name}.l{k}.b")
        out.append((W, b))
    return out


class CrlModel:
    """Encoder/decoder plus structured prior; all parameters named."""

    def __init__(self, d: int, n: int, m: int, cfg: TrainConfig):
        self.d, self.n, self.m = d, n, m
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        rng = self.rng
        h, ph, eh = cfg.hidden, cfg.prior_hidden, cfg.env_hidden
        self.encoder = _mlp_params(rng, "enc", [d, h, h])
        self.enc_mu = _mlp_params(rng, "encmu", [h, n])[0]
        self.enc_lv = _mlp_params(rng, "enclv", [h, n])[0]
        self.decoder = _mlp_params(rng, "dec", [n, h, h, d])
        # prior mechanism nets: one per node, or one per (node, environment)
        # when the latent mechanisms themselves are expected to change
        n_mech = m if cfg.prior_env_mech else 1
        self.prior_mech = [
            [_mlp_params(rng, f"prior.{i}.env{u}", [n, ph, ph, 1]) for u in range(n_mech)]
            for i in range(n)
        ]
        self.env_mu = [_mlp_params(rng, f"envmu.{i}", [m, eh, 1]) for i in range(n)]
        self.env_sig = [_mlp_params(rng, f"envsig.{i}", [m, eh, 1]) for i in range(n)]
        if cfg.prior_kind == "hnm":
            self.prior_scale = [
                [_mlp_params(rng, f"pscale.{i}.env{u}", [n, ph, 1]) for u in range(n_mech)]
                for i in range(n)
            ]
        else:
            self.prior_scale = None
        logits = np.zeros((n, n))
        logits[np.tril_indices(n, k=-1)] = cfg.gate_logit_init
        self.gate_logits = ad.param(logits, "gates.logits")
        self.frozen_mask = np.zeros((n, n), dtype=bool)
        self.frozen_values = np.zeros((n, n))
        self.tril_mask = np.tril(np.ones((n, n)), k=-1)
        # standardization constants, set from data before training
        self.x_mean = np.zeros(d)
        self.x_std = np.ones(d)

    # -- parameter plumbing -----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        out = []
        for W, b in self.encoder:
            out += [W, b]
        out += [*self.enc_mu, *self.enc_lv]
        for W, b in self.decoder:
            out += [W, b]
        return out + self.prior_side_parameters()

    def set_x_standardization(self, X_all: np.ndarray) -> None:
        if self.cfg.standardize and len(X_all):
            self.x_mean = X_all.mean(axis=0)
            self.x_std = X_all.std(axis=0) + 1e-8
        else:
            self.x_mean = np.zeros(self.d)
            self.x_std = np.ones(self.d)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.x_mean) / self.x_std

    # -- forward pieces -----------------------------------------------------------

    def _run_mlp(self, x: Tensor, layers) -> Tensor:
        last = len(layers) - 1
        for k, (W, b) in enumerate(layers):
            x = ad.affine(x, W, b)
            if k < last:
                x = ad.leaky_relu(x, self.cfg.slope)
        return x

    def encode(self, X: Tensor) -> tuple[Tensor, Tensor]:
        h = self._run_mlp(X, self.encoder)
        h = ad.leaky_relu(h, self.cfg.slope)
        return ad.affine(h, *self.enc_mu), ad.affine(h, *self.enc_lv)

    def decode(self, Zh: Tensor) -> Tensor:
        return self._run_mlp(Zh, self.decoder)

    def gates(self) -> Tensor:
        """Gate-valued adjacency: sigmoid(logits / T) on the learnable
        strictly-lower support, pinned constants on the frozen set."""
        s = ad.sigmoid(ad.scale(self.gate_logits, 1.0 / self.cfg.gate_temperature))
        live = self.tril_mask * (~self.frozen_mask)
        masked = ad.mul(s, const(live))
        return ad.add(masked, const(self.frozen_values * self.frozen_mask))

    def gate_matrix(self) -> np.ndarray:
        """Gate values as plain numpy (no tape)."""
        from scipy.special import expit

        s = expit(self.gate_logits.data / self.cfg.gate_temperature)
        live = self.tril_mask * (~self.frozen_mask)
        return s * live + self.frozen_values * self.frozen_mask

    def _env_onehot(self, u: int) -> Tensor:
        if not 0 <= u < self.m:
            raise IndexError(f"environment {u} out of range [0, {self.m})")
        onehot = np.zeros((1, self.m))
        onehot[0, u] = 1.0
        return const(onehot)

    def prior_nll(self, Zh: Tensor, u: int, A: Tensor) -> Tensor:
        """(B, 1) negative structured-prior log-density of latent samples."""
        onehot = self._env_onehot(u)
        mech_idx = u if self.cfg.prior_env_mech else 0
        total = None
        for i in range(self.n):
            row = ad.matmul(const(np.eye(self.n)[i : i + 1]), A)  # (1, n)
            inp = ad.mul(Zh, row)
            fhat = self._run_mlp(inp, self.prior_mech[i][mech_idx])  # (B, 1)
            mu_i = self._run_mlp(onehot, self.env_mu[i])  # (1, 1)
            mean_i = ad.add(fhat, mu_i)
            log_sig = self._run_mlp(onehot, self.env_sig[i])  # (1, 1)
            if self.prior_scale is not None:
                log_sig = ad.add(self._run_mlp(inp, self.prior_scale[i][mech_idx]), log_sig)
            nll_i = ad.gaussian_nll(ad.col(Zh, i), mean_i, ad.scale(log_sig, 2.0))
            total = nll_i if total is None else ad.add(total, nll_i)
        return total

    # -- losses ---------------------------------------------------------------------

    def elbo_loss(self, X: np.ndarray, u: int, eps: np.ndarray | None = None) -> Tensor:
        """Negative ELBO on one single-environment batch: reconstruction
        Gaussian NLL at fixed observation variance plus a one-sample
        reparameterized KL estimate against the structured prior."""
        Xt = const(self.standardize(X))
        B = X.shape[0]
        mu_q, lv_q = self.encode(Xt)
        if eps is None:
            eps = self.rng.standard_normal((B, self.n))
        Zh = ad.add(mu_q, ad.mul(ad.exp(ad.scale(lv_q, 0.5)), const(eps)))
        xmean = self.decode(Zh)
        log_var_x = const(np.full((1, 1), math.log(self.cfg.sigma_x2)))
        recon = ad.tsum(ad.gaussian_nll(Xt, xmean, log_var_x), axis=1)  # (B, 1)
        log_q = ad.neg(ad.tsum(ad.gaussian_nll(Zh, mu_q, lv_q), axis=1))
        log_p = ad.neg(ad.tsum(self.prior_nll(Zh, u, self.gates()), axis=1))
        kl_est = ad.sub(log_q, log_p)
        return ad.tmean(ad.add(recon, kl_est))

    def sparsity_loss(self, A: Tensor | None = None) -> Tensor:
        """Entrywise L1 norm of (I + A)^T (I + A), the moral-graph matrix."""
        A = self.gates() if A is None else A
        ia = ad.add(A, const(np.eye(self.n)))
        return ad.tsum(ad.absolute(ad.matmul(ad.transpose(ia), ia)))

    def moral_loss(self, A_prev: np.ndarray, t: int, A: Tensor | None = None) -> Tensor:
        """Frobenius-squared drift of the moral-graph matrix on trailing
        leading-principal blocks; empty sum at t = 1."""
        if A_prev.shape != (self.n, self.n):
            raise ad.ShapeMismatch(f"moral_loss: previous adjacency {A_prev.shape} != {(self.n, self.n)}")
        A = self.gates() if A is None else A
        total = const(np.zeros((1, 1)))
        eye = np.eye(self.n)
        prev_full = (eye + A_prev).T @ (eye + A_prev)
        for k in range(self.n + 2 - t, self.n + 1):
            ia = ad.add(ad.submatrix(A, k), const(np.eye(k)))
            cur = ad.matmul(ad.transpose(ia), ia)
            diff = ad.sub(cur, const(prev_full[:k, :k]))
            total = ad.add(total, ad.tsum(ad.square(diff)))
        return total

    def multi_env_elbo(self, batches) -> Tensor:
        """Negative ELBO over one batch per environment, averaged over all
        rows.  The encoder, decoder, and entropy terms are environment
        independent and run once on the concatenated batch; only the
        structured-prior term is evaluated per environment."""
        X_cat = np.concatenate([X for _, X, _ in batches])
        eps_cat = np.concatenate([eps for _, _, eps in batches])
        B = X_cat.shape[0]
        Xt = const(self.standardize(X_cat))
        mu_q, lv_q = self.encode(Xt)
        Zh = ad.add(mu_q, ad.mul(ad.exp(ad.scale(lv_q, 0.5)), const(eps_cat)))
        xmean = self.decode(Zh)
        log_var_x = const(np.full((1, 1), math.log(self.cfg.sigma_x2)))
        total = ad.tsum(ad.gaussian_nll(Xt, xmean, log_var_x))
        total = ad.add(total, ad.neg(ad.tsum(ad.gaussian_nll(Zh, mu_q, lv_q))))
        A = self.gates()
        offset = 0
        for u, X, _ in batches:
            Zh_u = ad.rows(Zh, offset, offset + X.shape[0])
            total = ad.add(total, ad.tsum(self.prior_nll(Zh_u, u, A)))
            offset += X.shape[0]
        return ad.scale(total, 1.0 / B)

    def total_loss(self, X: np.ndarray, u: int, A_prev: np.ndarray | None = None,
                   t: int = 1, eps: np.ndarray | None = None,
                   batches=None) -> tuple[Tensor, dict]:
        """elbo + lambda1 * sparsity + lambda2 * moral, in this exact order.

        With `batches` given, the ELBO term averages one batch per listed
        environment instead of the single (X, u) pair."""
        elbo = self.multi_env_elbo(batches) if batches is not None else self.elbo_loss(X, u, eps)
        sparsity = self.sparsity_loss()
        total = ad.add(elbo, ad.scale(sparsity, self.cfg.lambda1))
        if self.cfg.lambda2 > 0 and A_prev is not None and t >= 2:
            moral = self.moral_loss(A_prev, t)
            moral_val = moral.item()
            total = ad.add(total, ad.scale(moral, self.cfg.lambda2))
        else:
            moral_val = 0.0
            total = ad.add(total, const(np.zeros((1, 1))))
        parts = {"elbo": elbo.item(), "sparsity": sparsity.item(), "moral": moral_val, "total": total.item()}
        return total, parts

    # -- graph readout and structure freezing ------------------------------------------

    def read_graph(self, threshold: float | None = None) -> Dag:
        thr = self.cfg.gate_threshold if threshold is None else thr_check(threshold)
        return Dag(self.n, self.gate_matrix() > thr)

    def freeze_entry(self, i: int, j: int, value: float) -> None:
        if i == j:
            return
        if value not in (0.0, 1.0):
            raise ValueError("frozen gates hold binary values")
        if i < j:
            raise ValueError("only strictly-lower entries exist")
        self.frozen_mask[i, j] = True
        self.frozen_values[i, j] = value

    def freeze_node_structure(self, i: int, threshold: float | None = None) -> None:
        """Pin the incoming row and outgoing column of node i to its current
        thresholded binary values."""
        thr = self.cfg.gate_threshold if threshold is None else threshold
        g = self.gate_matrix()
        for jcol in range(i):
            self.freeze_entry(i, jcol, float(g[i, jcol] > thr))
        for row in range(i + 1, self.n):
            self.freeze_entry(row, i, float(g[row, i] > thr))

    def frozen_entries(self) -> list[tuple[int, int, float]]:
        out = []
        for i, j in zip(*np.nonzero(self.frozen_mask)):
            out.append((int(i), int(j), float(self.frozen_values[i, j])))
        return sorted(out)

    # -- latent relabeling ----------------------------------------------------------------

    def apply_swap(self, i: int, j: int) -> None:
        """Swap latent positions i and j in every component: encoder output
        channels, decoder input columns, per-node prior and environment
        nets, the input columns of every prior net, and the gate matrix
        (values stay attached to unordered pairs, stored at the
        strictly-lower slot)."""
        if i == j:
            return
        if self.frozen_mask[:, [i, j]].any() or self.frozen_mask[[i, j], :].any():
            raise ValueError(f"cannot swap frozen positions {i} and {j}")
        pair = [i, j]
        rev = [j, i]
        for head in (self.enc_mu, self.enc_lv):
            head[0].data[pair] = head[0].data[rev]
            head[1].data[0, pair] = head[1].data[0, rev]
        dec_W = self.decoder[0][0]
        dec_W.data[:, pair] = dec_W.data[:, rev]
        for net_list in filter(None, (self.prior_mech, self.prior_scale)):
            for per_env in net_list:
                for net in per_env:
                    net[0][0].data[:, pair] = net[0][0].data[:, rev]  # input relabel
            for a, b in zip(net_list[i], net_list[j]):
                for net_a, net_b in zip(a, b):
                    for pa, pb in zip(net_a, net_b):
                        pa.data, pb.data = pb.data, pa.data
        for net_list in (self.env_mu, self.env_sig):
            for a, b in zip(net_list[i], net_list[j]):
                for pa, pb in zip(a, b):
                    pa.data, pb.data = pb.data, pa.data
        perm = np.arange(self.n)
        perm[i], perm[j] = j, i
        L = self.gate_logits.data[np.ix_(perm, perm)]
        self.gate_logits.data = np.tril(L, -1) + np.triu(L, 1).T
        fm = self.frozen_mask[np.ix_(perm, perm)]
        fv = self.frozen_values[np.ix_(perm, perm)]
        self.frozen_mask = np.tril(fm, -1) | np.triu(fm, 1).T
        self.frozen_values = np.tril(fv, -1) + np.triu(fv, 1).T

    # -- persistence ---------------------------------------------------------------------

    def model_json_obj(self) -> dict:
        return {
            "d": self.d,
            "n": self.n,
            "m": self.m,
            "gate_logits": self.gate_logits.data.tolist(),
            "gate_matrix": self.gate_matrix().tolist(),
            "frozen": [[i, j, v] for i, j, v in self.frozen_entries()],
            "threshold": self.cfg.gate_threshold,
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "config": self.cfg.to_json_obj(),
        }

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        ad.save_params(self.parameters(), directory)
        with open(os.path.join(directory, "model.json"), "w") as fh:
            json.dump(self.model_json_obj(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    def load(self, directory: str) -> None:
        ad.load_params(self.parameters(), directory)
        with open(os.path.join(directory, "model.json")) as fh:
            obj = json.load(fh)
        self.frozen_mask = np.zeros((self.n, self.n), dtype=bool)
        self.frozen_values = np.zeros((self.n, self.n))
        for i, j, v in obj["frozen"]:
            self.frozen_mask[int(i), int(j)] = True
            self.frozen_values[int(i), int(j)] = v
        self.x_mean = np.asarray(obj["x_mean"])
        self.x_std = np.asarray(obj["x_std"])

    def extract_latents(self, X: np.ndarray) -> np.ndarray:
        """Posterior means for raw observations (the latent extractor)."""
        mu, _ = self.encode(const(self.standardize(X)))
        return mu.data.copy()

    def clone(self) -> "CrlModel":
        other = CrlModel(self.d, self.n, self.m, self.cfg)
        for mine, theirs in zip(self.parameters(), other.parameters()):
            theirs.data = mine.data.copy()
        other.frozen_mask = self.frozen_mask.copy()
        other.frozen_values = self.frozen_values.copy()
        other.x_mean = self.x_mean.copy()
        other.x_std = self.x_std.copy()
        return other

    def prior_side_parameters(self) -> list[Tensor]:
        """Structured-prior parameters: per-node mechanism and environment
        nets plus the gate logits (everything except encoder/decoder)."""
        out = []
        for per_env in self.prior_mech:
            for net in per_env:
                for W, b in net:
                    out += [W, b]
        for nets in (self.env_mu, self.env_sig):
            for net in nets:
                for W, b in net:
                    out += [W, b]
        if self.prior_scale is not None:
            for per_env in self.prior_scale:
                for net in per_env:
                    for W, b in net:
                        out += [W, b]
        out.append(self.gate_logits)
        return out


def thr_check(threshold: float) -> float:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return threshold


# -- training loop -------------------------------------------------------------------

@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (step, env, elbo, sparsity, moral, total)

    def append(self, step: int, env: int, parts: dict) -> None:
        self.rows.append((step, env, parts["elbo"], parts["sparsity"], parts["moral"], parts["total"]))

    def final_elbo(self, tail: int = 100) -> float:
        vals = [r[2] for r in self.rows[-tail:]]
        return float(np.median(vals)) if vals else float("nan")

    def write_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("step,env,elbo,sparsity,moral,total\n")
            for r in self.rows:
                fh.write("%d,%d,%.17g,%.17g,%.17g,%.17g\n" % r)


def train(model: CrlModel, X_envs, cfg: TrainConfig, A_prev: np.ndarray | None = None,
          t: int = 1, steps: int | None = None, rng: np.random.Generator | None = None,
          constraints=None) -> TrainHistory:
    """Minibatch Adam over all parameters except the frozen gate set.

    `X_envs` is a sequence of per-environment observation blocks;
    environments are visited round-robin.  `constraints` optionally pins
    gate entries (list of (i, j, value)) before training starts."""
    if constraints:
        for i, j, v in constraints:
            model.freeze_entry(i, j, v)
    params = model.parameters()
    prior_names = {p.name for p in model.prior_side_parameters()}
    prior_params = [p for p in params if p.name in prior_names]
    main_params = [p for p in params if p.name not in prior_names]
    state_main = ad.AdamState(lr=cfg.lr)
    state_prior = ad.AdamState(lr=cfg.lr if cfg.prior_lr is None else cfg.prior_lr)
    rng = model.rng if rng is None else rng
    steps = cfg.steps if steps is None else steps
    history = TrainHistory()
    m = len(X_envs)
    k = max(1, min(cfg.envs_per_step, m))
    for step in range(steps):
        ad.zero_grads(params)
        if k == 1:
            u = step % m
            X = X_envs[u]
            idx = rng.integers(0, X.shape[0], size=min(cfg.batch_size, X.shape[0]))
            eps = rng.standard_normal((len(idx), model.n))
            env_label, batches = u, None
            args = (X[idx], u)
        else:
            env_ids = [(step * k + r) % m for r in range(k)]
            batches = []
            for u in env_ids:
                X = X_envs[u]
                idx = rng.integers(0, X.shape[0], size=min(cfg.batch_size, X.shape[0]))
                batches.append((u, X[idx], rng.standard_normal((len(idx), model.n))))
            env_label, args = -1, (None, 0)
        with ad.Tape():
            loss, parts = model.total_loss(*args, A_prev=A_prev, t=t, eps=None, batches=batches)
            if not np.isfinite(parts["total"]):
                raise TrainDivergence(step)
            ad.backward(loss)
        ad.adam_step(state_main, main_params)
        ad.adam_step(state_prior, prior_params)
        history.append(step, env_label, parts)
    return history
