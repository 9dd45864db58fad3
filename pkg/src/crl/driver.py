"""Iterative sink identification: train, pick a sink, swap it to the last
active position, freeze its local structure, and constrain the next round.

Each iteration trains the estimator (with the sparsity weight standing in
for edge-count minimization and, optionally, the moral-consistency
penalty against the previous adjacency snapshot), reads the thresholded
graph over the active positions, and peels one sink.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import Dag
from .model import CrlModel, TrainConfig, TrainHistory, train


@dataclass
class IterationState:
    t: int
    model: CrlModel
    A_prev: np.ndarray | None
    processed: list[int] = field(default_factory=list)
    histories: list[TrainHistory] = field(default_factory=list)


def pick_sink(model: CrlModel, active, threshold: float | None = None) -> int:
    """A node of the thresholded sub-DAG over `active` with no outgoing
    edges; ties break on weakest incoming+outgoing gate mass, then lowest
    index."""
    active = sorted(active)
    if not active:
        raise ValueError("active node set must be nonempty")
    thr = model.cfg.gate_threshold if threshold is None else threshold
    gates = model.gate_matrix()
    adj = gates > thr
    sink_candidates = [
        i for i in active if not any(adj[r, i] for r in active if r != i)
    ]
    assert sink_candidates, "triangular gate support guarantees a sink"

    def mass(i):
        inc = sum(gates[i, c] for c in active if c != i)
        out = sum(gates[r, i] for r in active if r != i)
        return inc + out

    return min(sink_candidates, key=lambda i: (mass(i), i))


def _posterior_cache(model: CrlModel, X_envs, rng, per_env: int = 512):
    """Fixed per-environment posterior (mean, log-variance) blocks for
    prior-side adaptation with the encoder held constant."""
    cache = []
    for X in X_envs:
        idx = rng.integers(0, X.shape[0], size=min(per_env, X.shape[0]))
        mu, lv = model.encode(ad.const(model.standardize(X[idx])))
        cache.append((mu.data.copy(), lv.data.copy()))
    return cache


def _prior_fit_loss(model: CrlModel, cache, eps_blocks, cfg: TrainConfig,
                    A_prev, t: int):
    """Structured-prior negative log-likelihood of reparameterized samples
    from the cached posterior, plus the structure regularizers.  The
    reconstruction and entropy terms do not depend on prior-side
    parameters and are left out."""
    total = None
    for u, ((mu, lv), eps) in enumerate(zip(cache, eps_blocks)):
        Zh = ad.const(mu + np.exp(0.5 * lv) * eps)
        nll = ad.tmean(ad.tsum(model.prior_nll(Zh, u, model.gates()), axis=1))
        total = nll if total is None else ad.add(total, nll)
    loss = ad.scale(total, 1.0 / len(cache))
    loss = ad.add(loss, ad.scale(model.sparsity_loss(), cfg.lambda1))
    if cfg.lambda2 > 0 and A_prev is not None and t >= 2:
        loss = ad.add(loss, ad.scale(model.moral_loss(A_prev, t), cfg.lambda2))
    return loss


def _adapt_prior_side(model: CrlModel, cache, cfg: TrainConfig, A_prev, t: int,
                      steps: int, seed) -> float:
    """Train only the prior-side parameters against the cached posterior;
    returns a deterministic fit score (lower is better)."""
    params = model.prior_side_parameters()
    state = ad.AdamState(lr=cfg.lr if cfg.prior_lr is None else cfg.prior_lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        eps_blocks = [rng.standard_normal(mu.shape) for mu, _ in cache]
        ad.zero_grads(params)
        with ad.Tape():
            loss = _prior_fit_loss(model, cache, eps_blocks, cfg, A_prev, t)
            ad.backward(loss)
        ad.adam_step(state, params)
    score_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(7, t)))
    score = 0.0
    reps = 4
    for _ in range(reps):
        eps_blocks = [score_rng.standard_normal(mu.shape) for mu, _ in cache]
        score += _prior_fit_loss(model, cache, eps_blocks, cfg, A_prev, t).item()
    return score / reps


def _move_to_end(model: CrlModel, i: int, last: int) -> None:
    """Send position i to the last active slot, shifting the positions in
    between down by one (adjacent swaps keep their relative order)."""
    for k in range(i, last):
        model.apply_swap(k, k + 1)


def _select_sink_by_trials(model: CrlModel, X_envs, cfg: TrainConfig, A_prev,
                           t: int, last: int) -> tuple[CrlModel, int, dict]:
    """Candidate relabelings compete on the training objective: each active
    position is moved to the last active slot (others keep their order),
    the gates restart open, and the structured prior is re-fit with the
    encoder held fixed; the best fit wins."""
    scores = {}
    best_clone, best_i = None, None
    for i in range(last + 1):
        clone = model.clone()
        _move_to_end(clone, i, last)
        live = clone.tril_mask * (~clone.frozen_mask)
        clone.gate_logits.data[live.astype(bool)] = cfg.gate_logit_init
        cache_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(5, t)))
        cache = _posterior_cache(clone, X_envs, cache_rng)
        seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(6, t, i))
        scores[i] = _adapt_prior_side(clone, cache, cfg, A_prev, t, cfg.sink_trial_steps, seed)
        if best_i is None or scores[i] < scores[best_i]:
            best_clone, best_i = clone, i
    return best_clone, best_i, scores


def _fresh_model_preserving_constraints(old: CrlModel, cfg: TrainConfig, t: int) -> CrlModel:
    """Cold start: reinitialize weights but keep pinned gates and scaling."""
    from dataclasses import replace

    fresh = CrlModel(d=old.d, n=old.n, m=old.m, cfg=replace(cfg, seed=cfg.seed + 7919 * t))
    fresh.frozen_mask = old.frozen_mask.copy()
    fresh.frozen_values = old.frozen_values.copy()
    fresh.x_mean = old.x_mean.copy()
    fresh.x_std = old.x_std.copy()
    return fresh


def run_algorithm1(X_envs, cfg: TrainConfig, out_dir: str | None = None,
                   steps_per_iter: int | None = None) -> tuple[Dag, CrlModel, list[TrainHistory]]:
    """The n-1 iteration loop; returns the final graph, the trained model
    (its encoder is the latent extractor), and per-iteration histories."""
    m = len(X_envs)
    if m < 2:
        raise ValueError("need at least two environments")
    d = X_envs[0].shape[1]
    n = cfg.n_latent if cfg.n_latent is not None else d
    model = CrlModel(d=d, n=n, m=m, cfg=cfg)
    model.set_x_standardization(np.vstack([X for X in X_envs if len(X)]))
    steps = cfg.steps if steps_per_iter is None else steps_per_iter
    state = IterationState(t=0, model=model, A_prev=None)
    for t in range(1, n):
        if cfg.cold_start and t > 1:
            model = _fresh_model_preserving_constraints(model, cfg, t)
            state.model = model
        history = train(model, X_envs, cfg, A_prev=state.A_prev, t=t, steps=steps)
        state.histories.append(history)
        last_active = n - t  # 0-based position n+1-t
        active = list(range(last_active + 1))
        if cfg.sink_trial_steps > 0 and last_active > 0:
            model, sink, _ = _select_sink_by_trials(model, X_envs, cfg, state.A_prev, t, last_active)
            state.model = model
        else:
            sink = pick_sink(model, active)
            model.apply_swap(sink, last_active)
        model.freeze_node_structure(last_active)
        state.A_prev = (model.gate_matrix() > cfg.gate_threshold).astype(float)
        state.processed.append(last_active)
        state.t = t
        if out_dir:
            it_dir = os.path.join(out_dir, f"iter_{t}")
            model.save(it_dir)
            history.write_csv(os.path.join(it_dir, "history.csv"))
    graph = model.read_graph()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "graph.json"), "w") as fh:
            json.dump(graph.to_json_obj(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        write_zhat(model, X_envs, os.path.join(out_dir, "zhat.csv"))
    return graph, model, state.histories


def write_zhat(model: CrlModel, X_envs, path: str) -> None:
    """Posterior means for every sample, with an environment column."""
    with open(path, "w") as fh:
        fh.write("env," + ",".join(f"zhat_{i + 1}" for i in range(model.n)) + "\n")
        for u, X in enumerate(X_envs):
            if not len(X):
                continue
            Z = model.extract_latents(X)
            for row in Z:
                fh.write(("%d," % u) + ",".join("%.17g" % v for v in row) + "\n")


def load_zhat(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Returns (env column, latent block)."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return raw[:, 0].astype(int), raw[:, 1:]
