"""Command-line pipeline: gen, check, train, eval, sweep.

Every subcommand is deterministic given its arguments and seed, echoes
its fully resolved configuration into the output directory, and uses the
stable exit-code contract: 0 success (a failing audit is a result, not
an error), 2 usage, 3 I/O failure, 4 unsupported mode, 5 numerical
abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .audit import audit_all_subsets, env_count_report
from .driver import load_zhat, run_algorithm1
from .evalmetrics import evaluate, scatter_export, align
from .graphs import Dag, chain, collider3, moralize, pair3
from .model import TrainConfig, TrainDivergence
from .oracle import check_lemma_sink, markov_network_from_density, model_grid
from .synth import (
    ProfileError,
    generate_dataset,
    load_latents,
    load_observations,
    load_spec,
    sample_mixing,
    sample_sem,
    write_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_UNSUPPORTED = 4
EXIT_NUMERIC = 5

GRAPH_PRESETS = {
    "chain3": chain,
    "collider3": collider3,  # two parents into Z2
    "pair3": pair3,  # the printed variant: Z1, Z2 -> Z3
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _graph_from_arg(arg: str) -> Dag:
    if arg in GRAPH_PRESETS:
        return GRAPH_PRESETS[arg]()
    with open(arg) as fh:
        return Dag.from_json_obj(json.load(fh))


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _echo_config(out_dir: str, obj: dict) -> None:
    _write_json(os.path.join(out_dir, "config.resolved.json"), obj)


# -- gen ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    graph = _graph_from_arg(args.graph)
    sem = sample_sem(
        graph,
        args.envs,
        args.model,
        np.random.SeedSequence(entropy=args.seed, spawn_key=(1,)),
        hidden=args.mech_hidden,
        activation=args.profile if args.profile != "linear" else "identity",
    )
    mixing = sample_mixing(
        graph.n,
        np.random.SeedSequence(entropy=args.seed, spawn_key=(2,)),
        d=args.d,
        n_layers=args.mix_layers,
    )
    ds = generate_dataset(sem, mixing, args.samples, args.seed)
    write_dataset(ds, args.out)
    _echo_config(args.out, {
        "command": "gen",
        "graph": graph.to_json_obj(),
        "model": args.model,
        "profile": args.profile,
        "envs": args.envs,
        "samples": args.samples,
        "seed": args.seed,
        "d": mixing.d,
        "mech_hidden": args.mech_hidden,
        "mix_layers": args.mix_layers,
    })
    print(f"wrote {args.envs} environment blocks to {args.out}")
    return EXIT_OK


# -- check -------------------------------------------------------------------------

def cmd_check(args) -> int:
    spec = load_spec(args.spec)
    envs = range(spec.m) if args.env is None else [args.env]
    if args.what == "lemmas":
        if args.mode == "analytic" and not spec.is_smooth:
            print(
                "error: this spec uses a leaky_relu mechanism profile, which has no "
                "third derivatives; regenerate with --profile tanh or use --mode fd",
                file=sys.stderr,
            )
            return EXIT_UNSUPPORTED
        reports = []
        for u in envs:
            grid = model_grid(spec, u, k=args.points, rng_seed=args.grid_seed)
            reports.append(check_lemma_sink(spec, u, grid, mode=args.mode))
        out = {"reports": reports, "pass": all(r["pass"] for r in reports)}
        _write_json(args.out, out)
        print(f"lemma check: {'PASS' if out['pass'] else 'FAIL'} ({args.out})")
        return EXIT_OK
    if args.what == "markov":
        if not spec.is_smooth:
            print("error: markov check needs the tanh profile (analytic hessians)", file=sys.stderr)
            return EXIT_UNSUPPORTED
        grid = model_grid(spec, 0, k=args.points, rng_seed=args.grid_seed)
        got = markov_network_from_density(spec, envs, grid)
        moral = moralize(spec.graph)
        out = {
            "markov_network": got.to_json_obj(),
            "moral_graph": moral.to_json_obj(),
            "equals_moral": got == moral,
            "subgraph_of_moral": got.is_subgraph_of(moral),
        }
        _write_json(args.out, out)
        print(f"markov edges: {got.edge_list()} (equals moral: {out['equals_moral']})")
        return EXIT_OK
    # assumptions
    if not spec.is_smooth:
        print("error: assumption audit needs the tanh profile", file=sys.stderr)
        return EXIT_UNSUPPORTED
    points = model_grid(spec, 0, k=args.points, rng_seed=args.grid_seed)
    kinds = (args.kind,) if args.kind else ("tau",)
    reports = audit_all_subsets(spec, range(spec.m), points, kinds=kinds,
                                both_orderings=args.both_orderings)
    out = {
        "audits": [r.to_json_obj() for r in reports],
        "environment_counts": env_count_report(spec.graph),
        "pass": all(r.passed for r in reports),
    }
    _write_json(args.out, out)
    print(f"assumption audit: {'PASS' if out['pass'] else 'FAIL'} ({len(reports)} rank tests)")
    return EXIT_OK


# -- train -------------------------------------------------------------------------

def _config_from_args(args, m: int) -> TrainConfig:
    return TrainConfig(
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        lr=args.lr,
        prior_lr=args.prior_lr,
        batch_size=args.batch_size,
        steps=args.steps,
        seed=args.seed,
        sigma_x2=args.sigma_x2,
        hidden=args.hidden,
        prior_hidden=args.prior_hidden,
        env_hidden=args.env_hidden,
        n_latent=args.nlatent,
        envs_per_step=m if args.envs_per_step == 0 else args.envs_per_step,
        cold_start=args.cold_start,
        gate_threshold=args.threshold,
    )


def cmd_train(args) -> int:
    meta, X_envs = load_observations(args.data)
    cfg = _config_from_args(args, meta["m"])
    graph, model, histories = run_algorithm1(X_envs, cfg, out_dir=args.out)
    _echo_config(args.out, {"command": "train", "data": os.path.abspath(args.data), **cfg.to_json_obj()})
    final = histories[-1].final_elbo() if histories else float("nan")
    print(f"final graph edges: {graph.edge_list()} | final ELBO {final:.4f}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    with open(os.path.join(args.run, "graph.json")) as fh:
        Ghat = Dag.from_json_obj(json.load(fh))
    meta, _ = load_observations(args.data)
    G = Dag.from_json_obj(meta["graph"])
    envs, Zhat = load_zhat(os.path.join(args.run, "zhat.csv"))
    Z = np.vstack(load_latents(args.data))
    if len(Z) != len(Zhat):
        print(f"error: run has {len(Zhat)} samples but data has {len(Z)}", file=sys.stderr)
        return EXIT_IO
    report = evaluate(Zhat, Z, Ghat, G, k=args.knn)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "eval.json"), report)
    perm = align(Zhat, Z).permutation
    keep = min(args.scatter_max, meta["N"])
    rows = [u_block[:keep] for u_block in np.split(np.arange(len(Z)), meta["m"])] if meta["m"] else []
    sel = np.concatenate(rows) if rows else np.arange(0)
    scatter_export(Zhat[sel], Z[sel], perm, os.path.join(args.out, "scatter.csv"))
    _echo_config(args.out, {"command": "eval", "run": os.path.abspath(args.run),
                            "data": os.path.abspath(args.data), "knn": args.knn,
                            "scatter_max": args.scatter_max})
    print(f"exact_match={report['structure']['exact_match']} shd={report['structure']['shd']} "
          f"aligned={['%.3f' % s for s in report['alignment']['aligned_scores']]}")
    return EXIT_OK


# -- sweep -------------------------------------------------------------------------

def _one_sweep_run(task) -> dict:
    X_envs, cfg, run_dir = task
    graph, model, histories = run_algorithm1(X_envs, cfg, out_dir=run_dir)
    return {
        "run_dir": run_dir,
        "seed": cfg.seed,
        "final_elbo": histories[-1].final_elbo() if histories else float("nan"),
        "edges": graph.num_edges(),
        "edge_list": graph.edge_list(),
    }


def cmd_sweep(args) -> int:
    meta, X_envs = load_observations(args.data)
    base = _config_from_args(args, meta["m"])
    values = [float(v) if args.param == "lambda1" else int(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    tasks = []
    for value in values:
        for seed in seeds:
            cfg = replace(base, seed=seed)
            if args.param == "lambda1":
                cfg = replace(cfg, lambda1=value)
                label = f"lambda1_{value:g}"
            else:
                cfg = replace(cfg, n_latent=value)
                label = f"nlatent_{value}"
            tasks.append((value, (X_envs, cfg, os.path.join(args.out, f"{label}_seed{seed}"))))
    workers = int(os.environ.get("CRL_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_sweep_run, [t for _, t in tasks]))
    else:
        results = [_one_sweep_run(t) for _, t in tasks]
    table = {}
    for (value, _), res in zip(tasks, results):
        table.setdefault(str(value), []).append(res)
    summary = {
        "param": args.param,
        "values": {
            v: {
                "median_final_elbo": float(np.median([r["final_elbo"] for r in runs])),
                "median_edges": float(np.median([r["edges"] for r in runs])),
                "runs": runs,
            }
            for v, runs in table.items()
        },
    }
    _write_json(os.path.join(args.out, "sweep.json"), summary)
    _echo_config(args.out, {"command": "sweep", "param": args.param, "values": values,
                            "seeds": seeds, "data": os.path.abspath(args.data),
                            **{k: v for k, v in base.to_json_obj().items() if k != "seed"}})
    for v, info in summary["values"].items():
        print(f"{args.param}={v}: median final ELBO {info['median_final_elbo']:.4f}, "
              f"median edges {info['median_edges']:g}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda1", type=float, default=0.01)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--steps", type=_positive_int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--prior-lr", type=float, default=0.005, dest="prior_lr")
    p.add_argument("--batch-size", type=_positive_int, default=96, dest="batch_size")
    p.add_argument("--sigma-x2", type=float, default=0.003, dest="sigma_x2")
    p.add_argument("--hidden", type=_positive_int, default=64)
    p.add_argument("--prior-hidden", type=_positive_int, default=32, dest="prior_hidden")
    p.add_argument("--env-hidden", type=_positive_int, default=8, dest="env_hidden")
    p.add_argument("--nlatent", type=_positive_int, default=None)
    p.add_argument("--envs-per-step", type=int, default=0, dest="envs_per_step",
                   help="minibatches per step (0 = one per environment)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--cold-start", action="store_true", dest="cold_start")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a multi-environment dataset")
    g.add_argument("--graph", required=True, help="chain3 | collider3 | pair3 | graph JSON file")
    g.add_argument("--model", choices=["anm", "hnm"], default="anm")
    g.add_argument("--profile", choices=["tanh", "leaky_relu", "linear"], default="leaky_relu")
    g.add_argument("--envs", type=_positive_int, required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--d", type=_positive_int, default=None, help="observed dimension (default n)")
    g.add_argument("--mech-hidden", type=_positive_int, default=8, dest="mech_hidden")
    g.add_argument("--mix-layers", type=_positive_int, default=2, dest="mix_layers")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("check", help="oracle-side lemma, Markov, and assumption checks")
    c.add_argument("what", choices=["lemmas", "markov", "assumptions"])
    c.add_argument("--spec", required=True, help="dataset directory from `crl gen`")
    c.add_argument("--mode", choices=["analytic", "fd"], default="analytic")
    c.add_argument("--kind", choices=["tau", "w_anm", "w_hnm"], default=None)
    c.add_argument("--env", type=int, default=None)
    c.add_argument("--points", type=_positive_int, default=25)
    c.add_argument("--grid-seed", type=int, default=0, dest="grid_seed")
    c.add_argument("--both-orderings", action="store_true", dest="both_orderings")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_check)

    t = sub.add_parser("train", help="run the iterative sink-identification estimator")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare a run against ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--knn", type=_positive_int, default=10)
    e.add_argument("--scatter-max", type=_positive_int, default=1000, dest="scatter_max",
                   help="scatter rows per environment")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="rerun training across a parameter grid")
    s.add_argument("--param", choices=["lambda1", "nlatent"], required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    _add_train_flags(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainDivergence as err:
        print(f"error: training aborted, {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProfileError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
