"""Command line entry point: ``coordtilt {generate,graph,calibrate,train,eval,bench}``.

Outputs go below ``$COORDTILT_OUTPUT`` (default ``./runs``) unless a path is
given explicitly. Every artifact written by ``train`` and ``eval`` carries the
content hash of the experiment config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .baselines import CoordinatedSweep, DQNBaseline, RandomPolicy, SweepBaseline
from .config import ALGORITHMS, ExperimentConfig
from .graph import CoordinationGraph, DisconnectedGraphWarning, build_graph, coupling_matrix
from .learner import CoordinatedQLearner, EdgeQ, Normalizer, act, calibrate, evaluate
from .netsim import Deployment, TiltEnv, compute_snapshot, generate_deployment

log = logging.getLogger("coordtilt")

OUTPUT_ENV = "COORDTILT_OUTPUT"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("algorithm", "config_hash", "step", "mean_eval_reward")
TRAILING_COLUMNS = ("loss", "epsilon")


class UsageError(Exception):
    pass


def output_root():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _resolve_out(path, default_name):
    if path:
        return Path(path)
    return output_root() / default_name


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    return json.loads(path.read_text())


def _parse_seeds(text):
    if text is None:
        return None
    if "," in text or text.startswith("["):
        return [int(s) for s in text.strip("[]").split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise UsageError("--seeds must be a positive count or a comma separated list")
    return list(range(n))


# --- generate / graph / calibrate ---------------------------------------------------


def cmd_generate(args):
    if args.stations < 1:
        raise UsageError("--stations must be >= 1")
    d = generate_deployment(args.stations, args.seed, min_intersite_distance=args.min_distance)
    out = _resolve_out(args.output, "deployment.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    d.save(out)
    side = 2 * d.area_half_width
    print(f"cells={d.n_cells} area={side:.0f}x{side:.0f} m min_distance={d.min_station_distance():.1f} m -> {out}")
    return 0


def _graph_for(d, topology, sparse_db, dense_db, drops):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DisconnectedGraphWarning)
        g = build_graph(coupling_matrix(d, drops), topology, sparse_db, dense_db)
    return g, [w for w in caught if issubclass(w.category, DisconnectedGraphWarning)]


def cmd_graph(args):
    d = Deployment.load(args.deployment) if Path(args.deployment).exists() else None
    if d is None:
        raise UsageError(f"file not found: {args.deployment}")
    g, warned = _graph_for(d, args.topology, args.sparse_db, args.dense_db, args.coupling_drops)
    out = _resolve_out(args.output, f"graph-{args.topology}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    g.save(out)
    comps = g.components()
    print(f"topology={g.topology} nodes={g.n_nodes} edges={g.n_edges} components={len(comps)} -> {out}")
    if warned:
        print("warning: graph is disconnected; components:", file=sys.stderr)
        for c in comps:
            print("  " + " ".join(map(str, c)), file=sys.stderr)
    return 0


def cmd_calibrate(args):
    d = Deployment.load(args.deployment)
    norm = calibrate(TiltEnv(d, args.users), args.configs, args.seed)
    out = _resolve_out(args.output, "normalizer.json")
    _write_json(out, {"deployment": d.fingerprint(), **norm.to_dict()})
    print(f"max_sinr={norm.max_sinr:.3f} dB reward_mean={norm.reward_mean:.4f} reward_std={norm.reward_std:.4f} -> {out}")
    return 0


# --- train -----------------------------------------------------------------------------


def make_estimator(cfg: ExperimentConfig, seed):
    common = dict(
        learning_rate=cfg.learning_rate,
        gamma=cfg.gamma,
        batch_size=cfg.batch_size,
        epsilon_start=cfg.epsilon_start,
        epsilon_end=cfg.epsilon_end,
        epsilon_decay_steps=cfg.epsilon_decay_steps,
        target_update=cfg.effective_target_update,
        buffer_capacity=cfg.buffer_capacity,
        hidden_layers=tuple(cfg.hidden_layers),
        n_steps=cfg.n_steps,
        eval_every=cfg.eval_every,
        n_eval_drops=cfg.n_eval_drops,
        n_calibration=cfg.n_calibration,
        max_grad_norm=cfg.max_grad_norm,
        random_state=seed,
    )
    if cfg.algorithm in ("ps-crl", "crl"):
        return CoordinatedQLearner(share_parameters=cfg.algorithm == "ps-crl", max_iters=cfg.max_iters, **common)
    if cfg.algorithm in ("s-dqn", "i-dqn"):
        return DQNBaseline(share_parameters=cfg.algorithm == "s-dqn", **common)
    if cfg.algorithm == "sweep":
        return SweepBaseline(passes=cfg.sweep_passes, random_state=seed)
    if cfg.algorithm == "c-sweep":
        return CoordinatedSweep(max_iters=cfg.max_iters, random_state=seed)
    return RandomPolicy(random_state=seed)


def load_model(doc):
    kind = doc["algorithm"]
    if kind in ("ps-crl", "crl"):
        return CoordinatedQLearner.from_dict(doc)
    if kind in ("s-dqn", "i-dqn"):
        return DQNBaseline.from_dict(doc)
    if kind == "sweep":
        return SweepBaseline.from_dict(doc)
    if kind == "c-sweep":
        return CoordinatedSweep.from_dict(doc)
    raise ValueError(f"no checkpoint format for algorithm {kind!r}")


def checkpoint_doc(model_doc, cfg_hash, d: Deployment, g: CoordinationGraph, seed, kind):
    return {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "seed": seed,
        "config_hash": cfg_hash,
        "graph_hash": g.fingerprint(),
        "deployment": d.to_dict(),
        "graph": g.to_dict(),
        "model": model_doc,
    }


def prepare(cfg: ExperimentConfig, deployment_path=None, graph_path=None, normalizer_path=None):
    d = Deployment.load(deployment_path) if deployment_path else generate_deployment(
        cfg.n_stations, cfg.deployment_seed, min_intersite_distance=cfg.min_intersite_distance
    )
    if graph_path:
        g = CoordinationGraph.load(graph_path)
        if g.n_nodes != d.n_cells:
            raise UsageError(f"graph has {g.n_nodes} nodes but the deployment has {d.n_cells} cells")
    else:
        g, _ = _graph_for(d, cfg.topology, cfg.sparse_db, cfg.dense_db, cfg.coupling_drops)
    env = TiltEnv(d, cfg.n_users)
    if normalizer_path:
        doc = _read_json(normalizer_path)
        if doc.get("deployment") not in (None, d.fingerprint()):
            raise UsageError("normalizer was calibrated on a different deployment")
        norm = Normalizer.from_dict(doc)
    else:
        norm = calibrate(env, cfg.n_calibration, cfg.calibration_seed)
    return d, g, env, norm


def train_one(cfg: ExperimentConfig, d, g, norm, seed):
    env = TiltEnv(d, cfg.n_users, seed)
    est = make_estimator(cfg, seed)
    t0 = time.perf_counter()
    est.fit(env, g, norm)
    elapsed = time.perf_counter() - t0
    if not est.metrics_:
        # non-learning methods: one evaluation of the final configuration
        result = evaluate(est, env, norm, cfg.n_eval_drops)
        budget = getattr(est, "n_evaluations_", None)
        if budget is None and hasattr(est, "tables_"):
            budget = int(est.tables_.size)
        est.metrics_ = [{"step": int(budget or 0), "eval_reward": result.mean, "loss": float("nan"), "epsilon": float("nan")}]
    lat = np.array([t for _, t, _ in getattr(est, "latencies_", [])]) * 1e3
    iters = np.array([k for _, _, k in getattr(est, "latencies_", [])])
    timing = {
        "seed": seed,
        "wall_s": elapsed,
        "act_mean_ms": float(lat.mean()) if lat.size else None,
        "act_p95_ms": float(np.percentile(lat, 95)) if lat.size else None,
        "mean_iters": float(iters.mean()) if iters.size else None,
    }
    final = est.to_dict() if cfg.algorithm != "random" else None
    best = None
    if hasattr(est, "use_best") and getattr(est, "best_params_", None) is not None:
        best = est.use_best().to_dict()
    return seed, est.metrics_, final, best, timing


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def write_metrics(path, cfg_hash, algorithm, seeds, metrics_by_seed):
    steps = [row["step"] for row in metrics_by_seed[0]]
    header = [*METRIC_COLUMNS, *(f"seed_{s}" for s in seeds), *TRAILING_COLUMNS]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for k, step in enumerate(steps):
            rows = [m[k] for m in metrics_by_seed]
            rewards = [r["eval_reward"] for r in rows]
            losses = [r["loss"] for r in rows if not np.isnan(r["loss"])]
            w.writerow(
                [
                    algorithm,
                    cfg_hash,
                    step,
                    _fmt(float(np.mean(rewards))),
                    *(_fmt(r) for r in rewards),
                    _fmt(float(np.mean(losses)) if losses else None),
                    _fmt(rows[0]["epsilon"]),
                ]
            )


def cmd_train(args):
    overrides = {"algorithm": args.algo, "seeds": _parse_seeds(args.seeds), "n_steps": args.steps}
    cfg = ExperimentConfig.load(args.config, **overrides)
    cfg_hash = cfg.content_hash()
    out = _resolve_out(args.output, f"{cfg.algorithm}-{cfg_hash}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    d, g, env, norm = prepare(cfg, args.deployment, args.graph, args.normalizer)
    d.save(out / "deployment.json")
    g.save(out / "graph.json")
    _write_json(out / "normalizer.json", {"config_hash": cfg_hash, "deployment": d.fingerprint(), **norm.to_dict()})
    log.info("training %s on %d cells, %d edges, seeds %s", cfg.algorithm, d.n_cells, g.n_edges, cfg.seeds)

    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(train_one, *zip(*[(cfg, d, g, norm, s) for s in cfg.seeds])))
        else:
            results = [train_one(cfg, d, g, norm, s) for s in cfg.seeds]
    except Exception:
        (out / "FAILED").write_text("training did not complete; outputs in this directory are partial\n")
        raise
    results.sort(key=lambda r: cfg.seeds.index(r[0]))
    for seed, _, final, best, _ in results:
        if final is not None:
            _write_json(out / f"checkpoint_seed{seed}_final.json", checkpoint_doc(final, cfg_hash, d, g, seed, "final"))
            _write_json(
                out / f"checkpoint_seed{seed}_best.json",
                checkpoint_doc(best if best is not None else final, cfg_hash, d, g, seed, "best"),
            )
    write_metrics(out / "metrics.csv", cfg_hash, cfg.algorithm, cfg.seeds, [r[1] for r in results])
    # wall-clock numbers vary run to run, so they stay out of the CSV outputs
    _write_json(out / "timing.json", {"config_hash": cfg_hash, "seeds": [r[4] for r in results]})
    finals = [r[1][-1]["eval_reward"] for r in results]
    print(f"{cfg.algorithm} final eval reward {np.mean(finals):.4f} +- {np.std(finals):.4f} over {len(finals)} seeds -> {out}")
    return 0


# --- eval --------------------------------------------------------------------------------


def load_checkpoint_file(path, expect_hash=None, graph_path=None):
    doc = _read_json(path)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {doc.get('version')!r}")
    if expect_hash is not None and doc["config_hash"] != expect_hash:
        raise UsageError(f"checkpoint config hash {doc['config_hash']} does not match {expect_hash}")
    d = Deployment.from_dict(doc["deployment"])
    g = CoordinationGraph.from_dict(doc["graph"])
    if graph_path is not None:
        other = CoordinationGraph.load(graph_path)
        if other.fingerprint() != doc["graph_hash"]:
            raise UsageError("graph file does not match the graph the checkpoint was trained on")
    if g.n_nodes != d.n_cells:
        raise UsageError("checkpoint graph and deployment disagree on the number of cells")
    return doc, d, g, load_model(doc["model"])


def cmd_eval(args):
    if args.drops < 1:
        raise UsageError("--drops must be >= 1")
    expect = ExperimentConfig.load(args.config).content_hash() if args.config else None
    doc, d, g, model = load_checkpoint_file(args.checkpoint, expect, args.graph)
    n_users = ExperimentConfig.load(args.config).n_users if args.config else 1000
    env = TiltEnv(d, n_users)
    result = evaluate(model, env, model.normalizer_, args.drops)
    out = _resolve_out(args.output, f"eval-{doc['config_hash']}-seed{doc['seed']}-{doc['kind']}")
    out.mkdir(parents=True, exist_ok=True)
    std = result.std if args.drops > 1 else None
    report = {
        "config_hash": doc["config_hash"],
        "graph_hash": doc["graph_hash"],
        "algorithm": doc["model"]["algorithm"],
        "seed": doc["seed"],
        "checkpoint": doc["kind"],
        "n_drops": args.drops,
        "mean_reward": result.mean,
        "std_reward": std,
        "per_drop": result.per_drop.tolist(),
        "raw_global_reward": result.raw_global.tolist(),
        "tilts": [t.tolist() for t in result.tilts],
    }
    _write_json(out / "report.json", report)
    with open(out / "per_cell.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config_hash", "drop", "cell", "tilt", "reward"])
        for k, row in enumerate(result.per_cell):
            for c, z in enumerate(row):
                w.writerow([doc["config_hash"], k, c, int(result.tilts[k][c]), _fmt(z)])
    with open(out / "throughput_cdf.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config_hash", "drop", "user", "throughput_bps"])
        for k, thr in enumerate(result.throughputs):
            for u, t in enumerate(thr):
                w.writerow([doc["config_hash"], k, u, _fmt(t)])
    std_text = f"{std:.4f}" if std is not None else "n/a"
    print(f"{report['algorithm']} seed {doc['seed']} ({doc['kind']}): mean reward {result.mean:.4f} +- {std_text} over {args.drops} drops -> {out}")
    return 0


# --- bench -------------------------------------------------------------------------------


def bench_topologies(
    d: Deployment, topologies, trials, seed=0, q_doc=None, max_iters=40, n_users=1000, coupling_drops=3, max_sinr=None
):
    """Time ``act`` (payoff evaluation plus max-plus) on each topology.

    Uses the shared edge network from ``q_doc`` when given, otherwise a freshly
    initialized one; observations come from seeded random configurations and
    are scaled by ``max_sinr`` (default: the largest sampled percentile).
    """
    if trials < 1:
        raise UsageError("--trials must be >= 1")
    env = TiltEnv(d, n_users, seed)
    rng = np.random.default_rng(seed)
    obs_list = []
    for _ in range(trials):
        snap = compute_snapshot(d, env.drop(), rng.integers(0, 16, d.n_cells))
        obs_list.append(env.observe(snap))
    norm_scale = max_sinr or max(float(np.max(o)) for o in obs_list) or 1.0
    coupling = coupling_matrix(d, coupling_drops)
    rows = []
    for topology in topologies:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DisconnectedGraphWarning)
            g = build_graph(coupling, topology)
        if q_doc is not None:
            q = EdgeQ.from_dict(q_doc, g)
        else:
            q = EdgeQ(g, shared=True, seed=seed)
        times, iters = [], []
        for obs in obs_list:
            t0 = time.perf_counter()
            _, _, diag = act(q, obs / norm_scale, g, 0.0, None, max_iters)
            times.append((time.perf_counter() - t0) * 1e3)
            iters.append(diag.iterations)
        rows.append(
            {
                "topology": topology,
                "n_edges": g.n_edges,
                "mean_ms": float(np.mean(times)),
                "p95_ms": float(np.percentile(times, 95)),
                "mean_iters": float(np.mean(iters)),
            }
        )
    return rows


def cmd_bench(args):
    q_doc, max_sinr = None, None
    if args.checkpoint:
        doc, d, _, _ = load_checkpoint_file(args.checkpoint)
        edge_q = doc["model"].get("edge_q")
        if edge_q is None or edge_q["mode"] != "shared":
            raise UsageError("bench needs a shared-parameter (ps-crl) checkpoint to run on several topologies")
        q_doc = edge_q
        max_sinr = doc["model"]["normalizer"]["max_sinr"]
    elif args.deployment:
        d = Deployment.load(args.deployment)
    else:
        raise UsageError("bench needs --deployment or --checkpoint")
    topologies = [t.strip() for t in args.topologies.split(",") if t.strip()]
    rows = bench_topologies(d, topologies, args.trials, args.seed, q_doc, args.max_iters, max_sinr=max_sinr)
    out = _resolve_out(args.output, "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, ["topology", "n_edges", "mean_ms", "p95_ms", "mean_iters"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['topology']:>9}: {r['n_edges']:4d} edges  mean {r['mean_ms']:.3f} ms  p95 {r['p95_ms']:.3f} ms  iters {r['mean_iters']:.1f}")
    print(f"-> {out}")
    return 0


# --- parser ------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="coordtilt", description="Coordinated antenna tilt optimization experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="generate a random deployment")
    s.add_argument("--stations", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-distance", type=float, default=1500.0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("graph", help="build a coordination graph for a deployment")
    s.add_argument("deployment")
    s.add_argument("--topology", choices=("sparse", "dense", "tree", "complete"), default="sparse")
    s.add_argument("--sparse-db", type=float, default=25.0)
    s.add_argument("--dense-db", type=float, default=35.0)
    s.add_argument("--coupling-drops", type=int, default=3)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("calibrate", help="estimate observation and reward normalization")
    s.add_argument("deployment")
    s.add_argument("--configs", type=int, default=1000)
    s.add_argument("--users", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("train", help="train an algorithm over several seeds")
    s.add_argument("--config", help="JSON file overriding the default experiment config")
    s.add_argument("--algo", choices=ALGORITHMS)
    s.add_argument("--seeds", help="seed count (N -> 0..N-1) or comma separated list")
    s.add_argument("--steps", type=int, help="override the step budget")
    s.add_argument("--deployment", help="deployment JSON (default: generated from the config)")
    s.add_argument("--graph", help="graph JSON (default: built from the config)")
    s.add_argument("--normalizer", help="normalizer JSON (default: calibrated from the config)")
    s.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel processes")
    s.add_argument("-o", "--output", help="run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on fixed user drops")
    s.add_argument("checkpoint")
    s.add_argument("--drops", type=int, default=10)
    s.add_argument("--config", help="reject the checkpoint unless it was trained with this config")
    s.add_argument("--graph", help="reject the checkpoint unless it was trained on this graph")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time action selection on several graph topologies")
    s.add_argument("--deployment")
    s.add_argument("--checkpoint", help="ps-crl checkpoint whose shared network is timed")
    s.add_argument("--topologies", default="tree,sparse,dense,complete")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iters", type=int, default=40)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError) as exc:
        print(f"coordtilt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
