"""Acceptance checks. Each test records a PASS/FAIL line shown in the
terminal summary. Training checks (5-7) run the full default budget and take
tens of minutes on one CPU."""

import csv
import itertools
import json
import math
import time

import networkx as nx
import numpy as np
import pytest

from coordtilt.baselines import DQNBaseline, random_policy_baseline
from coordtilt.cli import checkpoint_doc, load_checkpoint_file, main, make_estimator
from coordtilt.config import ExperimentConfig
from coordtilt.graph import CoordinationGraph, build_graph, coupling_matrix
from coordtilt.learner import CoordinatedQLearner, calibrate, edge_rewards, evaluate
from coordtilt.maxplus import brute_force_argmax, global_value, select_actions
from coordtilt.netsim import (
    Deployment,
    TiltEnv,
    compute_snapshot,
    drop_users,
    facing_pair_deployment,
    generate_deployment,
    snapshot_from_received_power,
)
from coordtilt.neural import Mlp

SEEDS = [0, 1, 2, 3, 4]


def random_tree(n, rng):
    return CoordinationGraph(n, [(int(rng.integers(0, k)), k) for k in range(1, n)])


def final_reward(est):
    return est.metrics_[-1]["eval_reward"]


# --- 1, 2: max-plus ----------------------------------------------------------------------


def test_c1_maxplus_tree_exactness(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, exact = 0.0, 0
    for _ in range(100):
        g = random_tree(int(rng.integers(2, 9)), rng)
        q = rng.uniform(size=(g.n_edges, 4, 4))
        actions, _ = select_actions(q, g)
        diff = abs(global_value(q, g, actions) - brute_force_argmax(q, g)[1])
        worst = max(worst, diff)
        exact += diff <= 1e-9
    elapsed = time.perf_counter() - t0
    ok = exact == 100 and elapsed < 10
    criterion(1, "max-plus tree exactness", ok, f"{exact}/100 exact, max diff {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_c2_maxplus_cyclic_quality(criterion):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    ratios = []
    while len(ratios) < 100:
        gx = nx.gnm_random_graph(6, 9, seed=int(rng.integers(1 << 30)))
        if not nx.is_connected(gx):
            continue
        g = CoordinationGraph(6, sorted(gx.edges))
        q = rng.uniform(size=(9, 4, 4))
        actions, _ = select_actions(q, g)
        ratios.append(global_value(q, g, actions) / brute_force_argmax(q, g)[1])
    elapsed = time.perf_counter() - t0
    ok = np.mean(ratios) >= 0.9 and min(ratios) >= 0.75 and elapsed < 30
    detail = f"mean {np.mean(ratios):.4f}, min {min(ratios):.4f}, {elapsed:.2f} s"
    criterion(2, "max-plus cyclic quality", ok, detail)
    assert ok


# --- 3: gradients ------------------------------------------------------------------------


def test_c3_gradient_correctness(criterion):
    h = 1e-5
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = Mlp((8, 32, 32, 256), seed=seed)
        x = rng.normal(size=(3, 8))
        g_out = rng.normal(size=(3, 256))
        analytic = np.concatenate([g.ravel() for g in net.backward(x, g_out)])
        flat = net.get_flat()
        numeric = np.empty_like(flat)
        for k in range(flat.size):
            p = flat.copy()
            p[k] += h
            net.set_flat(p)
            f_plus = np.sum(net.forward(x) * g_out)
            p[k] -= 2 * h
            net.set_flat(p)
            f_minus = np.sum(net.forward(x) * g_out)
            numeric[k] = (f_plus - f_minus) / (2 * h)
        net.set_flat(flat)
        # parameters whose gradient is ~0 (dead units) are compared absolutely
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
        worst = max(worst, float(rel.max()))
    ok = worst < 1e-4
    criterion(3, "gradient correctness", ok, f"max relative error {worst:.2e} over 20 nets")
    assert ok


# --- 4: radio examples and credit conservation --------------------------------------------


def test_c4_radio_examples_and_credit(criterion):
    errors = []
    snap = snapshot_from_received_power([[1e-10]], noise_power=1e-13)
    errors.append(abs(snap.sinr[0] / 1000.0 - 1))
    snap = snapshot_from_received_power([[1e-9], [1e-9]], noise_power=1e-13)
    errors.append(abs(snap.sinr[0] / (1e-9 / (1e-9 + 1e-13)) - 1))
    errors.append(abs(10 * math.log10(snap.sinr[0])) > 1e-3)  # ~0 dB
    snap = snapshot_from_received_power([[3.0]], noise_power=3.0, n_prb=50, prb_bandwidth=180e3)
    errors.append(abs(snap.throughput[0] / 9.0e6 - 1))
    radio_ok = max(errors) <= 1e-9

    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 12))
        gx = nx.gnm_random_graph(n, int(rng.integers(n - 1, n * (n - 1) // 2 + 1)), seed=int(rng.integers(1 << 30)))
        gx.add_edges_from((k, k + 1) for k in range(n - 1))  # no isolated nodes
        g = CoordinationGraph(n, sorted(gx.edges))
        r = rng.normal(scale=5.0, size=n)
        worst = max(worst, abs(edge_rewards(r, g).sum() - r.sum()) / max(1.0, abs(r.sum())))
    ok = radio_ok and worst <= 1e-9
    criterion(4, "radio examples and credit conservation", ok, f"radio max rel err {max(errors):.1e}, credit max err {worst:.1e}")
    assert ok


# --- 5-7: learning -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def six_cell_setup():
    cfg = ExperimentConfig()
    d = generate_deployment(cfg.n_stations, cfg.deployment_seed)
    g = build_graph(coupling_matrix(d, cfg.coupling_drops), "sparse")
    env = TiltEnv(d, cfg.n_users)
    norm = calibrate(env, cfg.n_calibration, cfg.calibration_seed)
    return d, g, env, norm


@pytest.mark.slow
def test_c5_learning_floor(criterion, six_cell_setup):
    d, g, _, norm = six_cell_setup
    base = random_policy_baseline(TiltEnv(d, 1000), norm, 1000, seed=0)
    threshold = base["mean"] + 3 * base["sem"]
    finals = []
    for seed in SEEDS:
        est = CoordinatedQLearner(random_state=seed).fit(TiltEnv(d, 1000, seed), g, norm)
        finals.append(final_reward(est))
    passed = sum(f >= threshold for f in finals)
    ok = passed >= 4
    detail = f"{passed}/5 seeds >= {threshold:.3f} (random {base['mean']:.3f} +- {base['sem']:.3f}); finals {np.round(finals, 3).tolist()}"
    criterion(5, "PS-CRL learning floor (6 cells)", ok, detail)
    assert ok


@pytest.mark.slow
def test_c6_facing_pair(criterion):
    d = facing_pair_deployment()
    env = TiltEnv(d, 1000)
    g = CoordinationGraph(2, [(0, 1)])
    norm = calibrate(env, 1000, 0)
    users = env.evaluation_drops(1)[0]
    est = CoordinatedQLearner(random_state=0, n_eval_drops=1).fit(TiltEnv(d, 1000, 0), g, norm)
    result = evaluate(est, env, norm, drops=[users])
    optimum = max(
        compute_snapshot(d, users, np.array(t)).cell_rewards.sum() for t in itertools.product(range(16), repeat=2)
    )
    ratio = result.raw_global[0] / optimum
    ok = ratio >= 0.95
    criterion(6, "facing-pair coordination", ok, f"tilts {result.tilts[0].tolist()}, {100 * ratio:.2f}% of the 256-config optimum")
    assert ok


@pytest.mark.slow
def test_c7_ps_crl_vs_s_dqn(criterion):
    d = generate_deployment(9, 42)
    g = build_graph(coupling_matrix(d, 3), "sparse")
    env = TiltEnv(d, 1000)
    norm = calibrate(env, 1000, 0)
    ps, sd = [], []
    for seed in SEEDS:
        ps.append(final_reward(CoordinatedQLearner(random_state=seed).fit(TiltEnv(d, 1000, seed), g, norm)))
        sd.append(final_reward(DQNBaseline(random_state=seed, target_update=2000).fit(TiltEnv(d, 1000, seed), None, norm)))
    ok = np.mean(ps) >= np.mean(sd)
    detail = f"PS-CRL {np.mean(ps):.3f} {np.round(ps, 3).tolist()} vs S-DQN {np.mean(sd):.3f} {np.round(sd, 3).tolist()}"
    criterion(7, "PS-CRL >= S-DQN (27 cells)", ok, detail)
    assert ok


# --- 8-10: artifacts ---------------------------------------------------------------------


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("COORDTILT_OUTPUT", str(tmp_path / "out"))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_c8_topology_latency_ordering(criterion, workdir):
    assert main(["generate", "--stations", "9", "--seed", "42", "-o", "d27.json"]) == 0
    assert main(["bench", "--deployment", "d27.json", "--trials", "100", "-o", "bench.csv"]) == 0
    rows = {r["topology"]: r for r in read_rows(workdir / "bench.csv")}
    order = ["tree", "sparse", "dense", "complete"]
    means = [float(rows[t]["mean_ms"]) for t in order]
    ok = all(a < b for a, b in zip(means, means[1:]))
    detail = ", ".join(f"{t} {m:.2f} ms ({rows[t]['n_edges']} edges)" for t, m in zip(order, means))
    criterion(8, "topology latency ordering", ok, detail)
    assert ok


def test_c9_csv_determinism(criterion, workdir):
    tiny = {"n_steps": 80, "eval_every": 40, "n_calibration": 40, "n_eval_drops": 2, "n_users": 300, "seeds": [0, 1]}
    (workdir / "tiny.json").write_text(json.dumps(tiny))
    mismatches = []
    for algo in ("ps-crl", "crl", "s-dqn", "i-dqn", "sweep", "c-sweep", "random"):
        for run in ("a", "b"):
            assert main(["train", "--config", "tiny.json", "--algo", algo, "-o", f"{algo}-{run}"]) == 0
        if (workdir / f"{algo}-a" / "metrics.csv").read_bytes() != (workdir / f"{algo}-b" / "metrics.csv").read_bytes():
            mismatches.append(f"train {algo}")
        if algo == "random":
            continue
        ckpt = workdir / f"{algo}-a" / "checkpoint_seed1_final.json"
        for run in ("a", "b"):
            assert main(["eval", str(ckpt), "--drops", "2", "-o", f"eval-{algo}-{run}"]) == 0
        for name in ("per_cell.csv", "throughput_cdf.csv"):
            if (workdir / f"eval-{algo}-a" / name).read_bytes() != (workdir / f"eval-{algo}-b" / name).read_bytes():
                mismatches.append(f"eval {algo} {name}")
    ok = not mismatches
    criterion(9, "CSV determinism", ok, "7 train + 6 eval reruns identical" if ok else f"differs: {mismatches}")
    assert ok


def test_c10_round_trips(criterion, workdir):
    problems = []
    d = generate_deployment(2, 3)
    d.save(workdir / "d.json")
    d2 = Deployment.load(workdir / "d.json")
    users = drop_users(d, 500, seed=5)
    tilts = np.arange(6) * 5 % 16
    a, b = compute_snapshot(d, users, tilts), compute_snapshot(d2, users, tilts)
    if a.sinr.tobytes() != b.sinr.tobytes() or a.cell_rewards.tobytes() != b.cell_rewards.tobytes():
        problems.append("deployment")

    g = build_graph(coupling_matrix(d, 2, n_users=300), "dense")
    g.save(workdir / "g.json")
    g2 = CoordinationGraph.load(workdir / "g.json")
    q = np.random.default_rng(0).uniform(size=(g.n_edges, 16, 16))
    if g2.fingerprint() != g.fingerprint() or select_actions(q, g)[0].tolist() != select_actions(q, g2)[0].tolist():
        problems.append("graph")

    cfg = ExperimentConfig(n_steps=60, eval_every=30, n_eval_drops=2, n_users=300)
    env = TiltEnv(d, 300)
    norm = calibrate(env, 40, 0)
    obs = env.observe(compute_snapshot(d, users, tilts))
    for algo in ("ps-crl", "crl", "s-dqn", "i-dqn", "sweep", "c-sweep"):
        cfg.algorithm = algo
        est = make_estimator(cfg, 0).fit(TiltEnv(d, 300, 0), g, norm)
        path = workdir / f"{algo}.json"
        path.write_text(json.dumps(checkpoint_doc(est.to_dict(), cfg.content_hash(), d, g, 0, "final")))
        _, d3, g3, back = load_checkpoint_file(path)
        r1, r2 = evaluate(est, env, norm, 3), evaluate(back, TiltEnv(d3, 300), back.normalizer_, 3)
        same = r1.per_drop.tobytes() == r2.per_drop.tobytes() and r1.raw_global.tobytes() == r2.raw_global.tobytes()
        if hasattr(est, "edge_payoffs"):
            same &= est.edge_payoffs(obs).tobytes() == back.edge_payoffs(obs, g3).tobytes()
        if not same:
            problems.append(f"checkpoint {algo}")
    ok = not problems
    criterion(10, "serialization round trips", ok, "deployment, graph, 6 checkpoint kinds identical" if ok else f"differs: {problems}")
    assert ok
