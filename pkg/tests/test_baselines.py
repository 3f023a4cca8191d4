import numpy as np
import pytest

from coordtilt.baselines import (
    CellQ,
    CoordinatedSweep,
    DQNBaseline,
    RandomPolicy,
    SweepBaseline,
    dqn_gradients,
    dqn_train_step,
    random_policy_baseline,
)
from coordtilt.graph import CoordinationGraph, build_graph, coupling_matrix
from coordtilt.learner import ReplayBuffer, Transition, calibrate, evaluate
from coordtilt.maxplus import brute_force_argmax, global_value
from coordtilt.netsim import RadioGeometry, TiltEnv, compute_snapshot, generate_deployment


@pytest.fixture(scope="module")
def three_cells():
    d = generate_deployment(1, seed=0)
    env = TiltEnv(d, n_users=300, seed=0)
    return d, env, calibrate(env, 100, seed=0)


@pytest.fixture(scope="module")
def six_cells():
    d = generate_deployment(2, seed=3)
    env = TiltEnv(d, n_users=200, seed=0)
    g = build_graph(coupling_matrix(d, 1, n_users=200), "sparse")
    return d, env, g, calibrate(env, 50, seed=1)


def random_batch(rng, B, n):
    return Transition(
        rng.normal(size=(B, n, 4)),
        rng.integers(0, 16, size=(B, n)),
        rng.normal(size=(B, n)),
        rng.normal(size=(B, n, 4)),
        np.zeros((B, n), dtype=int),
    )


class TestCellQ:
    def test_shapes(self):
        shared = CellQ(5, shared=True, seed=0)
        indep = CellQ(5, shared=False, seed=0)
        assert len(shared.nets) == 1 and len(indep.nets) == 5
        assert shared.nets[0].dims == (4, 32, 32, 16)
        assert shared.values(np.zeros((5, 4))).shape == (5, 16)
        assert indep.values(np.zeros((5, 4))).shape == (5, 16)

    def test_gamma_zero_target_is_own_reward(self):
        rng = np.random.default_rng(0)
        q = CellQ(3, seed=0)
        batch = random_batch(rng, 4, 3)
        _, delta = dqn_gradients(q, batch, 0.0)
        pred = np.stack([q.values(batch.obs[b])[np.arange(3), batch.action[b]] for b in range(4)])
        assert np.allclose(delta, batch.reward - pred)

    def test_bootstrap_is_target_max(self):
        rng = np.random.default_rng(1)
        q = CellQ(2, seed=0)
        batch = random_batch(rng, 3, 2)
        _, d0 = dqn_gradients(q, batch, 0.0)
        _, d1 = dqn_gradients(q, batch, 0.9)
        nxt = np.stack([q.values(batch.next_obs[b], target=True).max(axis=1) for b in range(3)])
        assert np.allclose(d1 - d0, 0.9 * nxt)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        q = CellQ(3, hidden=(6,), seed=0)
        batch = random_batch(rng, 5, 3)
        grads, _ = dqn_gradients(q, batch, 0.0)
        analytic = np.concatenate([g.ravel() for g in grads[0]])
        net = q.nets[0]
        flat = net.get_flat()
        for k in rng.choice(flat.size, 30, replace=False):
            vals = []
            for h in (1e-6, -1e-6):
                p = flat.copy()
                p[k] += h
                net.set_flat(p)
                vals.append(0.5 * np.sum(dqn_gradients(q, batch, 0.0)[1] ** 2) / 5)
            net.set_flat(flat)
            assert analytic[k] == pytest.approx((vals[0] - vals[1]) / 2e-6, rel=1e-4, abs=1e-8)

    def test_single_cell_modes_agree(self):
        rng = np.random.default_rng(3)
        buf = ReplayBuffer(50, 1)
        for _ in range(50):
            b = random_batch(rng, 1, 1)
            buf.add(Transition(b.obs[0], b.action[0], b.reward[0], b.next_obs[0], b.next_greedy[0]))
        a, b = CellQ(1, shared=True, seed=4), CellQ(1, shared=False, seed=4)
        for k in range(5):
            dqn_train_step(a, buf, 0.0, 8, k)
            dqn_train_step(b, buf, 0.0, 8, k)
        assert a.nets[0].get_flat().tobytes() == b.nets[0].get_flat().tobytes()


class TestDQNBaseline:
    def test_fit_predict(self, six_cells):
        _, env, _, norm = six_cells
        est = DQNBaseline(n_steps=80, eval_every=40, n_eval_drops=2, epsilon_decay_steps=40, random_state=0).fit(env, None, norm)
        assert [m["step"] for m in est.metrics_] == [40, 80]
        obs = np.random.default_rng(0).uniform(-5, 20, size=(6, 4))
        expected = np.argmax(est.q_.values(norm.transform(obs)), axis=1)
        assert np.array_equal(est.predict(obs), expected)
        assert est.algorithm == "s-dqn"

    def test_deterministic_and_round_trip(self, six_cells):
        d, _, _, norm = six_cells
        kw = dict(share_parameters=False, n_steps=60, eval_every=30, n_eval_drops=2, random_state=5)
        a = DQNBaseline(**kw).fit(TiltEnv(d, 200), None, norm)
        b = DQNBaseline(**kw).fit(TiltEnv(d, 200, seed=3), None, norm)
        assert repr(a.metrics_) == repr(b.metrics_)
        back = DQNBaseline.from_dict(a.to_dict())
        obs = np.random.default_rng(1).uniform(-5, 20, size=(6, 4))
        assert back.q_.values(norm.transform(obs)).tobytes() == a.q_.values(norm.transform(obs)).tobytes()


class TestSweeps:
    def test_sweep_is_monotone_and_best_response(self, three_cells):
        d, env, norm = three_cells
        est = SweepBaseline(passes=1, random_state=0).fit(env, None, norm)
        users = est._sweep_drop(env)
        geometry = RadioGeometry(d, users)

        def score(tilts):
            return compute_snapshot(d, users, tilts, geometry).cell_rewards.sum()

        assert score(est.tilts_) >= score(np.full(3, 8))
        last = np.random.default_rng(0).permutation(3)[-1]
        for t in range(16):
            trial = est.tilts_.copy()
            trial[last] = t
            assert score(trial) <= score(est.tilts_)
        assert est.n_evaluations_ == 48

    def test_sweep_ignores_observations(self, three_cells):
        _, env, norm = three_cells
        est = SweepBaseline().fit(env, None, norm)
        a = est.predict(np.zeros((3, 4)))
        b = est.predict(np.full((3, 4), 10.0))
        assert np.array_equal(a, b)

    def test_csweep_tables_and_tree_optimum(self, three_cells):
        d, env, norm = three_cells
        g = CoordinationGraph(3, [(0, 1), (1, 2)])
        est = CoordinatedSweep(random_state=0).fit(env, g, norm)
        users = est._sweep_drop(env)
        tilts = np.array([3, 12, 8])
        z = norm.transform_reward(compute_snapshot(d, users, tilts).cell_rewards)
        assert est.tables_[0, 3, 12] == pytest.approx(z[0] / 1 + z[1] / 2, rel=1e-12)
        _, best = brute_force_argmax(est.tables_, g)
        assert global_value(est.tables_, g, est.tilts_) == pytest.approx(best, abs=1e-9)

    def test_csweep_requires_matching_graph(self, three_cells):
        _, env, norm = three_cells
        with pytest.raises(ValueError):
            CoordinatedSweep().fit(env, CoordinationGraph(4, [(0, 1)]), norm)

    def test_round_trip(self, three_cells):
        _, env, norm = three_cells
        est = SweepBaseline().fit(env, None, norm)
        back = SweepBaseline.from_dict(est.to_dict())
        assert np.array_equal(back.predict(np.zeros((3, 4))), est.tilts_)


class TestRandom:
    def test_policy_deterministic(self, three_cells):
        _, env, _ = three_cells
        a = RandomPolicy(random_state=4).fit(env)
        b = RandomPolicy(random_state=4).fit(env)
        for _ in range(3):
            assert np.array_equal(a.predict(np.zeros((3, 4))), b.predict(np.zeros((3, 4))))

    def test_baseline_near_zero(self, six_cells):
        _, env, _, norm = six_cells
        out = random_policy_baseline(env, norm, 300, seed=0)
        assert set(out) == {"mean", "std", "sem"}
        assert out["sem"] == pytest.approx(out["std"] / np.sqrt(10))
        # calibration used other drops, so allow a small offset on top of sampling noise
        assert abs(out["mean"]) < 3 * out["std"] / np.sqrt(300) + 0.15

    def test_baseline_matches_direct_loop(self, six_cells):
        _, env, _, norm = six_cells
        out = random_policy_baseline(env, norm, 20, seed=1, n_drops=4)
        policy = RandomPolicy(6, 1).fit(env)
        drops = env.evaluation_drops(4)
        vals = [evaluate(policy, env, norm, drops=[drops[k % 4]], settle_steps=0).mean for k in range(20)]
        assert out["mean"] == pytest.approx(np.mean(vals), rel=1e-12)
