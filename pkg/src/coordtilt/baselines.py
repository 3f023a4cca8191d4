"""Comparison methods: independent and shared DQN, greedy sweeps, random tilts.

All of them use the same :class:`~coordtilt.learner.Normalizer` and the same
evaluation protocol as the coordinated learner, so their scores are directly
comparable.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_graph_matches, check_joint_obs
from .learner import OBS_DIM, Normalizer, ReplayBuffer, Transition, _TrainingMixin, evaluate
from .maxplus import select_actions
from .netsim import DEFAULT_TILT, N_TILTS, TiltEnv, compute_snapshot, drop_users
from .neural import AdamState, Mlp, adam_step, clip_by_global_norm, copy_params, net_from_dict, net_to_dict

SWEEP_DROP_SEED = 2_000_003


class CellQ:
    """Per-cell Q-networks mapping one cell's observation to 16 action values."""

    def __init__(self, n_cells, shared=True, hidden=(32, 32), n_actions=N_TILTS, lr=1e-4, seed=None):
        self.shared = shared
        self.n_cells = n_cells
        self.n_actions = n_actions
        self.dims = (OBS_DIM, *hidden, n_actions)
        rng = np.random.default_rng(seed)
        n_nets = 1 if shared else n_cells
        self.nets = [Mlp(self.dims, rng) for _ in range(n_nets)]
        self.targets = [Mlp(self.dims, zero=True) for _ in range(n_nets)]
        self.optims = [AdamState.for_net(net, lr=lr) for net in self.nets]
        self.sync_targets()

    def sync_targets(self):
        for net, target in zip(self.nets, self.targets):
            copy_params(net, target)

    def values(self, obs, target=False):
        """``(n_cells, A)`` action values for a joint observation."""
        nets = self.targets if target else self.nets
        if self.shared:
            return nets[0].forward(obs)
        return np.stack([net.forward(obs[c]) for c, net in enumerate(nets)])

    def to_dict(self):
        return {
            "mode": "shared" if self.shared else "independent",
            "n_cells": self.n_cells,
            "n_actions": self.n_actions,
            "nets": [net_to_dict(n, s) for n, s in zip(self.nets, self.optims)],
            "targets": [net_to_dict(t) for t in self.targets],
        }

    @classmethod
    def from_dict(cls, doc):
        q = cls.__new__(cls)
        q.shared = doc["mode"] == "shared"
        q.n_cells = doc["n_cells"]
        q.n_actions = doc["n_actions"]
        loaded = [net_from_dict(n) for n in doc["nets"]]
        q.nets = [n for n, _ in loaded]
        q.optims = [s for _, s in loaded]
        q.targets = [net_from_dict(t)[0] for t in doc["targets"]]
        q.dims = q.nets[0].dims
        return q


def dqn_gradients(q: CellQ, batch: Transition, gamma=0.0):
    """Per-network gradients of the mean-over-batch, summed-over-cells ``0.5 * delta**2``.

    In independent mode column ``c`` of the batch may come from a different
    draw of transitions for every cell, so each network trains on its own sample.
    """
    B = batch.action.shape[0]
    n = q.n_cells
    target = batch.reward.copy()
    if gamma != 0.0:
        nxt = np.stack([q.values(batch.next_obs[b], target=True) for b in range(B)])
        target = target + gamma * nxt.max(axis=2)

    def grads_for(net, x, a, y):
        acts = net.activations(x)
        r = np.arange(len(x))
        delta = y - acts[-1][r, a]
        g = np.zeros_like(acts[-1])
        g[r, a] = -delta / B
        return net.backward(x, g, acts), delta

    if q.shared:
        grads, delta = grads_for(q.nets[0], batch.obs.reshape(B * n, -1), batch.action.ravel(), target.ravel())
        return [grads], delta.reshape(B, n)
    out, deltas = [], []
    for c, net in enumerate(q.nets):
        grads, delta = grads_for(net, batch.obs[:, c], batch.action[:, c], target[:, c])
        out.append(grads)
        deltas.append(delta)
    return out, np.stack(deltas, axis=1)


def _gather_per_cell(buffer: ReplayBuffer, idx):
    # idx has shape (B, n_cells); cell c uses transitions idx[:, c]
    cells = np.arange(idx.shape[1])
    return Transition(
        buffer.obs[idx, cells],
        buffer.action[idx, cells],
        buffer.reward[idx, cells],
        buffer.next_obs[idx, cells],
        buffer.next_greedy[idx, cells],
    )


def dqn_train_step(q: CellQ, buffer: ReplayBuffer, gamma=0.0, batch_size=32, rng=None, max_grad_norm=10.0):
    rng = np.random.default_rng(rng)
    if len(buffer) < batch_size or len(buffer) == 0:
        raise ValueError(f"buffer holds {len(buffer)} transitions, need {batch_size}")
    if q.shared:
        batch = buffer.sample(batch_size, rng)
    else:
        idx = rng.integers(0, len(buffer), size=(batch_size, q.n_cells))
        batch = _gather_per_cell(buffer, idx)
    grads, delta = dqn_gradients(q, batch, gamma)
    loss = float(np.mean(delta**2))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite TD loss")
    for net, opt, g in zip(q.nets, q.optims, grads):
        g, _ = clip_by_global_norm(g, max_grad_norm)
        adam_step(net, opt, g)
    return {"loss": loss}


class DQNBaseline(_TrainingMixin, BaseEstimator):
    """Uncoordinated per-cell DQN: S-DQN (shared network) or I-DQN (one per cell).

    Each cell picks its own tilt from its own observation and learns from its
    own standardized reward.
    """

    def __init__(
        self,
        share_parameters=True,
        learning_rate=1e-4,
        gamma=0.0,
        batch_size=32,
        epsilon_start=1.0,
        epsilon_end=0.01,
        epsilon_decay_steps=5000,
        target_update=2000,
        buffer_capacity=5000,
        hidden_layers=(32, 32),
        n_steps=10000,
        eval_every=250,
        n_eval_drops=10,
        n_calibration=1000,
        max_grad_norm=10.0,
        random_state=0,
    ):
        self.share_parameters = share_parameters
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.batch_size = batch_size
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay_steps = epsilon_decay_steps
        self.target_update = target_update
        self.buffer_capacity = buffer_capacity
        self.hidden_layers = hidden_layers
        self.n_steps = n_steps
        self.eval_every = eval_every
        self.n_eval_drops = n_eval_drops
        self.n_calibration = n_calibration
        self.max_grad_norm = max_grad_norm
        self.random_state = random_state

    @property
    def algorithm(self):
        return "s-dqn" if self.share_parameters else "i-dqn"

    def _snapshot_best(self):
        self.best_params_ = [[p.copy() for p in net.params] for net in self.q_.nets]

    def _greedy(self, obs):
        return np.argmax(self.q_.values(obs), axis=1)

    def fit(self, env: TiltEnv, graph=None, normalizer: Normalizer | None = None):
        init_rng, drop_rng, explore_rng, replay_rng, calib_rng = self._streams()
        self.n_cells_ = env.n_cells
        self.normalizer_ = self._resolve_normalizer(env, normalizer, calib_rng)
        self.q_ = CellQ(env.n_cells, self.share_parameters, tuple(self.hidden_layers), N_TILTS, self.learning_rate, init_rng)
        self.metrics_ = []
        self.latencies_ = []
        self.best_eval_reward_ = -np.inf
        self.best_params_ = None
        self.n_train_steps_ = 0
        env.rng = drop_rng

        buffer = ReplayBuffer(self.buffer_capacity, env.n_cells)
        obs = self.normalizer_.transform(env.observe(env.step(np.full(env.n_cells, DEFAULT_TILT))))
        loss = float("nan")
        for step in range(self.n_steps):
            eps = self._epsilon(step)
            t0 = time.perf_counter()
            greedy = self._greedy(obs)
            self.latencies_.append((step, time.perf_counter() - t0, 0))
            explore = explore_rng.random(env.n_cells) < eps
            action = np.where(explore, explore_rng.integers(0, N_TILTS, env.n_cells), greedy)
            snap = env.step(action)
            next_obs = self.normalizer_.transform(env.observe(snap))
            reward = self.normalizer_.transform_reward(snap.cell_rewards)
            # the max over next actions is recomputed from the target network, so no stored a*'
            buffer.add(Transition(obs, action, reward, next_obs, np.zeros(env.n_cells, dtype=np.int64)))
            obs = next_obs
            if len(buffer) >= self.batch_size:
                loss = dqn_train_step(self.q_, buffer, self.gamma, self.batch_size, replay_rng, self.max_grad_norm)["loss"]
                self.n_train_steps_ += 1
                if self.n_train_steps_ % self.target_update == 0:
                    self.q_.sync_targets()
            if (step + 1) % self.eval_every == 0 or step + 1 == self.n_steps:
                self._record_eval(env, step + 1, loss, eps)
        return self

    def predict(self, joint_obs):
        check_is_fitted(self, "q_")
        obs = self.normalizer_.transform(check_joint_obs(joint_obs, self.n_cells_))
        return self._greedy(obs)

    def use_best(self):
        check_is_fitted(self, "q_")
        if self.best_params_ is not None:
            for net, params in zip(self.q_.nets, self.best_params_):
                net.params = [p.copy() for p in params]
        return self

    def to_dict(self):
        check_is_fitted(self, "q_")
        return {
            "algorithm": self.algorithm,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "normalizer": self.normalizer_.to_dict(),
            "cell_q": self.q_.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        params = dict(doc["params"])
        params["hidden_layers"] = tuple(params["hidden_layers"])
        est = cls(**params)
        est.normalizer_ = Normalizer.from_dict(doc["normalizer"])
        est.q_ = CellQ.from_dict(doc["cell_q"])
        est.n_cells_ = est.q_.n_cells
        est.metrics_ = []
        return est


class _FixedConfigPolicy(BaseEstimator):
    # policies that settle on one joint tilt at fit time and ignore observations

    def predict(self, joint_obs):
        check_is_fitted(self, "tilts_")
        check_joint_obs(joint_obs, len(self.tilts_))
        return self.tilts_.copy()

    def _sweep_drop(self, env):
        return drop_users(env.deployment, env.n_users, np.random.default_rng(SWEEP_DROP_SEED + self.random_state))

    def to_dict(self):
        check_is_fitted(self, "tilts_")
        return {
            "algorithm": self.algorithm,
            "params": self.get_params(),
            "normalizer": self.normalizer_.to_dict(),
            "tilts": self.tilts_.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        est = cls(**doc["params"])
        est.normalizer_ = Normalizer.from_dict(doc["normalizer"])
        est.tilts_ = np.asarray(doc["tilts"], dtype=np.int64)
        est.metrics_ = []
        return est


class SweepBaseline(_FixedConfigPolicy):
    """Coordinate ascent on the global reward, one cell at a time.

    Starting from the default tilt, cells are visited in a seeded random
    order; each tries all 16 tilts with the others frozen and keeps the best
    (lowest tilt on ties). Scored on one fixed sweep drop.
    """

    algorithm = "sweep"

    def __init__(self, passes=1, random_state=0):
        self.passes = passes
        self.random_state = random_state

    def fit(self, env: TiltEnv, graph=None, normalizer: Normalizer | None = None):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        rng = np.random.default_rng(self.random_state)
        d = env.deployment
        self.normalizer_ = normalizer
        users = self._sweep_drop(env)
        from .netsim import RadioGeometry

        geometry = RadioGeometry(d, users)
        tilts = np.full(d.n_cells, DEFAULT_TILT)
        self.n_evaluations_ = 0
        for _ in range(self.passes):
            for c in rng.permutation(d.n_cells):
                scores = np.empty(N_TILTS)
                for t in range(N_TILTS):
                    trial = tilts.copy()
                    trial[c] = t
                    scores[t] = compute_snapshot(d, users, trial, geometry).cell_rewards.sum()
                    self.n_evaluations_ += 1
                tilts[c] = int(np.argmax(scores))
        self.tilts_ = tilts
        self.metrics_ = []
        return self


class CoordinatedSweep(_FixedConfigPolicy):
    """Pairwise exhaustive sweep feeding max-plus.

    For every edge all 256 tilt pairs are scored with the other cells at the
    default tilt; the edge table holds the credit-split standardized reward
    ``z_i/|N(i)| + z_j/|N(j)|``. Max-plus on those tables gives the joint tilt.
    """

    algorithm = "c-sweep"

    def __init__(self, max_iters=40, random_state=0):
        self.max_iters = max_iters
        self.random_state = random_state

    def fit(self, env: TiltEnv, graph, normalizer: Normalizer):
        check_graph_matches(graph, env.n_cells)
        from .learner import edge_rewards
        from .netsim import RadioGeometry

        d = env.deployment
        self.normalizer_ = normalizer
        users = self._sweep_drop(env)
        geometry = RadioGeometry(d, users)
        tables = np.empty((graph.n_edges, N_TILTS, N_TILTS))
        deg = graph.degrees.astype(float)
        for e, (i, j) in enumerate(graph.edges):
            for a in range(N_TILTS):
                for b in range(N_TILTS):
                    tilts = np.full(d.n_cells, DEFAULT_TILT)
                    tilts[i], tilts[j] = a, b
                    z = normalizer.transform_reward(compute_snapshot(d, users, tilts, geometry).cell_rewards)
                    tables[e, a, b] = z[i] / deg[i] + z[j] / deg[j]
        self.tables_ = tables
        self.tilts_, self.diagnostics_ = select_actions(tables, graph, self.max_iters)
        self.metrics_ = []
        return self


class RandomPolicy(BaseEstimator):
    """Uniformly random joint tilt on every call."""

    algorithm = "random"

    def __init__(self, n_cells=1, random_state=0):
        self.n_cells = n_cells
        self.random_state = random_state

    def fit(self, env=None, graph=None, normalizer=None):
        if env is not None:
            self.n_cells = env.n_cells
        self.rng_ = np.random.default_rng(self.random_state)
        self.normalizer_ = normalizer
        self.metrics_ = []
        return self

    def predict(self, joint_obs):
        check_is_fitted(self, "rng_")
        check_joint_obs(joint_obs, self.n_cells)
        return self.rng_.integers(0, N_TILTS, size=self.n_cells)


def random_policy_baseline(env: TiltEnv, normalizer: Normalizer, n_configs=1000, seed=0, n_drops=10):
    """Score of uniformly random tilts on the evaluation drops.

    Configuration ``k`` is scored on evaluation drop ``k % n_drops``. Returns
    ``{"mean", "std", "sem"}`` where ``std`` is over single-drop scores and
    ``sem = std / sqrt(n_drops)`` is the spread of a mean over ``n_drops``.
    """
    if n_configs < 2:
        raise ValueError("n_configs must be >= 2")
    drops = env.evaluation_drops(n_drops)
    policy = RandomPolicy(env.n_cells, seed).fit(env)
    scores = []
    for k in range(n_configs):
        result = evaluate(policy, env, normalizer, drops=[drops[k % n_drops]], settle_steps=0)
        scores.append(result.per_drop[0])
    scores = np.asarray(scores)
    std = float(np.std(scores))
    return {"mean": float(np.mean(scores)), "std": std, "sem": float(std / np.sqrt(n_drops))}
