"""Coordinated Q-learning with edge value networks (PS-CRL and CRL).

Each edge ``(i, j)`` of the coordination graph carries a network mapping the
concatenated observations of its endpoints to a 16x16 payoff matrix. Joint
actions come from max-plus on those matrices. Edge networks are trained on
the per-edge TD error with each cell's reward split evenly among its
incident edges, bootstrapping (when ``gamma > 0``) from the target network at
the joint action max-plus selected in the next state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_graph_matches, check_joint_obs
from .maxplus import epsilon_greedy, select_actions
from .netsim import DEFAULT_TILT, N_TILTS, PERCENTILES, TiltEnv, compute_snapshot, drop_users
from .neural import AdamState, Mlp, adam_step, clip_by_global_norm, copy_params, net_from_dict, net_to_dict

OBS_DIM = len(PERCENTILES)


class Normalizer:
    """Observation scaling and reward standardization.

    Observations (SINR percentiles in dB) are divided by the largest SINR seen
    during calibration; per-cell rewards are standardized with the moments of
    calibration rewards.
    """

    def __init__(self, max_sinr=None, reward_mean=None, reward_std=None):
        self.max_sinr = max_sinr
        self.reward_mean = reward_mean
        self.reward_std = reward_std

    @property
    def calibrated(self):
        return self.max_sinr is not None and self.reward_std is not None

    def fit(self, max_sinr_db, cell_rewards):
        rewards = np.asarray(cell_rewards, dtype=float).ravel()
        if rewards.size < 2:
            raise ValueError("need at least two reward samples to calibrate")
        std = float(np.std(rewards))
        if not std > 0.0:
            raise ValueError("calibration rewards have zero variance")
        max_sinr = float(np.max(max_sinr_db))
        if max_sinr <= 0.0:
            raise ValueError("maximum SINR must be positive in dB to scale observations")
        self.max_sinr = max_sinr
        self.reward_mean = float(np.mean(rewards))
        self.reward_std = std
        return self

    def _check(self):
        if not self.calibrated:
            raise RuntimeError("normalizer is not calibrated")

    def transform(self, obs_db):
        self._check()
        return np.asarray(obs_db, dtype=float) / self.max_sinr

    def transform_reward(self, rewards):
        self._check()
        return (np.asarray(rewards, dtype=float) - self.reward_mean) / self.reward_std

    def to_dict(self):
        return {"max_sinr": self.max_sinr, "reward_mean": self.reward_mean, "reward_std": self.reward_std}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["max_sinr"], doc["reward_mean"], doc["reward_std"])


def calibrate(env: TiltEnv, n_random_configs=1000, seed=0):
    """Estimate normalization constants from uniformly random tilt configurations."""
    if n_random_configs < 2:
        raise ValueError("n_random_configs must be >= 2")
    rng = np.random.default_rng(seed)
    d = env.deployment
    max_sinr, rewards = [], []
    for _ in range(n_random_configs):
        users = drop_users(d, env.n_users, rng)
        tilts = rng.integers(0, N_TILTS, size=d.n_cells)
        snap = compute_snapshot(d, users, tilts)
        max_sinr.append(snap.sinr_db.max())
        rewards.append(snap.cell_rewards)
    return Normalizer().fit(max_sinr, rewards)


def linear_epsilon(step, start=1.0, end=0.01, decay_steps=5000):
    if decay_steps <= 0:
        return end
    frac = min(step / decay_steps, 1.0)
    return start + frac * (end - start)


@dataclass
class Transition:
    obs: np.ndarray  # (n_cells, 4), normalized
    action: np.ndarray  # (n_cells,)
    reward: np.ndarray  # (n_cells,), standardized
    next_obs: np.ndarray
    next_greedy: np.ndarray | None = None


class ReplayBuffer:
    """Fixed-capacity ring buffer of joint transitions with uniform sampling."""

    def __init__(self, capacity, n_cells, obs_dim=OBS_DIM):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, n_cells, obs_dim))
        self.action = np.zeros((capacity, n_cells), dtype=np.int64)
        self.reward = np.zeros((capacity, n_cells))
        self.next_obs = np.zeros((capacity, n_cells, obs_dim))
        self.next_greedy = np.zeros((capacity, n_cells), dtype=np.int64)
        self.size = 0
        self._cursor = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        if t.next_greedy is None:
            raise ValueError("transition is missing the next greedy action")
        if not np.isfinite(t.reward).all():
            raise ValueError("non-finite reward")
        k = self._cursor
        self.obs[k], self.action[k], self.reward[k] = t.obs, t.action, t.reward
        self.next_obs[k], self.next_greedy[k] = t.next_obs, t.next_greedy
        self._cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        if self.size < batch_size or self.size == 0:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.batch(idx)

    def batch(self, idx):
        return Transition(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.next_greedy[idx])


class EdgeQ:
    """Edge value networks: one shared network, or one per edge."""

    def __init__(self, graph, shared=True, hidden=(32, 32), n_actions=N_TILTS, lr=1e-4, seed=None, zero=False):
        self.shared = shared
        self.n_actions = n_actions
        self.dims = (2 * OBS_DIM, *hidden, n_actions * n_actions)
        self.n_edges_bound = None if shared else graph.n_edges
        rng = np.random.default_rng(seed)
        n_nets = 1 if shared else graph.n_edges
        self.nets = [Mlp(self.dims, rng, zero=zero) for _ in range(n_nets)]
        self.targets = [Mlp(self.dims, zero=True) for _ in range(n_nets)]
        self.optims = [AdamState.for_net(net, lr=lr) for net in self.nets]
        self.sync_targets()

    @property
    def mode(self):
        return "shared" if self.shared else "per-edge"

    def sync_targets(self):
        for net, target in zip(self.nets, self.targets):
            copy_params(net, target)

    def _check_graph(self, graph):
        if not self.shared and graph.n_edges != self.n_edges_bound:
            raise ValueError("per-edge networks are bound to the graph they were built for")

    def payoffs(self, obs, graph, target=False):
        """``(n_edges, A, A)`` payoff matrices; rows indexed by the action of the lower cell id."""
        self._check_graph(graph)
        nets = self.targets if target else self.nets
        i, j = graph.edges[:, 0], graph.edges[:, 1]
        x = np.concatenate([obs[i], obs[j]], axis=1)
        if self.shared:
            out = nets[0].forward(x)
        else:
            out = np.stack([net.forward(x[e]) for e, net in enumerate(nets)])
        return out.reshape(graph.n_edges, self.n_actions, self.n_actions)

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_actions": self.n_actions,
            "nets": [net_to_dict(n, s) for n, s in zip(self.nets, self.optims)],
            "targets": [net_to_dict(t) for t in self.targets],
        }

    @classmethod
    def from_dict(cls, doc, graph):
        q = cls.__new__(cls)
        q.shared = doc["mode"] == "shared"
        q.n_actions = doc["n_actions"]
        loaded = [net_from_dict(n) for n in doc["nets"]]
        q.nets = [n for n, _ in loaded]
        q.optims = [s for _, s in loaded]
        q.targets = [net_from_dict(t)[0] for t in doc["targets"]]
        q.dims = q.nets[0].dims
        q.n_edges_bound = None if q.shared else len(q.nets)
        q._check_graph(graph)
        return q


def edge_payoffs(q: EdgeQ, joint_obs, graph):
    return q.payoffs(joint_obs, graph)


def act(q: EdgeQ, joint_obs, graph, epsilon=0.0, seed=None, max_iters=40):
    """Max-plus greedy joint action, then per-agent epsilon-greedy.

    Returns ``(action, greedy, diagnostics)``.
    """
    greedy, diag = select_actions(q.payoffs(joint_obs, graph), graph, max_iters=max_iters)
    return epsilon_greedy(greedy, epsilon, seed, q.n_actions), greedy, diag


def edge_rewards(rewards, graph):
    """Per-edge credit ``r_i/|N(i)| + r_j/|N(j)|`` for rewards of shape ``(..., n_cells)``."""
    rewards = np.asarray(rewards, dtype=float)
    deg = graph.degrees.astype(float)
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    return rewards[..., i] / deg[i] + rewards[..., j] / deg[j]


def td_gradients(q: EdgeQ, batch: Transition, graph, gamma=0.0):
    """Gradients of the mean-over-batch, summed-over-edges loss ``0.5 * delta**2``.

    Returns ``(grads_per_net, delta)`` with ``delta`` of shape ``(B, n_edges)``.
    """
    q._check_graph(graph)
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    A = q.n_actions
    B, E = len(batch.action), graph.n_edges
    target = edge_rewards(batch.reward, graph)
    x = np.concatenate([batch.obs[:, i], batch.obs[:, j]], axis=-1)
    idx = batch.action[:, i] * A + batch.action[:, j]
    if gamma != 0.0:
        x_next = np.concatenate([batch.next_obs[:, i], batch.next_obs[:, j]], axis=-1)
        idx_next = batch.next_greedy[:, i] * A + batch.next_greedy[:, j]
        if q.shared:
            out_next = q.targets[0].forward(x_next.reshape(B * E, -1)).reshape(B, E, -1)
        else:
            out_next = np.stack([t.forward(x_next[:, e]) for e, t in enumerate(q.targets)], axis=1)
        target = target + gamma * np.take_along_axis(out_next, idx_next[..., None], axis=2)[..., 0]

    def grads_for(net, rows, cols, y):
        acts = net.activations(rows)
        out = acts[-1]
        r = np.arange(len(rows))
        delta = y - out[r, cols]
        g = np.zeros_like(out)
        g[r, cols] = -delta / B
        return net.backward(rows, g, acts), delta

    if q.shared:
        grads, delta = grads_for(q.nets[0], x.reshape(B * E, -1), idx.ravel(), target.ravel())
        return [grads], delta.reshape(B, E)
    all_grads, deltas = [], []
    for e, net in enumerate(q.nets):
        grads, delta = grads_for(net, x[:, e], idx[:, e], target[:, e])
        all_grads.append(grads)
        deltas.append(delta)
    return all_grads, np.stack(deltas, axis=1)


def train_step(q: EdgeQ, buffer: ReplayBuffer, graph, gamma=0.0, batch_size=32, rng=None, max_grad_norm=10.0):
    """Sample a batch, take one Adam step per network, return loss statistics."""
    if len(buffer) == 0:
        raise ValueError("replay buffer is empty")
    batch = buffer.sample(batch_size, np.random.default_rng(rng))
    grads, delta = td_gradients(q, batch, graph, gamma)
    loss = float(np.mean(delta**2))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite TD loss")
    norms = []
    for net, opt, g in zip(q.nets, q.optims, grads):
        g, norm = clip_by_global_norm(g, max_grad_norm)
        norms.append(norm)
        adam_step(net, opt, g)
    return {"loss": loss, "grad_norm": float(np.mean(norms))}


@dataclass
class EvalResult:
    per_drop: np.ndarray  # mean standardized cell reward per drop
    raw_global: np.ndarray  # unstandardized global reward per drop
    per_cell: np.ndarray  # (n_drops, n_cells) standardized
    throughputs: list = field(default_factory=list)  # per-drop user throughputs (bit/s)
    tilts: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.per_drop))

    @property
    def std(self):
        return float(np.std(self.per_drop))


def evaluate(
    policy, env: TiltEnv, normalizer: Normalizer, n_drops=10, drops=None, reference_tilt=DEFAULT_TILT, settle_steps=1
):
    """Greedy evaluation on fixed user drops.

    For each drop the policy first observes the network at the uniform
    reference tilt. It then acts ``settle_steps`` times, each time observing
    the drop under its own previous choice, so the scored observation comes
    from the configuration the policy itself deploys. The final joint tilt is
    scored on that same drop.
    """
    if n_drops < 1:
        raise ValueError("n_drops must be >= 1")
    d = env.deployment
    drops = drops if drops is not None else env.evaluation_drops(n_drops)
    per_drop, raw, per_cell, thr, tilts_out = [], [], [], [], []
    reference = np.full(d.n_cells, reference_tilt)
    for users in drops:
        obs = env.observe(compute_snapshot(d, users, reference))
        tilts = np.asarray(policy.predict(obs), dtype=np.int64)
        for _ in range(settle_steps):
            obs = env.observe(compute_snapshot(d, users, tilts))
            tilts = np.asarray(policy.predict(obs), dtype=np.int64)
        snap = compute_snapshot(d, users, tilts)
        z = normalizer.transform_reward(snap.cell_rewards)
        per_drop.append(float(np.mean(z)))
        raw.append(float(np.sum(snap.cell_rewards)))
        per_cell.append(z)
        thr.append(snap.throughput)
        tilts_out.append(tilts)
    return EvalResult(np.array(per_drop), np.array(raw), np.array(per_cell), thr, tilts_out)


class _TrainingMixin:
    """Shared pieces of the learning estimators' training loops."""

    def _streams(self):
        ss = np.random.SeedSequence(self.random_state)
        return [np.random.default_rng(s) for s in ss.spawn(5)]

    def _resolve_normalizer(self, env, normalizer, rng):
        if normalizer is None:
            normalizer = calibrate(env, self.n_calibration, rng)
        if not normalizer.calibrated:
            raise ValueError("normalizer must be calibrated")
        return normalizer

    def _epsilon(self, step):
        return linear_epsilon(step, self.epsilon_start, self.epsilon_end, self.epsilon_decay_steps)

    def _record_eval(self, env, step, loss, epsilon):
        result = evaluate(self, env, self.normalizer_, self.n_eval_drops)
        row = {"step": step, "eval_reward": result.mean, "loss": loss, "epsilon": epsilon}
        self.metrics_.append(row)
        if result.mean > self.best_eval_reward_:
            self.best_eval_reward_ = result.mean
            self._snapshot_best()
        return result


class CoordinatedQLearner(_TrainingMixin, BaseEstimator):
    """PS-CRL (``share_parameters=True``) and CRL (``False``).

    ``fit(env, graph)`` trains edge value networks by interacting with a
    :class:`TiltEnv`; ``predict(joint_obs)`` maps a ``(n_cells, 4)`` matrix of
    SINR percentiles (dB) to a greedy joint tilt via max-plus.
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
        target_update=500,
        max_iters=40,
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
        self.max_iters = max_iters
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
        return "ps-crl" if self.share_parameters else "crl"

    def _init_model(self, graph, init_rng):
        self.q_ = EdgeQ(
            graph, self.share_parameters, tuple(self.hidden_layers), N_TILTS, self.learning_rate, init_rng
        )

    def _snapshot_best(self):
        self.best_params_ = [[p.copy() for p in net.params] for net in self.q_.nets]

    def fit(self, env: TiltEnv, graph, normalizer: Normalizer | None = None):
        check_graph_matches(graph, env.n_cells)
        init_rng, drop_rng, explore_rng, replay_rng, calib_rng = self._streams()
        self.graph_ = graph
        self.n_cells_ = env.n_cells
        self.normalizer_ = self._resolve_normalizer(env, normalizer, calib_rng)
        self._init_model(graph, init_rng)
        self.metrics_ = []
        self.latencies_ = []
        self.best_eval_reward_ = -np.inf
        self.best_params_ = None
        self.n_train_steps_ = 0
        env.rng = drop_rng

        buffer = ReplayBuffer(self.buffer_capacity, env.n_cells)
        tilts = np.full(env.n_cells, DEFAULT_TILT)
        obs = self.normalizer_.transform(env.observe(env.step(tilts)))
        pending = None
        loss = float("nan")
        for step in range(self.n_steps):
            eps = self._epsilon(step)
            t0 = time.perf_counter()
            action, greedy, diag = act(self.q_, obs, graph, eps, explore_rng, self.max_iters)
            self.latencies_.append((step, time.perf_counter() - t0, diag.iterations))
            if pending is not None:
                pending.next_greedy = greedy
                buffer.add(pending)
            snap = env.step(action)
            next_obs = self.normalizer_.transform(env.observe(snap))
            reward = self.normalizer_.transform_reward(snap.cell_rewards)
            pending = Transition(obs, action, reward, next_obs)
            obs = next_obs
            if len(buffer) >= self.batch_size:
                stats = train_step(self.q_, buffer, graph, self.gamma, self.batch_size, replay_rng, self.max_grad_norm)
                loss = stats["loss"]
                self.n_train_steps_ += 1
                if self.n_train_steps_ % self.target_update == 0:
                    self.q_.sync_targets()
            if (step + 1) % self.eval_every == 0 or step + 1 == self.n_steps:
                self._record_eval(env, step + 1, loss, eps)
        return self

    def predict(self, joint_obs):
        check_is_fitted(self, "q_")
        obs = self.normalizer_.transform(check_joint_obs(joint_obs, self.n_cells_))
        greedy, _ = select_actions(self.q_.payoffs(obs, self.graph_), self.graph_, self.max_iters)
        return greedy

    def edge_payoffs(self, joint_obs, graph=None):
        check_is_fitted(self, "q_")
        obs = self.normalizer_.transform(check_joint_obs(joint_obs, self.n_cells_))
        return self.q_.payoffs(obs, graph or self.graph_)

    def use_best(self):
        """Swap the online networks for the best-evaluated parameters."""
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
            "graph": self.graph_.to_dict(),
            "edge_q": self.q_.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        from .graph import CoordinationGraph

        params = dict(doc["params"])
        params["hidden_layers"] = tuple(params["hidden_layers"])
        est = cls(**params)
        est.graph_ = CoordinationGraph.from_dict(doc["graph"])
        est.n_cells_ = est.graph_.n_nodes
        est.normalizer_ = Normalizer.from_dict(doc["normalizer"])
        est.q_ = EdgeQ.from_dict(doc["edge_q"], est.graph_)
        est.metrics_ = []
        return est
