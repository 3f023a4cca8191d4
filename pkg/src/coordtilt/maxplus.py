"""Max-plus message passing over a coordination graph.

Payoffs are given as one ``(A, A)`` matrix per canonical edge ``(i, j)``,
rows indexed by ``a_i``. Messages are updated synchronously and normalized to
zero mean; after every sweep a greedy joint action is decoded and the best
one seen so far is kept (anytime solution).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BRUTE_FORCE_LIMIT = 10**7


def _check_payoffs(payoffs, graph):
    payoffs = np.asarray(payoffs, dtype=float)
    if payoffs.ndim != 3 or payoffs.shape[0] != graph.n_edges or payoffs.shape[1] != payoffs.shape[2]:
        raise ValueError(
            f"expected payoffs of shape ({graph.n_edges}, A, A), got {payoffs.shape}"
        )
    if not np.isfinite(payoffs).all():
        raise ValueError("payoffs must be finite")
    return payoffs


def global_value(payoffs, graph, actions):
    """Sum of edge payoffs at a joint action."""
    payoffs = np.asarray(payoffs, dtype=float)
    actions = np.asarray(actions)
    if payoffs.shape[0] != graph.n_edges or actions.shape != (graph.n_nodes,):
        raise ValueError("payoffs/actions do not match the graph")
    if graph.n_edges == 0:
        return 0.0
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    return float(payoffs[np.arange(graph.n_edges), actions[i], actions[j]].sum())


@dataclass
class MessageState:
    """Directed messages: rows ``0..E-1`` carry ``i -> j`` for edge ``(i, j)``,
    rows ``E..2E-1`` carry ``j -> i``."""

    messages: np.ndarray
    iteration: int = 0
    best_action: np.ndarray | None = None
    best_value: float = -np.inf
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, graph, n_actions):
        return cls(np.zeros((2 * graph.n_edges, n_actions)))


class _Wiring:
    # index arrays for the directed edge set, shared across iterations
    def __init__(self, graph, payoffs):
        e = graph.n_edges
        i, j = graph.edges[:, 0], graph.edges[:, 1]
        self.n_nodes = graph.n_nodes
        self.sender = np.concatenate([i, j])
        self.receiver = np.concatenate([j, i])
        self.reverse = np.concatenate([np.arange(e, 2 * e), np.arange(e)])
        # directed[d, a_sender, a_receiver]
        self.directed = np.concatenate([payoffs, payoffs.transpose(0, 2, 1)])

    def incoming(self, messages):
        total = np.zeros((self.n_nodes, messages.shape[1]))
        np.add.at(total, self.receiver, messages)
        return total


def decode(messages, wiring):
    """Greedy actions from summed incoming messages; ties go to the lowest index."""
    return np.argmax(wiring.incoming(messages), axis=1)


def pass_messages_once(payoffs, graph, state: MessageState, _wiring=None):
    payoffs = _check_payoffs(payoffs, graph)
    w = _wiring or _Wiring(graph, payoffs)
    old = state.messages
    belief = w.incoming(old)
    # sum of messages into the sender, excluding the one from the receiver
    pre = belief[w.sender] - old[w.reverse]
    new = np.max(w.directed + pre[:, :, None], axis=1)
    new -= new.mean(axis=1, keepdims=True)
    actions = decode(new, w)
    value = global_value(payoffs, graph, actions)
    state.messages = new
    state.iteration += 1
    state.history.append(value)
    if value > state.best_value:
        state.best_value = value
        state.best_action = actions
    return state


@dataclass(frozen=True)
class SelectionDiagnostics:
    iterations: int
    reason: str  # "converged", "cycle" or "max_iters"
    best_value: float
    values: tuple = ()


def select_actions(payoffs, graph, max_iters=40, tol=1e-9):
    """Approximately maximize the summed edge payoffs with max-plus.

    Stops on message convergence (max-norm change below ``tol``), on an exact
    recurrence of a previous message state, or after ``max_iters`` sweeps.
    Returns the best joint action seen and diagnostics.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    payoffs = _check_payoffs(payoffs, graph)
    n_actions = payoffs.shape[1] if graph.n_edges else 1
    if graph.n_edges == 0:
        return np.zeros(graph.n_nodes, dtype=np.int64), SelectionDiagnostics(0, "converged", 0.0)
    w = _Wiring(graph, payoffs)
    state = MessageState.zeros(graph, n_actions)
    seen = {np.round(state.messages, 9).tobytes()}
    reason = "max_iters"
    while state.iteration < max_iters:
        old = state.messages
        pass_messages_once(payoffs, graph, state, w)
        if np.max(np.abs(state.messages - old)) < tol:
            reason = "converged"
            break
        key = np.round(state.messages, 9).tobytes()
        if key in seen:
            reason = "cycle"
            break
        seen.add(key)
    diag = SelectionDiagnostics(state.iteration, reason, state.best_value, tuple(state.history))
    return np.asarray(state.best_action, dtype=np.int64), diag


def brute_force_argmax(payoffs, graph, n_actions=None):
    """Exact maximizer by enumeration; ties go to the lexicographically smallest action."""
    payoffs = np.asarray(payoffs, dtype=float)
    n_actions = n_actions or (payoffs.shape[1] if payoffs.size else 1)
    n = graph.n_nodes
    if n_actions**n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"joint action space {n_actions}^{n} exceeds {BRUTE_FORCE_LIMIT}")
    table = np.zeros((n_actions,) * n)
    for (i, j), q in zip(graph.edges, payoffs):
        shape = [1] * n
        shape[i], shape[j] = n_actions, n_actions
        table = table + q.reshape(shape)
    flat = int(np.argmax(table))
    actions = np.array(np.unravel_index(flat, table.shape), dtype=np.int64)
    return actions, float(table.reshape(-1)[flat])


def epsilon_greedy(actions, epsilon, seed=None, n_actions=16):
    """Each agent independently switches to a uniform random action with probability ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    actions = np.array(actions, dtype=np.int64, copy=True)
    explore = rng.random(actions.shape) < epsilon
    random_actions = rng.integers(0, n_actions, size=actions.shape)
    actions[explore] = random_actions[explore]
    return actions
