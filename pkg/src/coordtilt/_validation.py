import numpy as np
from sklearn.utils import check_array

from .netsim import N_TILTS, PERCENTILES


def check_joint_obs(obs, n_cells):
    """Validate a ``(n_cells, 4)`` joint observation."""
    obs = check_array(obs, dtype=np.float64, ensure_2d=True)
    if obs.shape != (n_cells, len(PERCENTILES)):
        raise ValueError(f"joint observation must have shape ({n_cells}, {len(PERCENTILES)}), got {obs.shape}")
    return obs


def check_joint_action(actions, n_cells, n_actions=N_TILTS):
    actions = np.asarray(actions)
    if actions.shape != (n_cells,):
        raise ValueError(f"joint action must have shape ({n_cells},), got {actions.shape}")
    if not np.issubdtype(actions.dtype, np.integer):
        raise TypeError("joint action entries must be integers")
    if actions.size and (actions.min() < 0 or actions.max() >= n_actions):
        raise ValueError(f"actions must lie in 0..{n_actions - 1}")
    return actions.astype(np.int64)


def check_graph_matches(graph, n_cells):
    if graph.n_nodes != n_cells:
        raise ValueError(f"graph has {graph.n_nodes} nodes but the deployment has {n_cells} cells")
    if graph.n_edges == 0:
        raise ValueError("coordination graph has no edges")
