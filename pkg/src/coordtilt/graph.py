"""Coordination graphs over cells built from interference coupling."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .netsim import DEFAULT_TILT, Deployment, RadioGeometry, drop_users

TOPOLOGIES = ("sparse", "dense", "tree", "complete")
FORMAT_VERSION = 1


class DisconnectedGraphWarning(UserWarning):
    pass


def coupling_matrix(d: Deployment, reference_drops=3, seed=0, n_users=1000, reference_tilt=DEFAULT_TILT):
    """Mean power each cell's users receive from every other cell.

    ``values[i, j]`` averages, over reference drops and over the users served
    by cell ``i`` at a uniform reference tilt, the power received from cell
    ``j``. The result is symmetrized with an elementwise max and has a zero
    diagonal.
    """
    if reference_drops < 1:
        raise ValueError("reference_drops must be >= 1")
    n = d.n_cells
    total = np.zeros((n, n))
    counts = np.zeros(n)
    rng = np.random.default_rng(seed)
    tilts = np.full(n, reference_tilt)
    for _ in range(reference_drops):
        geometry = RadioGeometry(d, drop_users(d, n_users, rng))
        rx = geometry.received_power(tilts)
        serving = np.argmax(rx, axis=0)
        for i in range(n):
            mine = serving == i
            if mine.any():
                total[i] += rx[:, mine].mean(axis=1)
                counts[i] += 1
    values = np.divide(total, counts[:, None], out=np.zeros_like(total), where=counts[:, None] > 0)
    values = np.maximum(values, values.T)
    np.fill_diagonal(values, 0.0)
    return values


@dataclass(frozen=True)
class CoordinationGraph:
    n_nodes: int
    edges: np.ndarray  # (n_edges, 2), rows (i, j) with i < j, lexicographically sorted
    topology: str = "custom"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if (edges[:, 0] == edges[:, 1]).any():
                raise ValueError("self-loops are not allowed")
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise ValueError("edge refers to an unknown node")
        edges = np.sort(edges, axis=1)
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
        if len(np.unique(edges, axis=0)) != len(edges):
            raise ValueError("duplicate edges")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_index", {(int(i), int(j)): e for e, (i, j) in enumerate(edges)})

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def adjacency(self):
        nbrs = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
        return [sorted(n) for n in nbrs]

    @property
    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def neighbor_count(self, i):
        if not 0 <= i < self.n_nodes:
            raise IndexError(f"unknown node {i}")
        return int(self.degrees[i])

    def edge_index(self, i, j):
        """Index of the undirected edge {i, j}; order of arguments is irrelevant."""
        key = (min(i, j), max(i, j))
        if key not in self._index:
            raise KeyError(f"no edge between {i} and {j}")
        return self._index[key]

    def has_edge(self, i, j):
        return (min(i, j), max(i, j)) in self._index

    def components(self):
        if self.n_nodes == 0:
            return []
        adj = coo_matrix(
            (np.ones(self.n_edges), (self.edges[:, 0], self.edges[:, 1])), shape=(self.n_nodes,) * 2
        )
        n, labels = connected_components(adj, directed=False)
        return [np.flatnonzero(labels == k).tolist() for k in range(n)]

    @property
    def connected(self):
        return len(self.components()) == 1

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "n_nodes": int(self.n_nodes),
            "topology": self.topology,
            "edges": self.edges.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported graph version {doc.get('version')!r}")
        return cls(doc["n_nodes"], np.array(doc["edges"], dtype=np.int64).reshape(-1, 2), doc["topology"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _relative_threshold_edges(c, within_db):
    # keep (i, j) if it is within `within_db` of the strongest coupling of i or of j
    strongest = c.max(axis=1)
    floor = strongest * 10.0 ** (-within_db / 10.0)
    keep = (c >= floor[:, None]) | (c >= floor[None, :])
    keep &= c > 0
    i, j = np.nonzero(np.triu(keep, 1))
    return np.column_stack([i, j])


def minimum_spanning_tree(n_nodes, edges, weights):
    """Kruskal's algorithm; ties broken by lexicographic edge order."""
    edges = np.asarray(edges).reshape(-1, 2)
    order = np.lexsort((edges[:, 1], edges[:, 0], np.asarray(weights)))
    forest = DisjointSet(range(n_nodes))
    kept = []
    for e in order:
        i, j = int(edges[e, 0]), int(edges[e, 1])
        if forest.merge(i, j):
            kept.append((i, j))
    return np.array(kept, dtype=np.int64).reshape(-1, 2)


def build_graph(coupling, topology="sparse", sparse_db=25.0, dense_db=35.0, warn=True):
    """Coordination graph from a coupling matrix.

    ``sparse`` and ``dense`` keep an edge when its coupling is within
    ``sparse_db`` / ``dense_db`` of an endpoint's strongest coupling. ``tree``
    is the minimum spanning tree (forest) of the sparse graph under edge weight
    ``1 / coupling``; ``complete`` connects every pair.
    """
    c = np.asarray(coupling, dtype=float)
    n = c.shape[0]
    if c.shape != (n, n):
        raise ValueError("coupling matrix must be square")
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    if dense_db <= sparse_db:
        raise ValueError("dense threshold must admit more edges than the sparse one")
    if topology == "complete":
        edges = np.column_stack(np.triu_indices(n, 1))
    elif topology == "dense":
        edges = _relative_threshold_edges(c, dense_db)
    else:
        edges = _relative_threshold_edges(c, sparse_db)
        if topology == "tree":
            edges = minimum_spanning_tree(n, edges, 1.0 / c[edges[:, 0], edges[:, 1]])
    g = CoordinationGraph(n, edges, topology)
    if warn and n > 1 and not g.connected:
        warnings.warn(
            f"{topology} graph has {len(g.components())} connected components; "
            "message passing runs on each independently",
            DisconnectedGraphWarning,
            stacklevel=2,
        )
    return g
