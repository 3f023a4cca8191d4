"""Experiment configuration with defaults and a content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

ALGORITHMS = ("ps-crl", "crl", "s-dqn", "i-dqn", "sweep", "c-sweep", "random")


@dataclass
class ExperimentConfig:
    # deployment
    n_stations: int = 2
    deployment_seed: int = 3
    min_intersite_distance: float = 1500.0
    n_users: int = 1000
    # graph
    topology: str = "sparse"
    sparse_db: float = 25.0
    dense_db: float = 35.0
    coupling_drops: int = 3
    # algorithm
    algorithm: str = "ps-crl"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    learning_rate: float = 1e-4
    gamma: float = 0.0
    batch_size: int = 32
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay_steps: int = 5000
    target_update: int | None = None  # 500 for the coordinated learners, 2000 for DQN
    max_iters: int = 40
    buffer_capacity: int = 5000
    hidden_layers: list = field(default_factory=lambda: [32, 32])
    n_steps: int = 10000
    max_grad_norm: float = 10.0
    sweep_passes: int = 1
    # calibration and evaluation
    n_calibration: int = 1000
    calibration_seed: int = 0
    eval_every: int = 250
    n_eval_drops: int = 10

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.topology not in ("sparse", "dense", "tree", "complete"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        self.hidden_layers = [int(h) for h in self.hidden_layers]

    @property
    def effective_target_update(self):
        if self.target_update is not None:
            return self.target_update
        return 2000 if self.algorithm in ("s-dqn", "i-dqn") else 500

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        stamp = doc.pop("_hash", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**doc)
        if stamp is not None and stamp != cfg.content_hash():
            raise ValueError("config file was edited after it was hashed")
        return cfg

    @classmethod
    def load(cls, path, **overrides):
        doc = json.loads(Path(path).read_text()) if path else {}
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def save(self, path):
        doc = self.to_dict()
        doc["_hash"] = self.content_hash()
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
