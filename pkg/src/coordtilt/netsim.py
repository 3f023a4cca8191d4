"""Downlink radio simulator for a multi-cell LTE deployment.

Base stations are placed by a hard-core Poisson process, each carrying
directional antennas (cells). Users are dropped uniformly over the area and
associate to the cell with the strongest received power. For a joint tilt
configuration the simulator returns per-user SINR and round-robin Shannon
throughput, and per-cell rewards (log of the mean user throughput).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
N_TILTS = 16
DEFAULT_TILT = 8
PERCENTILES = (10.0, 25.0, 50.0, 75.0)


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def dbm_to_watts(x_dbm):
    return db_to_linear(np.asarray(x_dbm, dtype=float) - 30.0)


@dataclass(frozen=True)
class AntennaModel:
    """Parametric 3-sector antenna pattern.

    Vertical and horizontal attenuation are quadratic in the off-boresight
    angle, each capped, and their sum is capped at ``max_attenuation``.
    """

    max_gain: float = 15.0  # dBi
    horizontal_beamwidth: float = 65.0
    vertical_beamwidth: float = 6.5
    side_lobe_floor_v: float = 20.0
    front_back_ratio_h: float = 25.0
    max_attenuation: float = 30.0
    tx_power: float = 40.0  # W

    def vertical_attenuation(self, elevation_deg, tilt_deg):
        off = (np.asarray(elevation_deg) - tilt_deg) / self.vertical_beamwidth
        return np.minimum(12.0 * off**2, self.side_lobe_floor_v)

    def horizontal_attenuation(self, azimuth_offset_deg):
        off = np.asarray(azimuth_offset_deg) / self.horizontal_beamwidth
        return np.minimum(12.0 * off**2, self.front_back_ratio_h)

    def gain_db(self, elevation_deg, azimuth_offset_deg, tilt_deg):
        att = self.vertical_attenuation(elevation_deg, tilt_deg) + self.horizontal_attenuation(
            azimuth_offset_deg
        )
        return self.max_gain - np.minimum(att, self.max_attenuation)


@dataclass(frozen=True)
class RadioParams:
    """Link budget constants shared by every cell."""

    n_prb: int = 50
    prb_bandwidth: float = 180e3  # Hz
    noise_figure_db: float = 9.0
    thermal_noise_dbm_hz: float = -174.0
    indoor_loss_db: float = 20.0
    min_distance: float = 35.0  # m
    throughput_floor: float = 1.0  # bit/s, used for empty cells
    obs_floor_db: float = -20.0  # sentinel observation for empty cells

    @property
    def bandwidth(self):
        return self.n_prb * self.prb_bandwidth

    @property
    def noise_power(self):
        return float(dbm_to_watts(self.thermal_noise_dbm_hz + linear_to_db(self.bandwidth) + self.noise_figure_db))


def path_loss_db(distance_m, indoor=False, indoor_loss_db=20.0, min_distance=35.0):
    """Urban-macro log-distance path loss with indoor penetration."""
    d_km = np.maximum(np.asarray(distance_m, dtype=float), min_distance) / 1000.0
    return 128.1 + 37.6 * np.log10(d_km) + indoor_loss_db * np.asarray(indoor, dtype=float)


@dataclass(frozen=True)
class Deployment:
    stations: np.ndarray  # (n_bs, 2) meters
    cell_station: np.ndarray  # (n_cells,)
    cell_azimuth: np.ndarray  # (n_cells,) degrees
    antenna_height: float = 32.0
    area_half_width: float = 1000.0
    indoor_fraction: float = 0.5
    rng_seed: int = 0
    min_intersite_distance: float = 1500.0
    cells_per_station: int = 3
    site_spacing: float = 2000.0
    antenna: AntennaModel = field(default_factory=AntennaModel)
    radio: RadioParams = field(default_factory=RadioParams)

    def __post_init__(self):
        stations = np.asarray(self.stations, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "stations", stations)
        object.__setattr__(self, "cell_station", np.asarray(self.cell_station, dtype=np.int64))
        object.__setattr__(self, "cell_azimuth", np.asarray(self.cell_azimuth, dtype=float))
        if self.cell_station.shape != self.cell_azimuth.shape:
            raise ValueError("cell_station and cell_azimuth must have the same length")
        if self.n_cells == 0:
            raise ValueError("deployment has no cells")
        if self.cell_station.min() < 0 or self.cell_station.max() >= len(stations):
            raise ValueError("cell refers to an unknown base station")
        if not 0.0 <= self.indoor_fraction <= 1.0:
            raise ValueError("indoor_fraction must lie in [0, 1]")

    @property
    def n_cells(self):
        return len(self.cell_station)

    @property
    def n_stations(self):
        return len(self.stations)

    @property
    def cell_positions(self):
        return self.stations[self.cell_station]

    def min_station_distance(self):
        if self.n_stations < 2:
            return float("inf")
        diff = self.stations[:, None, :] - self.stations[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        return float(dist[np.triu_indices(self.n_stations, 1)].min())

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "stations": self.stations.tolist(),
            "cells": [
                {"cell_id": c, "station": int(s), "azimuth": float(a)}
                for c, (s, a) in enumerate(zip(self.cell_station, self.cell_azimuth))
            ],
            "params": {
                "antenna_height": self.antenna_height,
                "area_half_width": self.area_half_width,
                "indoor_fraction": self.indoor_fraction,
                "rng_seed": self.rng_seed,
                "min_intersite_distance": self.min_intersite_distance,
                "cells_per_station": self.cells_per_station,
                "site_spacing": self.site_spacing,
                "antenna": asdict(self.antenna),
                "radio": asdict(self.radio),
            },
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported deployment version {doc.get('version')!r}")
        cells = sorted(doc["cells"], key=lambda c: c["cell_id"])
        if [c["cell_id"] for c in cells] != list(range(len(cells))):
            raise ValueError("cell ids must be dense 0..N-1")
        params = dict(doc["params"])
        antenna = AntennaModel(**params.pop("antenna"))
        radio = RadioParams(**params.pop("radio"))
        return cls(
            stations=np.array(doc["stations"], dtype=float),
            cell_station=[c["station"] for c in cells],
            cell_azimuth=[c["azimuth"] for c in cells],
            antenna=antenna,
            radio=radio,
            **params,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self):
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class UserDrop:
    positions: np.ndarray  # (n_users, 2)
    indoor: np.ndarray  # (n_users,) bool

    @property
    def n_users(self):
        return len(self.positions)

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "positions": np.asarray(self.positions).tolist(),
            "indoor": np.asarray(self.indoor).astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported user drop version {doc.get('version')!r}")
        return cls(
            np.array(doc["positions"], dtype=float).reshape(-1, 2),
            np.array(doc["indoor"], dtype=bool),
        )


def generate_deployment(
    n_base_stations,
    seed=0,
    *,
    min_intersite_distance=1500.0,
    site_spacing=2000.0,
    cells_per_station=3,
    antenna_height=32.0,
    indoor_fraction=0.5,
    max_attempts=10_000,
    antenna=None,
    radio=None,
):
    """Place base stations uniformly at random with a minimum distance.

    The square area grows linearly with the number of stations (side
    ``site_spacing * sqrt(n)``) so the mean intersite distance is preserved.
    Candidates violating the distance floor are rejected and redrawn.
    """
    n = int(n_base_stations)
    if n < 1:
        raise ValueError("n_base_stations must be >= 1")
    if cells_per_station < 1:
        raise ValueError("cells_per_station must be >= 1")
    half = 0.5 * site_spacing * np.sqrt(n)
    rng = np.random.default_rng(seed)
    stations = []
    attempts = 0
    while len(stations) < n:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"could not place {n} stations {min_intersite_distance} m apart "
                f"in a {2 * half:.0f} m square after {max_attempts} attempts"
            )
        attempts += 1
        cand = rng.uniform(-half, half, size=2)
        if all(np.hypot(*(cand - s)) >= min_intersite_distance for s in stations):
            stations.append(cand)
    azimuths = np.arange(cells_per_station) * (360.0 / cells_per_station)
    return Deployment(
        stations=np.array(stations),
        cell_station=np.repeat(np.arange(n), cells_per_station),
        cell_azimuth=np.tile(azimuths, n),
        antenna_height=antenna_height,
        area_half_width=float(half),
        indoor_fraction=indoor_fraction,
        rng_seed=int(seed) if np.isscalar(seed) else 0,
        min_intersite_distance=min_intersite_distance,
        cells_per_station=cells_per_station,
        site_spacing=site_spacing,
        antenna=antenna or AntennaModel(),
        radio=radio or RadioParams(),
    )


def facing_pair_deployment(distance=1500.0, area_half_width=1500.0, **kwargs):
    """Two single-cell stations whose antennas point at each other."""
    return Deployment(
        stations=np.array([[-distance / 2, 0.0], [distance / 2, 0.0]]),
        cell_station=[0, 1],
        cell_azimuth=[0.0, 180.0],
        area_half_width=area_half_width,
        min_intersite_distance=distance,
        cells_per_station=1,
        **kwargs,
    )


def drop_users(d: Deployment, n_users, seed=None):
    """Uniform user positions over the area; each user is indoor with
    probability ``d.indoor_fraction``."""
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    rng = np.random.default_rng(seed)
    h = d.area_half_width
    positions = rng.uniform(-h, h, size=(int(n_users), 2))
    indoor = rng.random(int(n_users)) < d.indoor_fraction
    return UserDrop(positions, indoor)


class RadioGeometry:
    """Tilt-independent link quantities for one (deployment, drop) pair.

    Holds path gain, horizontal attenuation and elevation angles so that
    evaluating many tilt configurations on the same drop only recomputes the
    vertical antenna gain.
    """

    def __init__(self, d: Deployment, users: UserDrop):
        self.deployment = d
        self.users = users
        delta = users.positions[None, :, :] - d.cell_positions[:, None, :]
        dist = np.hypot(delta[..., 0], delta[..., 1])
        r = d.radio
        self.distance = dist
        self.path_gain = db_to_linear(
            -path_loss_db(dist, users.indoor[None, :], r.indoor_loss_db, r.min_distance)
        )
        bearing = np.degrees(np.arctan2(delta[..., 1], delta[..., 0]))
        offset = (bearing - d.cell_azimuth[:, None] + 180.0) % 360.0 - 180.0
        self.h_attenuation = d.antenna.horizontal_attenuation(offset)
        self.elevation = np.degrees(np.arctan2(d.antenna_height, np.maximum(dist, r.min_distance)))

    def gain_db(self, tilts):
        a = self.deployment.antenna
        tilts = np.asarray(tilts, dtype=float)[:, None]
        att = a.vertical_attenuation(self.elevation, tilts) + self.h_attenuation
        return a.max_gain - np.minimum(att, a.max_attenuation)

    def received_power(self, tilts):
        a = self.deployment.antenna
        return a.tx_power * db_to_linear(self.gain_db(tilts)) * self.path_gain

    @cached_property
    def received_power_table(self):
        """(n_tilts, n_cells, n_users) received power for every uniform tilt."""
        n = self.deployment.n_cells
        return np.stack([self.received_power(np.full(n, t)) for t in range(N_TILTS)])

    def received_power_from_table(self, tilts):
        table = self.received_power_table
        return table[np.asarray(tilts), np.arange(self.deployment.n_cells)]


@dataclass(frozen=True)
class RadioSnapshot:
    received_power: np.ndarray  # (n_cells, n_users) W
    association: np.ndarray  # (n_users,)
    sinr: np.ndarray  # (n_users,) linear
    throughput: np.ndarray  # (n_users,) bit/s
    load: np.ndarray  # (n_cells,)
    cell_rewards: np.ndarray  # (n_cells,)

    @property
    def n_cells(self):
        return len(self.load)

    @property
    def sinr_db(self):
        return linear_to_db(self.sinr)


def snapshot_from_received_power(rx, noise_power, n_prb=50, prb_bandwidth=180e3, throughput_floor=1.0):
    """Association, SINR, throughput and cell rewards from a received-power matrix.

    ``rx[c, u]`` is the power user ``u`` receives from cell ``c``, i.e. the
    product of transmit power, antenna gain and path gain.
    """
    rx = np.asarray(rx, dtype=float)
    if rx.ndim != 2:
        raise ValueError("received power must be a (n_cells, n_users) matrix")
    n_cells, n_users = rx.shape
    users = np.arange(n_users)
    # np.argmax returns the first maximum: ties go to the lowest cell id
    association = np.argmax(rx, axis=0)
    signal = rx[association, users]
    others = rx.copy()
    others[association, users] = 0.0
    interference = others.sum(axis=0)
    sinr = signal / (interference + noise_power)
    load = np.bincount(association, minlength=n_cells)
    throughput = n_prb * prb_bandwidth / load[association] * np.log2(1.0 + sinr)
    total = np.bincount(association, weights=throughput, minlength=n_cells)
    mean = np.full(n_cells, float(throughput_floor))
    busy = load > 0
    mean[busy] = total[busy] / load[busy]
    return RadioSnapshot(
        received_power=rx,
        association=association,
        sinr=sinr,
        throughput=throughput,
        load=load,
        cell_rewards=np.log(mean),
    )


def compute_snapshot(d: Deployment, users: UserDrop, tilts, geometry: RadioGeometry | None = None):
    tilts = np.asarray(tilts)
    if tilts.shape != (d.n_cells,):
        raise ValueError(f"expected {d.n_cells} tilts, got shape {tilts.shape}")
    if tilts.min() < 0 or tilts.max() >= N_TILTS:
        raise ValueError(f"tilt indices must lie in 0..{N_TILTS - 1}")
    geometry = geometry or RadioGeometry(d, users)
    r = d.radio
    return snapshot_from_received_power(
        geometry.received_power(tilts), r.noise_power, r.n_prb, r.prb_bandwidth, r.throughput_floor
    )


def sinr_percentiles(sinr_db, floor_db=-20.0):
    sinr_db = np.asarray(sinr_db, dtype=float)
    if sinr_db.size == 0:
        return np.full(len(PERCENTILES), float(floor_db))
    # numpy's default "linear" method interpolates between order statistics
    return np.percentile(sinr_db, PERCENTILES)


def observe(snapshot: RadioSnapshot, cell, floor_db=-20.0):
    """SINR percentiles (dB) of the users served by ``cell``."""
    if not 0 <= cell < snapshot.n_cells:
        raise IndexError(f"unknown cell {cell}")
    return sinr_percentiles(snapshot.sinr_db[snapshot.association == cell], floor_db)


def observe_all(snapshot: RadioSnapshot, floor_db=-20.0):
    """(n_cells, 4) matrix of per-cell SINR percentiles in dB."""
    sinr_db = snapshot.sinr_db
    order = np.argsort(snapshot.association, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(snapshot.load)])
    sorted_db = sinr_db[order]
    return np.stack(
        [sinr_percentiles(sorted_db[bounds[c] : bounds[c + 1]], floor_db) for c in range(snapshot.n_cells)]
    )


def global_reward(snapshot: RadioSnapshot):
    return float(np.sum(snapshot.cell_rewards))


class TiltEnv:
    """Stateful wrapper that resamples users after every tilt change.

    ``step`` draws a fresh user drop from the environment's generator and
    returns the snapshot for the requested tilts. Evaluation drops come from
    a separate, fixed seed range so they never overlap training drops.
    """

    EVAL_SEED_BASE = 1_000_003

    def __init__(self, deployment: Deployment, n_users=1000, seed=0):
        self.deployment = deployment
        self.n_users = int(n_users)
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    @property
    def n_cells(self):
        return self.deployment.n_cells

    def reset(self, seed=None):
        self.rng = np.random.default_rng(self.seed if seed is None else seed)

    def drop(self, seed=None):
        return drop_users(self.deployment, self.n_users, self.rng if seed is None else seed)

    def step(self, tilts):
        return compute_snapshot(self.deployment, self.drop(), tilts)

    def evaluation_drops(self, n_drops=10):
        return [drop_users(self.deployment, self.n_users, self.EVAL_SEED_BASE + k) for k in range(n_drops)]

    def observe(self, snapshot):
        return observe_all(snapshot, self.deployment.radio.obs_floor_db)
