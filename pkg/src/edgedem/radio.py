"""Two-tier HetNet topology, channel gains, SINR and achievable rates.

Coordinates are metres with the macro base station at the origin. SBS and UE
indices are zero-based. Gains are linear power ratios; rates are bits/s.
"""

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import EmptyAssignment, EmptyNetwork
from .units import db_to_linear, dbm_to_watt, linear_to_db, watt_to_dbm


@dataclass(frozen=True)
class RadioConfig:
    """Radio parameters shared by every SBS.

    The defaults follow a 3 MHz LTE carrier: 15 resource blocks of 180 kHz
    (2.7 MHz occupied), 23 dBm transmit power, 3 dB shadowing and the
    ``128.1 + 37.6 log10(d_km)`` path-loss law.
    """

    bandwidth_total: float = 2.7e6
    num_subbands: int = 15
    subbands_per_sbs: Optional[Sequence[int]] = None
    tx_power_dbm: float = 23.0
    noise_psd_dbm_hz: float = -174.0
    shadowing_std_db: float = 3.0
    pathloss_a: float = 128.1
    pathloss_b: float = 37.6
    network_radius_m: float = 100.0
    ue_min_dist_m: float = 2.0

    def __post_init__(self):
        positive = ("bandwidth_total", "num_subbands", "network_radius_m", "ue_min_dist_m")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.shadowing_std_db < 0:
            raise ValueError("shadowing_std_db must be non-negative")
        if self.network_radius_m <= self.ue_min_dist_m:
            raise ValueError("network_radius_m must exceed ue_min_dist_m")
        if self.subbands_per_sbs is not None:
            object.__setattr__(self, "subbands_per_sbs", tuple(int(z) for z in self.subbands_per_sbs))
            if any(z <= 0 for z in self.subbands_per_sbs):
                raise ValueError("subbands_per_sbs entries must be positive")

    @property
    def rb_bandwidth(self) -> float:
        return self.bandwidth_total / self.num_subbands

    @property
    def noise_power_w(self) -> float:
        """Thermal noise integrated over one resource block, in watts."""
        return float(dbm_to_watt(self.noise_psd_dbm_hz + linear_to_db(self.rb_bandwidth)))

    def zeta(self, n_sbs: int) -> np.ndarray:
        """Sub-bands per SBS. Must sum to the system RB count ``n_sbs * num_subbands``."""
        if self.subbands_per_sbs is None:
            return np.full(n_sbs, self.num_subbands, dtype=int)
        z = np.asarray(self.subbands_per_sbs, dtype=int)
        if z.shape != (n_sbs,):
            raise ValueError(f"subbands_per_sbs has {z.size} entries, expected {n_sbs}")
        if z.sum() != n_sbs * self.num_subbands:
            raise ValueError("subbands_per_sbs must sum to n_sbs * num_subbands")
        return z


@dataclass
class NetworkInstance:
    sbs_positions: np.ndarray  # (S, 2)
    ue_positions: np.ndarray  # (N, 2)
    channel_gain: np.ndarray  # (N, S)
    rsrp: np.ndarray  # (N, S) dBm
    rng_seed: int
    shadowing_db: np.ndarray = field(repr=False, default=None)

    @property
    def n_ues(self) -> int:
        return self.ue_positions.shape[0]

    @property
    def n_sbs(self) -> int:
        return self.sbs_positions.shape[0]

    def distances(self) -> np.ndarray:
        """UE-SBS distances in metres, shape (N, S)."""
        diff = self.ue_positions[:, None, :] - self.sbs_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    def to_json(self) -> str:
        doc = {
            "rng_seed": int(self.rng_seed),
            "sbs_positions": self.sbs_positions.tolist(),
            "ue_positions": self.ue_positions.tolist(),
            "channel_gain": self.channel_gain.tolist(),
            "rsrp": self.rsrp.tolist(),
        }
        if self.shadowing_db is not None:
            doc["shadowing_db"] = self.shadowing_db.tolist()
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "NetworkInstance":
        doc = json.loads(text)
        shadow = doc.get("shadowing_db")
        return cls(
            sbs_positions=np.asarray(doc["sbs_positions"], dtype=float).reshape(-1, 2),
            ue_positions=np.asarray(doc["ue_positions"], dtype=float).reshape(-1, 2),
            channel_gain=np.asarray(doc["channel_gain"], dtype=float),
            rsrp=np.asarray(doc["rsrp"], dtype=float),
            rng_seed=int(doc["rng_seed"]),
            shadowing_db=None if shadow is None else np.asarray(shadow, dtype=float),
        )


@dataclass
class SinrTable:
    gamma: np.ndarray  # (N, S) linear
    interference_dbm: np.ndarray  # (N, S) interference-plus-noise power


@dataclass
class LinkTable:
    """Per-link rate coefficients used by the allocation and matching layers.

    ``rate_coeff[n, s]`` is the rate UE n would get from SBS s with the whole
    SBS band (beta = 1). ``virtual_rate`` is the fixed per-UE rate of the
    virtual edge node.
    """

    rate_coeff: np.ndarray
    virtual_rate: float
    rsrp: np.ndarray
    distances: np.ndarray

    @property
    def n_ues(self) -> int:
        return self.rate_coeff.shape[0]

    @property
    def n_sbs(self) -> int:
        return self.rate_coeff.shape[1]


def path_loss_db(distance_km, a: float = 128.1, b: float = 37.6):
    return a + b * np.log10(np.asarray(distance_km, dtype=float))


def _uniform_disc(rng, n, radius):
    r = radius * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def generate_topology(config: RadioConfig, n_ues: int, n_sbs: int, seed: int) -> NetworkInstance:
    """Drop SBSs and UEs uniformly in the macro cell and draw their channels.

    UEs closer than ``ue_min_dist_m`` to the MBS or to any SBS are redrawn.
    Shadowing is drawn once per (UE, SBS) link and stays fixed.
    """
    if n_ues < 1 or n_sbs < 1:
        raise EmptyNetwork(f"need at least one UE and one SBS, got N={n_ues}, S={n_sbs}")
    rng = np.random.default_rng(seed)
    radius = config.network_radius_m
    sbs = _uniform_disc(rng, n_sbs, radius)

    ues = np.empty((n_ues, 2))
    pending = np.arange(n_ues)
    for _ in range(10_000):
        ues[pending] = _uniform_disc(rng, pending.size, radius)
        cand = ues[pending]
        d_mbs = np.hypot(cand[:, 0], cand[:, 1])
        d_sbs = np.hypot(cand[:, None, 0] - sbs[None, :, 0], cand[:, None, 1] - sbs[None, :, 1])
        ok = (d_mbs >= config.ue_min_dist_m) & (d_sbs.min(axis=1) >= config.ue_min_dist_m)
        pending = pending[~ok]
        if pending.size == 0:
            break
    else:  # pragma: no cover - needs a pathological radius/min-dist pair
        raise RuntimeError("could not place UEs outside the exclusion zones")

    net = NetworkInstance(sbs, ues, np.empty((n_ues, n_sbs)), np.empty((n_ues, n_sbs)), int(seed))
    shadow = rng.normal(0.0, config.shadowing_std_db, size=(n_ues, n_sbs))
    loss_db = path_loss_db(net.distances() / 1000.0, config.pathloss_a, config.pathloss_b) + shadow
    net.shadowing_db = shadow
    net.channel_gain = db_to_linear(-np.maximum(loss_db, 0.0))
    net.rsrp = config.tx_power_dbm + linear_to_db(net.channel_gain)
    return net


def compute_sinr(net: NetworkInstance, config: RadioConfig) -> SinrTable:
    """Per-link SINR with every other SBS counted as a co-channel interferer."""
    p = float(dbm_to_watt(config.tx_power_dbm))
    received = p * net.channel_gain
    interference = received.sum(axis=1, keepdims=True) - received
    # the row-sum subtraction can leave -0.0-ish residue for S == 1
    interference = np.maximum(interference, 0.0)
    denom = interference + config.noise_power_w
    return SinrTable(gamma=received / denom, interference_dbm=watt_to_dbm(denom))


def rate_single(ue: int, sbs: int, n_rbs: float, sinr: SinrTable, config: RadioConfig) -> float:
    if n_rbs < 0:
        raise ValueError("n_rbs must be non-negative")
    return float(n_rbs * config.rb_bandwidth * np.log2(1.0 + sinr.gamma[ue, sbs]))


def rate_general(ue: int, assigned_sbs, beta, sinr: SinrTable, config: RadioConfig) -> float:
    """Multi-connectivity rate: sum of beta-weighted full-band rates over the SBS set."""
    sbs_list = list(assigned_sbs)
    if not sbs_list:
        raise EmptyAssignment(f"UE {ue} has no assigned SBS")
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (len(sbs_list),))
    if np.any(beta <= 0) or np.any(beta > 1):
        raise ValueError("beta fractions must lie in (0, 1]")
    zeta = config.zeta(sinr.gamma.shape[1])
    idx = np.asarray(sbs_list, dtype=int)
    terms = beta * zeta[idx] * config.rb_bandwidth * np.log2(1.0 + sinr.gamma[ue, idx])
    return float(terms.sum())


def link_table(net: NetworkInstance, config: RadioConfig, virtual_rate: Optional[float] = None) -> LinkTable:
    """Full-band rate coefficients for every link plus the virtual-node rate.

    Without an explicit ``virtual_rate`` the virtual node serves each UE with
    one resource block at the median SINR of the instance.
    """
    sinr = compute_sinr(net, config)
    zeta = config.zeta(net.n_sbs)
    coeff = zeta[None, :] * config.rb_bandwidth * np.log2(1.0 + sinr.gamma)
    if virtual_rate is None:
        virtual_rate = config.rb_bandwidth * np.log2(1.0 + float(np.median(sinr.gamma)))
    return LinkTable(rate_coeff=coeff, virtual_rate=float(virtual_rate), rsrp=net.rsrp, distances=net.distances())
