"""Iteration counts and per-round computation/communication delays.

Seconds internally; the CLI boundary converts to milliseconds.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .exceptions import EmptySbs, InvalidAccuracy, UnassignedUe, ZeroRate
from .units import kb_to_bits

VIRTUAL = -1  # assignment value for the virtual edge node

# truncated log-normal over [1000, 8000] KB with mean ~2712 KB and median ~2250 KB
MODEL_KB_RANGE = (1000.0, 8000.0)
MODEL_KB_LOGNORMAL = (7.539514, 0.792672)


@dataclass(frozen=True)
class LearningBudget:
    global_accuracy: float = 0.01
    local_accuracy: float = 0.1
    task_constant: float = 1.0
    local_constant: Union[float, tuple] = 1.0

    def nu(self, ue: int) -> float:
        if np.ndim(self.local_constant) == 0:
            return float(self.local_constant)
        return float(self.local_constant[ue])


@dataclass
class UeComputeProfile:
    """Per-UE compute and upload parameters, one array entry per UE."""

    cycles_per_sample: np.ndarray
    data_size: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray
    model_bytes: np.ndarray
    cpu_freq: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("cycles_per_sample", "data_size", "f_min", "f_max", "model_bytes"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr <= 0):
                raise ValueError(f"{name} must be positive")
            setattr(self, name, arr)
        if np.any(self.f_min > self.f_max):
            raise ValueError("f_min must not exceed f_max")
        if self.cpu_freq is None:
            self.cpu_freq = self.f_max.copy()
        self.cpu_freq = np.asarray(self.cpu_freq, dtype=float)
        if np.any(self.cpu_freq < self.f_min * (1 - 1e-12)) or np.any(self.cpu_freq > self.f_max * (1 + 1e-12)):
            raise ValueError("cpu_freq outside [f_min, f_max]")

    @property
    def n_ues(self) -> int:
        return self.model_bytes.shape[0]

    @property
    def model_bits(self) -> np.ndarray:
        return 8.0 * self.model_bytes


@dataclass
class Association:
    """A UE->SBS assignment with the bandwidth fraction each UE holds at its SBS."""

    assignment: np.ndarray
    beta: np.ndarray
    cpu_freq: Optional[np.ndarray] = None


@dataclass
class DelayReport:
    per_ue_comp: np.ndarray
    per_ue_com: np.ndarray
    per_sbs_global: np.ndarray  # 0 for SBSs without members
    virtual_global: float
    system_global: float
    i_global: int = field(default=1)


def draw_profiles(rng, n_ues: int, data_size, *, cycles_range=(1e6, 5e6), fmax_range=(1.0e9, 2.0e9),
                  f_min=0.5e9, model_kb_dist: str = "lognormal") -> UeComputeProfile:
    """Sample heterogeneous UE profiles.

    ``model_kb_dist`` is ``"lognormal"`` (truncated, matches the reported
    mean/median model size) or ``"uniform"`` over the same range.
    """
    lo, hi = MODEL_KB_RANGE
    if model_kb_dist == "uniform":
        kb = rng.uniform(lo, hi, n_ues)
    elif model_kb_dist == "lognormal":
        mu, sigma = MODEL_KB_LOGNORMAL
        kb = np.empty(n_ues)
        todo = np.arange(n_ues)
        while todo.size:
            kb[todo] = rng.lognormal(mu, sigma, todo.size)
            todo = todo[(kb[todo] < lo) | (kb[todo] > hi)]
    else:
        raise ValueError(f"unknown model_kb_dist {model_kb_dist!r}")
    f_max = rng.uniform(*fmax_range, n_ues)
    return UeComputeProfile(
        cycles_per_sample=rng.uniform(*cycles_range, n_ues),
        data_size=np.broadcast_to(np.asarray(data_size, dtype=float), (n_ues,)).copy(),
        f_min=np.minimum(np.full(n_ues, float(f_min)), f_max),
        f_max=f_max,
        model_bytes=kb_to_bits(kb) / 8.0,
    )


def iters_global(budget: LearningBudget) -> int:
    eps, theta = budget.global_accuracy, budget.local_accuracy
    if not 0.0 < eps < 1.0:
        raise InvalidAccuracy(f"global accuracy must lie in (0, 1), got {eps}")
    if not 0.0 <= theta < 1.0:
        raise InvalidAccuracy(f"local accuracy must lie in [0, 1), got {theta}")
    return max(1, math.ceil(budget.task_constant * math.log(1.0 / eps) / (1.0 - theta)))


def iters_local(budget: LearningBudget, ue: int = 0) -> int:
    theta = budget.local_accuracy
    if not 0.0 < theta < 1.0:
        raise InvalidAccuracy(f"local accuracy must lie in (0, 1), got {theta}")
    return max(1, math.ceil(budget.nu(ue) * math.log(1.0 / theta)))


def t_comp(profile: UeComputeProfile, budget: LearningBudget) -> np.ndarray:
    """Local computation time per global round for every UE."""
    i_loc = np.array([iters_local(budget, n) for n in range(profile.n_ues)], dtype=float)
    return i_loc * profile.cycles_per_sample * profile.data_size / profile.cpu_freq


def t_com(model_size, rate, unit: str = "bytes"):
    """Upload time; ``unit`` says whether ``model_size`` is in bytes or bits."""
    rate = np.asarray(rate, dtype=float)
    if np.any(rate <= 0):
        raise ZeroRate("rate must be strictly positive")
    bits = np.asarray(model_size, dtype=float) * (8.0 if unit == "bytes" else 1.0)
    out = bits / rate
    return float(out) if out.ndim == 0 else out


def global_delay_sbs(ues_of_sbs, comp, com, i_global: int) -> float:
    members = list(ues_of_sbs)
    if not members:
        raise EmptySbs("SBS has no associated UEs")
    idx = np.asarray(members, dtype=int)
    return float(i_global * np.max(np.asarray(com)[idx] + np.asarray(comp)[idx]))


def global_delay_system(association: Association, links, budget: LearningBudget,
                        profile: UeComputeProfile) -> DelayReport:
    """All-group delay of one round under an association with its beta split."""
    assign = np.asarray(association.assignment, dtype=int)
    beta = np.asarray(association.beta, dtype=float)
    n_ues, n_sbs = links.rate_coeff.shape
    if assign.shape != (n_ues,) or np.any((assign < VIRTUAL) | (assign >= n_sbs)):
        raise UnassignedUe("every UE needs an SBS index or the virtual node")
    real = assign != VIRTUAL
    if np.any(~np.isfinite(beta[real])) or np.any(beta[real] <= 0):
        raise UnassignedUe("UE without a positive bandwidth fraction")

    if association.cpu_freq is not None:
        profile = UeComputeProfile(profile.cycles_per_sample, profile.data_size, profile.f_min,
                                   profile.f_max, profile.model_bytes, association.cpu_freq)
    i_glob = iters_global(budget)
    comp = t_comp(profile, budget)
    rate = np.full(n_ues, links.virtual_rate)
    rate[real] = beta[real] * links.rate_coeff[np.flatnonzero(real), assign[real]]
    com = t_com(profile.model_bytes, rate)

    per_sbs = np.zeros(n_sbs)
    for s in range(n_sbs):
        members = np.flatnonzero(assign == s)
        if members.size:
            per_sbs[s] = global_delay_sbs(members, comp, com, i_glob)
    virt = np.flatnonzero(~real)
    virtual_global = global_delay_sbs(virt, comp, com, i_glob) if virt.size else 0.0
    system = float(i_glob * np.max(com + comp))
    return DelayReport(comp, com, per_sbs, virtual_global, system, i_glob)
