"""Per-SBS bandwidth split and CPU frequency choice minimising the straggler delay.

For a fixed UE set the problem is

    min_beta  I * max_n ( d_n / (beta_n * r_n) + c_n )   s.t.  sum(beta) <= 1,  0 < beta_n <= 1

With a candidate per-round delay T, UE n needs at least
``beta_n(T) = d_n / (r_n * (T - c_n))``; T is feasible iff those minima fit in
the unit budget. Feasibility is monotone in T, so bisection finds the optimum.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import EmptySbs, NonConvergence

BETA_FLOOR = 1e-9


@dataclass
class AllocProblem:
    ue_set: tuple
    com_numerator: np.ndarray  # bits per UE
    rate_coeff: np.ndarray  # bits/s per UE at beta = 1
    comp_time: np.ndarray  # seconds per UE
    i_global: int = 1

    def __post_init__(self):
        self.ue_set = tuple(int(n) for n in self.ue_set)
        self.com_numerator = np.asarray(self.com_numerator, dtype=float)
        self.rate_coeff = np.asarray(self.rate_coeff, dtype=float)
        self.comp_time = np.asarray(self.comp_time, dtype=float)
        if np.any(self.rate_coeff <= 0) or np.any(self.com_numerator <= 0):
            raise ValueError("rate_coeff and com_numerator must be positive")

    @property
    def full_band_time(self) -> np.ndarray:
        """Upload time of each UE holding the whole SBS band."""
        return self.com_numerator / self.rate_coeff

    def delays(self, beta) -> np.ndarray:
        """Per-UE global delay under ``beta``."""
        return self.i_global * (self.full_band_time / np.asarray(beta, dtype=float) + self.comp_time)


@dataclass
class AllocSolution:
    beta: np.ndarray
    f: np.ndarray
    objective: float
    iterations: int
    ue_set: tuple = ()


def optimal_freq(profile) -> np.ndarray:
    """With latency as the only objective every UE runs at its top frequency."""
    return np.array(profile.f_max, dtype=float, copy=True)


def feasible(problem: AllocProblem, per_round_delay: float) -> bool:
    """True if every UE can finish within ``per_round_delay`` inside the unit band budget."""
    a, c = problem.full_band_time, problem.comp_time
    slack = per_round_delay - c
    if np.any(slack <= 0):
        return False
    need = a / slack
    return bool(np.all(need <= 1.0)) and float(need.sum()) <= 1.0


def solve_beta(problem: AllocProblem, tol: float = 1e-6, max_steps: int = 200) -> AllocSolution:
    """Min-max bandwidth split by bisection on the per-round delay.

    ``tol`` bounds the objective error in seconds. The returned split has
    ``sum(beta) == 1`` up to rounding and equalised per-UE delays.
    """
    n = len(problem.ue_set)
    if n == 0:
        raise EmptySbs("cannot allocate an SBS without UEs")
    a, c = problem.full_band_time, problem.comp_time
    if n == 1:
        beta = np.ones(1)
        return AllocSolution(beta, np.empty(0), float(problem.delays(beta)[0]), 0, problem.ue_set)

    # any UE at beta = 1 gives a lower bound; the equal split is feasible
    lo = float(np.max(a + c))
    hi = float(np.max(n * a + c))
    step_tol = tol / problem.i_global
    steps = 0
    while hi - lo > step_tol and hi - lo > 4 * np.spacing(hi):
        if steps >= max_steps:
            raise NonConvergence(f"bisection did not reach tol={tol} in {max_steps} steps")
        mid = 0.5 * (lo + hi)
        if np.sum(a / (mid - c)) <= 1.0:
            hi = mid
        else:
            lo = mid
        steps += 1

    beta = a / (hi - c)
    # hand the sub-tolerance slack back so the budget is used exactly
    beta = np.clip(beta / beta.sum(), BETA_FLOOR, 1.0)
    return AllocSolution(beta, np.empty(0), float(np.max(problem.delays(beta))), steps, problem.ue_set)


def uniform_split(problem: AllocProblem) -> AllocSolution:
    """Equal bandwidth share for every member, no optimisation."""
    n = len(problem.ue_set)
    if n == 0:
        raise EmptySbs("cannot allocate an SBS without UEs")
    beta = np.full(n, 1.0 / n)
    return AllocSolution(beta, np.empty(0), float(np.max(problem.delays(beta))), 0, problem.ue_set)


def verify_kkt(problem: AllocProblem, solution: AllocSolution, tol: float = 1e-6) -> bool:
    """Check budget tightness and delay equalisation at a min-max optimum.

    Every UE not pinned at ``beta = 1`` must sit at the objective (within
    ``tol`` seconds, relative for large objectives), otherwise bandwidth could be
    moved from it to the straggler.
    """
    beta = np.asarray(solution.beta, dtype=float)
    if beta.shape != (len(problem.ue_set),):
        return False
    if np.any(beta <= 0) or np.any(beta > 1 + 1e-12):
        return False
    if abs(beta.sum() - 1.0) > 1e-6:
        return False
    delays = problem.delays(beta)
    obj = solution.objective
    if abs(np.max(delays) - obj) > tol * max(1.0, abs(obj)):
        return False
    free = beta < 1.0 - 1e-12
    return bool(np.all(np.abs(delays[free] - obj) <= tol * max(1.0, abs(obj))))
