"""UE-SBS association as a many-to-one matching game with externalities.

Players are UEs and SBSs plus a virtual edge node (index ``VIRTUAL``) with
unbounded quota that serves each UE at a fixed reserved rate. A UE's utility
is minus the global delay of the SBS it uploads to; every SBS scores the
system-wide delay. Because a UE's delay depends on who else shares its SBS,
every hypothetical swap re-solves the bandwidth split of the two touched cells.

Approved swaps must weakly help both moving UEs and must not raise the
system delay. Either the system delay falls, or it holds while a mover gains
and the summed per-UE delay falls. The pair (system delay, summed delay) thus
decreases lexicographically with every swap, so the dynamics always stop.
"""

import enum
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .alloc import AllocProblem, AllocSolution, solve_beta, uniform_split
from .exceptions import TooLarge
from .latency import VIRTUAL, Association, LearningBudget, UeComputeProfile, iters_global, t_comp

_REL = 1e-12  # float slack when comparing delays


@dataclass
class Matching:
    assignment: np.ndarray  # (N,) SBS index or VIRTUAL
    quotas: np.ndarray  # (S,)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=int).copy()
        self.quotas = np.asarray(self.quotas, dtype=int)

    @property
    def n_ues(self) -> int:
        return self.assignment.shape[0]

    @property
    def n_sbs(self) -> int:
        return self.quotas.shape[0]

    def members(self, node: int) -> tuple:
        return tuple(np.flatnonzero(self.assignment == node).tolist())

    @property
    def per_sbs_members(self) -> list:
        return [self.members(s) for s in range(self.n_sbs)]

    def copy(self) -> "Matching":
        return Matching(self.assignment, self.quotas)

    def is_valid(self) -> bool:
        """Quota, single-assignment and consistency conditions of a many-to-one matching."""
        a = self.assignment
        if a.shape != (self.n_ues,) or np.any((a < VIRTUAL) | (a >= self.n_sbs)):
            return False
        counts = np.bincount(a[a != VIRTUAL], minlength=self.n_sbs)
        if np.any(counts > self.quotas):
            return False
        # each UE sits in exactly one member list, the one its assignment names
        seen = sorted(itertools.chain(self.members(VIRTUAL), *self.per_sbs_members))
        return seen == list(range(self.n_ues))

    def apply(self, proposal: "SwapProposal") -> "Matching":
        out = self.copy()
        out.assignment[proposal.ue_a] = proposal.sbs_to
        if proposal.ue_b is not None:
            out.assignment[proposal.ue_b] = proposal.sbs_from
        return out

    def key(self) -> tuple:
        return tuple(self.assignment.tolist())


@dataclass(frozen=True)
class SwapProposal:
    ue_a: int
    ue_b: Optional[int]  # None: ue_a moves alone into a free slot
    sbs_from: int
    sbs_to: int

    def __post_init__(self):
        if self.ue_a == self.ue_b:
            raise ValueError("a swap needs two distinct UEs")
        if self.sbs_from == self.sbs_to:
            raise ValueError("source and target SBS must differ")

    def as_dict(self) -> dict:
        return {"ue_a": self.ue_a, "ue_b": self.ue_b, "sbs_from": self.sbs_from, "sbs_to": self.sbs_to}


class PreferenceBasis(enum.Enum):
    RSRP = "rsrp"
    LATENCY = "latency"


@dataclass
class PreferenceState:
    ue_prefs: list  # per UE: SBS indices, best first
    sbs_prefs: list  # per SBS: UE indices, best first
    basis: PreferenceBasis


class AssociationGame:
    """Everything the matching needs about one network instance.

    Holds per-link full-band upload times, compute times, the virtual-node
    delays and a cache of per-cell allocations keyed by member set. The cache
    is valid for the lifetime of the game because the channel is static.
    """

    def __init__(self, links, profile: UeComputeProfile, budget: LearningBudget, quotas=None,
                 alloc: str = "optimal", tol: float = 1e-6):
        if alloc not in ("optimal", "uniform"):
            raise ValueError(f"alloc must be 'optimal' or 'uniform', got {alloc!r}")
        self.links = links
        self.profile = profile
        self.budget = budget
        self.alloc_method = alloc
        self.tol = tol
        self.i_global = iters_global(budget)
        self.comp = t_comp(profile, budget)
        self.bits = profile.model_bits
        self.full_band = self.bits[:, None] / links.rate_coeff  # (N, S) seconds
        self.virtual_delay = self.i_global * (self.bits / links.virtual_rate + self.comp)
        if quotas is None:
            quotas = np.full(links.n_sbs, links.n_ues)
        self.quotas = np.broadcast_to(np.asarray(quotas, dtype=int), (links.n_sbs,)).copy()
        self._cache = {}
        self.exact_solves = 0

    @property
    def n_ues(self) -> int:
        return self.links.n_ues

    @property
    def n_sbs(self) -> int:
        return self.links.n_sbs

    def problem(self, sbs: int, members) -> AllocProblem:
        idx = np.asarray(members, dtype=int)
        return AllocProblem(tuple(members), self.bits[idx], self.links.rate_coeff[idx, sbs],
                            self.comp[idx], self.i_global)

    def alloc(self, sbs: int, members) -> AllocSolution:
        key = (sbs, tuple(sorted(members)))
        sol = self._cache.get(key)
        if sol is None:
            self.exact_solves += 1
            prob = self.problem(sbs, key[1])
            sol = solve_beta(prob, self.tol) if self.alloc_method == "optimal" else uniform_split(prob)
            self._cache[key] = sol
        return sol

    def node_delay(self, node: int, members) -> float:
        """Global delay of an aggregation node; 0 for a node with no members."""
        if not members:
            return 0.0
        if node == VIRTUAL:
            return float(max(self.virtual_delay[m] for m in members))
        return self.alloc(node, members).objective

    def node_lower_bound(self, node: int, members) -> float:
        """Cheap lower bound on ``node_delay`` (exact when compute times coincide)."""
        if not members or node == VIRTUAL:
            return self.node_delay(node, members)
        a = self.full_band[list(members), node]
        c = self.comp[list(members)]
        return self.i_global * max(float(np.max(a + c)), float(c.min() + a.sum()))

    def ue_delay(self, matching: Matching, ue: int) -> float:
        node = int(matching.assignment[ue])
        if node == VIRTUAL:
            return float(self.virtual_delay[ue])
        return self.node_delay(node, matching.members(node))

    def sbs_delays(self, matching: Matching) -> np.ndarray:
        return np.array([self.node_delay(s, matching.members(s)) for s in range(self.n_sbs)])

    def system_delay(self, matching: Matching) -> float:
        virt = matching.members(VIRTUAL)
        vmax = float(self.virtual_delay[list(virt)].max()) if virt else 0.0
        return float(max(vmax, self.sbs_delays(matching).max(initial=0.0)))

    def allocations(self, matching: Matching) -> dict:
        return {s: self.alloc(s, m) for s in range(self.n_sbs) if (m := matching.members(s))}

    def association(self, matching: Matching, allocs: Optional[dict] = None) -> Association:
        allocs = self.allocations(matching) if allocs is None else allocs
        beta = np.full(self.n_ues, np.nan)
        for sol in allocs.values():
            beta[list(sol.ue_set)] = sol.beta
        return Association(matching.assignment.copy(), beta, np.array(self.profile.f_max, copy=True))


# ---------------------------------------------------------------------------
# association rules


def initial_association(rsrp, quotas) -> Matching:
    """Strongest-RSRP association under quotas; overflow goes to the virtual node.

    Links are granted in descending RSRP order, ties broken by lower SBS then
    lower UE index, so when an SBS fills up it keeps its strongest UEs.
    """
    rsrp = np.asarray(rsrp, dtype=float)
    n_ues, n_sbs = rsrp.shape
    quotas = np.broadcast_to(np.asarray(quotas, dtype=int), (n_sbs,))
    ue_idx, sbs_idx = np.meshgrid(np.arange(n_ues), np.arange(n_sbs), indexing="ij")
    order = np.lexsort((ue_idx.ravel(), sbs_idx.ravel(), -rsrp.ravel()))
    assignment = np.full(n_ues, VIRTUAL)
    load = np.zeros(n_sbs, dtype=int)
    for flat in order:
        n, s = divmod(int(flat), n_sbs)
        if assignment[n] == VIRTUAL and load[s] < quotas[s]:
            assignment[n] = s
            load[s] += 1
    return Matching(assignment, quotas)


def ue_utility(matching: Matching, ue: int, game: AssociationGame) -> float:
    return -game.ue_delay(matching, ue)


def sbs_utility(matching: Matching, game: AssociationGame) -> float:
    """Every SBS scores the summed system delay over all UEs, i.e. ``-N * T_global``."""
    return -matching.n_ues * game.system_delay(matching)


def build_preferences(game: AssociationGame, matching: Optional[Matching] = None,
                      basis: PreferenceBasis = PreferenceBasis.RSRP) -> PreferenceState:
    """Rank SBSs for each UE and UEs for each SBS.

    UEs rank SBSs by RSRP until a matching exists, then by the delay they would
    see there. SBSs always rank UEs by the latency they would add.
    """
    n_ues, n_sbs = game.n_ues, game.n_sbs
    if basis is PreferenceBasis.RSRP or matching is None:
        ue_prefs = [np.argsort(-game.links.rsrp[n], kind="stable").tolist() for n in range(n_ues)]
        basis = PreferenceBasis.RSRP
    else:
        ue_prefs = []
        for n in range(n_ues):
            seen = []
            for s in range(n_sbs):
                mem = set(matching.members(s)) | {n}
                seen.append(game.node_delay(s, tuple(mem)))
            ue_prefs.append(np.argsort(seen, kind="stable").tolist())
    own = game.i_global * (game.full_band + game.comp[:, None])
    sbs_prefs = [np.argsort(own[:, s], kind="stable").tolist() for s in range(n_sbs)]
    return PreferenceState(ue_prefs, sbs_prefs, basis)


@dataclass
class _Snapshot:
    members: dict  # node -> tuple
    node_delay: dict  # node -> delay (real SBSs only)
    ue_delay: np.ndarray
    system: float
    total: float


def _snapshot(matching: Matching, game: AssociationGame) -> _Snapshot:
    members = {s: matching.members(s) for s in range(matching.n_sbs)}
    members[VIRTUAL] = matching.members(VIRTUAL)
    node_delay = {s: game.node_delay(s, members[s]) for s in range(matching.n_sbs)}
    ue_delay = np.empty(matching.n_ues)
    for s, mem in members.items():
        for m in mem:
            ue_delay[m] = game.virtual_delay[m] if s == VIRTUAL else node_delay[s]
    return _Snapshot(members, node_delay, ue_delay, float(ue_delay.max()), math.fsum(ue_delay))


def _candidates(matching: Matching, snap: _Snapshot, prefs: Optional[PreferenceState]):
    """All swap and move proposals in ascending (n, n', s') order."""
    n_ues, n_sbs = matching.n_ues, matching.n_sbs
    a = matching.assignment
    load = {s: len(snap.members[s]) for s in range(n_sbs)}
    for n in range(n_ues):
        acceptable = set(prefs.ue_prefs[n]) if prefs is not None else None
        for n2 in range(n + 1, n_ues):
            if a[n] == a[n2]:
                continue
            if acceptable is not None and a[n2] != VIRTUAL and a[n2] not in acceptable:
                continue
            yield SwapProposal(n, n2, int(a[n]), int(a[n2]))
        for s2 in range(n_sbs):
            if s2 == a[n] or load[s2] >= matching.quotas[s2]:
                continue
            if acceptable is not None and s2 not in acceptable:
                continue
            yield SwapProposal(n, None, int(a[n]), s2)


def _new_members(snap: _Snapshot, p: SwapProposal):
    src = [m for m in snap.members[p.sbs_from] if m != p.ue_a]
    dst = [m for m in snap.members[p.sbs_to] if m != p.ue_b]
    if p.ue_b is not None:
        src.append(p.ue_b)
    dst.append(p.ue_a)
    return tuple(sorted(src)), tuple(sorted(dst))


def evaluate_proposal(matching: Matching, game: AssociationGame, p: SwapProposal,
                      snap: Optional[_Snapshot] = None, screen: bool = False) -> Optional[dict]:
    """Test one proposal against the approval rule.

    A swap blocking pair leaves both moving UEs weakly better off and the
    system delay, which every SBS scores, no higher; and either that delay
    drops, or a mover strictly gains while the summed per-UE delay drops.
    Returns the before/after figures for a blocking pair, otherwise None.
    With ``screen`` a cheap lower bound rejects hopeless proposals before any
    allocation is solved.
    """
    snap = _snapshot(matching, game) if snap is None else snap
    old_sys = snap.system
    sys_cap = old_sys * (1.0 + _REL)
    src, dst = _new_members(snap, p)

    def bound_ok(node, mem, cap):
        return not screen or node == VIRTUAL or game.node_lower_bound(node, mem) <= cap

    # ue_a lands at sbs_to: must not exceed its old delay, nor the old system delay
    cap_a = min(snap.ue_delay[p.ue_a] * (1 + _REL), sys_cap)
    cap_src = sys_cap
    if p.ue_b is not None:
        cap_src = min(sys_cap, snap.ue_delay[p.ue_b] * (1 + _REL))
    if not (bound_ok(p.sbs_to, dst, cap_a) and bound_ok(p.sbs_from, src, cap_src)):
        return None

    new_node = {}
    for node, mem in ((p.sbs_from, src), (p.sbs_to, dst)):
        if node != VIRTUAL:
            new_node[node] = game.node_delay(node, mem)

    def delay_of(ue, node):
        return game.virtual_delay[ue] if node == VIRTUAL else new_node[node]

    movers = [(p.ue_a, p.sbs_to)] + ([(p.ue_b, p.sbs_from)] if p.ue_b is not None else [])
    after = {ue: delay_of(ue, node) for ue, node in movers}
    if any(after[ue] > snap.ue_delay[ue] * (1 + _REL) for ue in after):
        return None

    rest = [d for s, d in snap.node_delay.items() if s not in new_node]
    virt = [m for m in snap.members[VIRTUAL] if m not in (p.ue_a, p.ue_b)]
    virt += [ue for ue, node in movers if node == VIRTUAL]
    new_sys = max(rest + list(new_node.values()) + [game.virtual_delay[m] for m in virt] + [0.0])
    if new_sys > sys_cap:
        return None
    # summed per-UE delay: only the members of the two touched nodes change
    ue_delay = snap.ue_delay.copy()
    for node, mem in ((p.sbs_from, src), (p.sbs_to, dst)):
        for m in mem:
            ue_delay[m] = delay_of(m, node)
    new_total = math.fsum(ue_delay)
    if not new_sys < old_sys * (1.0 - _REL):
        gains = any(after[ue] < snap.ue_delay[ue] * (1 - _REL) for ue in after)
        if not (gains and new_total < snap.total * (1.0 - _REL)):
            return None
    return {"system_before": old_sys, "system_after": float(new_sys),
            "total_before": snap.total, "total_after": new_total,
            "ue_a_before": float(snap.ue_delay[p.ue_a]), "ue_a_after": float(after[p.ue_a])}


def find_swap_blocking_pair(matching: Matching, game: AssociationGame, prefs: Optional[PreferenceState] = None,
                            prune: bool = True) -> Optional[SwapProposal]:
    """First swap blocking pair in deterministic scan order, or None.

    ``prune=False`` evaluates every proposal exactly (used for stability
    certificates); pruning only skips proposals whose lower bound already
    breaks the rule and never changes the answer.
    """
    snap = _snapshot(matching, game)
    for p in _candidates(matching, snap, prefs):
        if evaluate_proposal(matching, game, p, snap, screen=prune) is not None:
            return p
    return None


def all_swap_blocking_pairs(matching: Matching, game: AssociationGame) -> list:
    """Exhaustive scan over every swap and move proposal, no pruning."""
    snap = _snapshot(matching, game)
    return [p for p in _candidates(matching, snap, None) if evaluate_proposal(matching, game, p, snap) is not None]


@dataclass
class MatchingStats:
    swaps: int = 0
    scans: int = 0
    exact_solves: int = 0
    wall_time_s: float = 0.0
    delay_history: list = field(default_factory=list)
    total_history: list = field(default_factory=list)


def run_matching(game: AssociationGame, matching: Optional[Matching] = None, prefs: Optional[PreferenceState] = None,
                 trace: Optional[Callable[[dict], None]] = None, max_swaps: Optional[int] = None):
    """Apply swap blocking pairs until none is left.

    Starts from ``matching`` or the RSRP association. Returns the stable
    matching, its per-SBS allocations and a :class:`MatchingStats`.
    """
    t0 = time.perf_counter()
    solves0 = game.exact_solves
    if matching is None:
        matching = initial_association(game.links.rsrp, game.quotas)
    snap = _snapshot(matching, game)
    stats = MatchingStats(delay_history=[snap.system], total_history=[snap.total])
    while max_swaps is None or stats.swaps < max_swaps:
        stats.scans += 1
        p = find_swap_blocking_pair(matching, game, prefs)
        if p is None:
            break
        info = evaluate_proposal(matching, game, p)
        matching = matching.apply(p)
        stats.swaps += 1
        stats.delay_history.append(info["system_after"])
        stats.total_history.append(info["total_after"])
        if trace is not None:
            trace({"swap": stats.swaps, **p.as_dict(), "delay_before_s": info["system_before"],
                   "delay_after_s": info["system_after"], "total_before_s": info["total_before"],
                   "total_after_s": info["total_after"]})
    stats.exact_solves = game.exact_solves - solves0
    stats.wall_time_s = time.perf_counter() - t0
    return matching, game.allocations(matching), stats


# ---------------------------------------------------------------------------
# baselines


def baseline_random(links, quotas, seed) -> Matching:
    """Random association, each UE drawn towards nearer SBSs (weight 1/d^2) among those with room."""
    rng = np.random.default_rng(seed)
    n_ues, n_sbs = links.n_ues, links.n_sbs
    quotas = np.broadcast_to(np.asarray(quotas, dtype=int), (n_sbs,))
    weights = 1.0 / np.maximum(links.distances, 1e-9) ** 2
    load = np.zeros(n_sbs, dtype=int)
    assignment = np.full(n_ues, VIRTUAL)
    for n in range(n_ues):
        open_ = load < quotas
        if not open_.any():
            continue
        w = np.where(open_, weights[n], 0.0)
        s = int(rng.choice(n_sbs, p=w / w.sum()))
        assignment[n] = s
        load[s] += 1
    return Matching(assignment, quotas)


def baseline_uniform(matching: Matching, game: AssociationGame) -> dict:
    """Equal bandwidth split inside every SBS of ``matching``."""
    out = {}
    for s in range(matching.n_sbs):
        mem = matching.members(s)
        if mem:
            out[s] = uniform_split(game.problem(s, mem))
    return out


def baseline_one_sided(game: AssociationGame) -> Matching:
    """UE-proposing deferred acceptance with UE preferences frozen at the RSRP ranking.

    SBSs hold the best UEs within quota by the latency each UE would add.
    UEs rejected everywhere fall back to the virtual node.
    """
    prefs = build_preferences(game, basis=PreferenceBasis.RSRP)
    rank = np.empty((game.n_sbs, game.n_ues), dtype=int)
    for s, order in enumerate(prefs.sbs_prefs):
        rank[s, order] = np.arange(game.n_ues)
    nxt = np.zeros(game.n_ues, dtype=int)
    held = {s: [] for s in range(game.n_sbs)}
    free = list(range(game.n_ues))
    while free:
        n = free.pop(0)
        if nxt[n] >= game.n_sbs:
            continue
        s = prefs.ue_prefs[n][nxt[n]]
        nxt[n] += 1
        held[s].append(n)
        held[s].sort(key=lambda m: rank[s, m])
        if len(held[s]) > game.quotas[s]:
            free.append(held[s].pop())
    assignment = np.full(game.n_ues, VIRTUAL)
    for s, mem in held.items():
        assignment[mem] = s
    return Matching(assignment, game.quotas)


def baseline_optimal(game: AssociationGame, limit: float = 1e7) -> Matching:
    """Exhaustive search for the association with the smallest system delay.

    The virtual node is only offered when the quotas cannot host every UE.
    """
    n_ues, n_sbs = game.n_ues, game.n_sbs
    options = list(range(n_sbs))
    if game.quotas.sum() < n_ues:
        options.append(VIRTUAL)
    if math.pow(len(options), n_ues) > limit:
        raise TooLarge(f"{len(options)}^{n_ues} assignments exceed the enumeration limit {limit:g}")
    best, best_val = None, math.inf
    for combo in itertools.product(options, repeat=n_ues):
        groups = {s: [] for s in options}
        for n, s in enumerate(combo):
            groups[s].append(n)
        if any(len(groups[s]) > game.quotas[s] for s in range(n_sbs)):
            continue
        val = max(game.node_delay(s, tuple(m)) for s, m in groups.items())
        if val < best_val:
            best, best_val = combo, val
    return Matching(np.array(best, dtype=int), game.quotas)
