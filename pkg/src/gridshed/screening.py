"""Stability screening: no-control rollouts, CCT search, dataset assembly.

Everything here runs the simulator with relays off and zero control actions,
because the question screening answers is a property of the *system*, not of
any controller: does the scenario recover on its own?  The recovery criterion
is the voltage envelope (see :func:`gridshed.env.recovery_envelope`) checked
at every control-grid instant after fault clearing plus the episode end, with
numerical collapse counting as failure.  The same criterion drives the CCT
bisection, the ``requires_shedding`` dataset labels, and the no-shed
classifier in the report module, so the three can never disagree.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import SIM_DT, DynState, Event, SimParams, init_dynamics, simulate_interval
from .env import EnvSpec, Scenario, ScenarioError, build_env_spec, recovery_envelope
from .network import PowerFlowCase
from .powerflow import solve_power_flow

__all__ = [
    "CYCLE_S",
    "NoControlOutcome",
    "CctResult",
    "ScenarioDataset",
    "Screener",
    "zone_of_bus",
    "compute_cct",
    "rank_and_sample_contingencies",
    "build_datasets",
    "load_dataset",
]

CYCLE_S = 1.0 / 60.0  # one cycle at nominal frequency

DATASET_HEADER = ["scenario_id", "case_id", "fault_bus", "fault_duration_s",
                  "requires_shedding"]


@dataclass(frozen=True)
class NoControlOutcome:
    """Result of one relays-off, zero-action rollout."""

    stable: bool
    collapsed: bool
    worst_margin: float  # min over samples of (min monitored V - envelope bound)
    violated_zones: frozenset[str]  # zones owning a bus seen below the envelope


@dataclass(frozen=True)
class CctResult:
    bus: int
    cct_s: float
    below_range: bool  # unstable even at the minimum duration
    above_range: bool  # stable even at the maximum duration
    n_rollouts: int

    @property
    def cct_cycles(self) -> float:
        return self.cct_s / CYCLE_S


@dataclass(frozen=True)
class ScenarioDataset:
    """A labeled scenario list for one role (train or test)."""

    role: str
    scenarios: tuple[Scenario, ...]
    requires_shedding: tuple[bool, ...]
    seed: int
    provenance: str = ""

    def __post_init__(self):
        if len(self.scenarios) != len(self.requires_shedding):
            raise ValueError("labels and scenarios differ in length")

    def __len__(self) -> int:
        return len(self.scenarios)

    @property
    def case_ids(self) -> frozenset[str]:
        return frozenset(s.case_id for s in self.scenarios)

    @property
    def fault_buses(self) -> frozenset[int]:
        return frozenset(s.fault_bus for s in self.scenarios)

    def label_of(self, scenario_id: str) -> bool:
        for s, lab in zip(self.scenarios, self.requires_shedding):
            if s.scenario_id == scenario_id:
                return lab
        raise KeyError(scenario_id)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DATASET_HEADER)
            for s, lab in zip(self.scenarios, self.requires_shedding):
                w.writerow([s.scenario_id, s.case_id, s.fault_bus,
                            repr(s.fault_duration), str(lab).lower()])


def load_dataset(path, role: str = "", seed: int = 0) -> ScenarioDataset:
    """Read a dataset CSV written by :meth:`ScenarioDataset.to_csv`."""
    scenarios: list[Scenario] = []
    labels: list[bool] = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != DATASET_HEADER:
            raise ValueError(f"unexpected dataset header {header!r}")
        for row in rd:
            sid, cid, bus, dur, lab = row
            scenarios.append(Scenario(sid, cid, int(bus), float(dur)))
            labels.append(lab.strip().lower() in ("true", "1"))
    return ScenarioDataset(role or "unknown", tuple(scenarios), tuple(labels), seed)


def zone_of_bus(case: PowerFlowCase, bus: int) -> str:
    """Zone owning ``bus``; unzoned buses borrow the nearest zone by breadth-first
    search over in-service branches (ties to the lexicographically first zone)."""
    owner = {b: z.name for z in case.zones for b in z.buses}
    if bus in owner:
        return owner[bus]
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {bus}
    frontier = [bus]
    while frontier:
        hits = sorted(owner[u] for u in frontier if u in owner)
        if hits:
            return hits[0]
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    raise ValueError(f"bus {bus}: no zoned bus reachable")


class Screener:
    """No-control rollout engine with per-case prefault caching.

    Mirrors the environment's episode timeline (fault at ``fault_start``, 10 s
    horizon, 0.1 s control grid) but with relays disabled and no actions, so
    its verdicts are pure system properties.
    """

    def __init__(self, cases: PowerFlowCase | Mapping[str, PowerFlowCase] | Sequence[PowerFlowCase],
                 *, spec: EnvSpec | None = None, params: SimParams | None = None):
        if isinstance(cases, PowerFlowCase):
            self._cases = {cases.case_id: cases}
        elif isinstance(cases, Mapping):
            self._cases = dict(cases)
        else:
            self._cases = {c.case_id: c for c in cases}
        if not self._cases:
            raise ValueError("no cases supplied")
        first = next(iter(self._cases.values()))
        self.spec = spec if spec is not None else build_env_spec(first)
        self.params = params if params is not None else SimParams()
        self._prefault: dict[str, DynState] = {}
        self._zone_by_mon: dict[str, tuple[str, ...]] = {}

    def add_case(self, case: PowerFlowCase) -> None:
        self._cases[case.case_id] = case

    def _prefault_state(self, case_id: str) -> DynState:
        cached = self._prefault.get(case_id)
        if cached is None:
            case = self._cases.get(case_id)
            if case is None:
                raise ScenarioError(f"unknown case_id {case_id!r}")
            sol = solve_power_flow(case)
            if not sol.converged:
                raise ScenarioError(f"case {case_id!r}: power flow did not converge")
            st = init_dynamics(case, sol, self.params)
            simulate_interval(st, SIM_DT, self.spec.fault_start)
            self._prefault[case_id] = st
            self._zone_by_mon[case_id] = tuple(
                zone_of_bus(case, b) for b in self.spec.monitored_buses)
            cached = st
        return cached

    def outcome(self, case_id: str, fault_bus: int, duration: float,
                early_abort: bool = True) -> NoControlOutcome:
        """Run the scenario with no control and no relays; judge the envelope.

        With ``early_abort`` the rollout stops at the first violation or at
        collapse (enough for a verdict); without it the full horizon runs and
        ``worst_margin`` / ``violated_zones`` cover the whole episode.
        """
        spec = self.spec
        st = self._prefault_state(case_id).copy()
        zones = self._zone_by_mon[case_id]
        mon_pos = np.array([st.model.bus_pos[b] for b in spec.monitored_buses])
        clear_t = spec.fault_start + duration
        events = [Event(spec.fault_start, "apply_fault", fault_bus),
                  Event(clear_t, "clear_fault", fault_bus)]
        # judge exactly the instants an episode prices: the ends of control
        # steps, the first of which lies one control_dt past the episode's
        # first control instant.  Anything finer would label scenarios the
        # reward can never see.
        n_ctl = int(np.ceil(clear_t / spec.control_dt - 1e-9)) + 1
        t_first = n_ctl * spec.control_dt
        simulate_interval(st, SIM_DT, t_first - st.t, events=events)

        worst = math.inf
        violated: set[str] = set()
        while True:
            bound = recovery_envelope(st.t - clear_t)
            v = np.abs(st.v[mon_pos])
            worst = min(worst, float(v.min() - bound))
            below = v < bound
            if below.any():
                violated.update(zones[i] for i in np.flatnonzero(below))
            done = st.t >= spec.episode_len - 1e-9
            if st.collapsed:
                violated.update(zones)
                return NoControlOutcome(False, True, worst, frozenset(violated))
            if done or (early_abort and violated):
                break
            simulate_interval(st, SIM_DT, spec.control_dt)
        return NoControlOutcome(not violated, False, worst, frozenset(violated))

    def stable(self, case_id: str, fault_bus: int, duration: float) -> bool:
        return self.outcome(case_id, fault_bus, duration).stable


def compute_cct(case: PowerFlowCase | Screener, fault_bus: int,
                resolution: float = CYCLE_S, max_duration: float = 30 * CYCLE_S,
                case_id: str | None = None) -> CctResult:
    """Longest fault duration (on the ``resolution`` grid) the system survives
    without control, found by bisection between the one-unit and
    ``max_duration`` brackets.

    Accepts either a case or a prebuilt :class:`Screener` (so batch callers
    share the prefault cache).  Returns 0 with ``below_range`` when even the
    minimum duration fails, ``max_duration`` with ``above_range`` when even
    the maximum survives.
    """
    scr = case if isinstance(case, Screener) else Screener(case)
    cid = case_id if case_id is not None else next(iter(scr._cases))
    n_hi = int(round(max_duration / resolution))
    if n_hi < 1:
        raise ValueError("max_duration must cover at least one resolution step")
    n = 0
    if not scr.stable(cid, fault_bus, resolution):
        return CctResult(fault_bus, 0.0, True, False, 1)
    n += 1
    if scr.stable(cid, fault_bus, n_hi * resolution):
        return CctResult(fault_bus, n_hi * resolution, False, True, 2)
    lo, hi = 1, n_hi  # stable at lo, unstable at hi
    rollouts = 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        rollouts += 1
        if scr.stable(cid, fault_bus, mid * resolution):
            lo = mid
        else:
            hi = mid
    return CctResult(fault_bus, lo * resolution, False, False, rollouts)


def rank_and_sample_contingencies(case: PowerFlowCase, candidate_buses: Sequence[int],
                                  n_fault_buses: int, rng: np.random.Generator,
                                  *, n_quantiles: int = 2,
                                  duration_cycles: tuple[int, int] = (3, 25),
                                  durations_per_bus: int = 1,
                                  screener: Screener | None = None,
                                  ) -> list[tuple[int, float]]:
    """Pick ``n_fault_buses`` fault locations covering (zone, CCT-band) strata.

    Every candidate gets a CCT; candidates are then bucketed by home zone and
    by CCT quantile band within the zone, and selection round-robins across
    buckets so no zone or severity band is skipped while any bucket still has
    buses.  Each selected bus is paired with ``durations_per_bus`` fault
    durations drawn uniformly from whole cycles in ``duration_cycles``.
    """
    if n_fault_buses < 1:
        raise ValueError("n_fault_buses must be >= 1")
    if n_fault_buses > len(candidate_buses):
        raise ValueError("more fault buses requested than candidates")
    scr = screener if screener is not None else Screener(case)
    ccts = {b: compute_cct(scr, b, case_id=case.case_id).cct_s for b in candidate_buses}
    by_zone: dict[str, list[int]] = {}
    for b in sorted(candidate_buses):
        by_zone.setdefault(zone_of_bus(case, b), []).append(b)

    buckets: list[list[int]] = []
    for zone in sorted(by_zone):
        members = sorted(by_zone[zone], key=lambda b: (ccts[b], b))
        k = min(n_quantiles, len(members))
        # contiguous CCT bands, sizes as equal as the count allows
        bounds = np.linspace(0, len(members), k + 1).round().astype(int)
        for a, z in zip(bounds[:-1], bounds[1:]):
            band = members[a:z]
            if band:
                rng.shuffle(band)
                buckets.append(band)

    chosen: list[int] = []
    while len(chosen) < n_fault_buses:
        progressed = False
        for band in buckets:
            if band and len(chosen) < n_fault_buses:
                chosen.append(band.pop())
                progressed = True
        if not progressed:
            break
    lo_c, hi_c = duration_cycles
    n_dur = min(durations_per_bus, hi_c - lo_c + 1)
    pairs = []
    for b in chosen:
        # without replacement within a bus: uniform marginal, no duplicate pairs
        for d in rng.choice(np.arange(lo_c, hi_c + 1), size=n_dur, replace=False):
            pairs.append((b, int(d) * CYCLE_S))
    return pairs


def build_datasets(cases: Sequence[PowerFlowCase],
                   fault_buses: Sequence[int], durations: Sequence[float],
                   split: tuple[float, float] = (0.5, 0.5), seed: int = 0,
                   *, spec: EnvSpec | None = None, params: SimParams | None = None,
                   provenance: str = "",
                   ) -> tuple[ScenarioDataset, ScenarioDataset]:
    """Assemble labeled train/test datasets from cases × (bus, duration) pairs.

    The case pool and the *unique fault buses* are each shuffled and split by
    the given fractions, so the two roles share no case_id and no fault bus;
    every (bus, duration) pair follows its bus to whichever side it landed on.
    Each scenario is labeled ``requires_shedding`` by a no-control rollout.
    """
    if len(fault_buses) != len(durations):
        raise ValueError("fault_buses and durations must be parallel")
    if not math.isclose(split[0] + split[1], 1.0, abs_tol=1e-9):
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    case_ids = [c.case_id for c in cases]
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("duplicate case_ids in the case pool")
    uniq_buses = sorted(set(fault_buses))
    n_tr_c = int(round(split[0] * len(cases)))
    n_tr_b = int(round(split[0] * len(uniq_buses)))
    if not (0 < n_tr_c < len(cases)) or not (0 < n_tr_b < len(uniq_buses)):
        raise ValueError(
            f"cannot split {len(cases)} cases / {len(uniq_buses)} buses into two "
            f"non-empty disjoint roles at fractions {split}")
    case_perm = rng.permutation(len(cases))
    bus_perm = rng.permutation(len(uniq_buses))
    tr_cases = sorted(case_ids[i] for i in case_perm[:n_tr_c])
    te_cases = sorted(case_ids[i] for i in case_perm[n_tr_c:])
    tr_buses = {uniq_buses[i] for i in bus_perm[:n_tr_b]}

    by_id = {c.case_id: c for c in cases}
    scr = Screener([by_id[cid] for cid in case_ids], spec=spec, params=params)

    def assemble(role: str, role_cases: list[str], own_bus) -> ScenarioDataset:
        pairs = [(b, d) for b, d in zip(fault_buses, durations) if own_bus(b)]
        scenarios, labels = [], []
        k = 0
        for cid in role_cases:
            for bus, dur in pairs:
                sid = f"{role}-{k:05d}"
                scenarios.append(Scenario(sid, cid, bus, dur))
                labels.append(not scr.stable(cid, bus, dur))
                k += 1
        return ScenarioDataset(role, tuple(scenarios), tuple(labels), seed,
                               provenance=provenance)

    train = assemble("train", tr_cases, lambda b: b in tr_buses)
    test = assemble("test", te_cases, lambda b: b not in tr_buses)
    assert not (train.case_ids & test.case_ids)
    assert not (train.fault_buses & test.fault_buses)
    return train, test
