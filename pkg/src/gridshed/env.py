"""Episodic control environment over the transient simulator.

Observation is [monitored bus voltages (pu); remaining served fraction of
controllable loads].  Actions are per-controllable-bus shed fractions in
[0, 0.2], applied after a physics mask that forbids shedding wherever the
locally associated monitored voltage is already healthy.  Underfrequency-style
UVLS relays stay armed during episodes (hybrid mode), so a learned policy is
always acting alongside the rule-based backup.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import SIM_DT, DynState, Event, SimParams, init_dynamics, shed_load, simulate_interval
from .network import PowerFlowCase
from .powerflow import solve_power_flow
from .uvls import UvlsSettings

__all__ = [
    "EnvSpec",
    "RewardBreakdown",
    "Scenario",
    "ScenarioError",
    "GridEnv",
    "build_env_spec",
    "recovery_envelope",
]


def recovery_envelope(tau: float) -> float:
    """Minimum acceptable voltage (pu) at time ``tau`` seconds after fault clearing."""
    if tau < 0.33:
        return 0.7
    if tau < 0.5:
        return 0.8
    if tau < 1.5:
        return 0.9
    return 0.95


@dataclass(frozen=True)
class EnvSpec:
    """Derived interface description for one case family.

    ``monitored_buses`` are the transmission-class buses inside the case's
    zones; ``controllable_buses`` are load buses carrying at least
    ``motor_mw_threshold`` MW of motor load.  ``mask_assoc[i]`` is the index
    into ``monitored_buses`` of the monitored bus electrically nearest to
    controllable bus i (used by the action mask).
    """

    monitored_buses: tuple[int, ...]
    controllable_buses: tuple[int, ...]
    mask_assoc: tuple[int, ...]
    act_low: float = 0.0
    act_high: float = 0.2
    control_dt: float = 0.1
    episode_len: float = 10.0
    fault_start: float = 1.0
    v_mask: float = 0.95
    c1: float = 5.0
    c2: float = 100.0
    c3: float = 1.0
    r_fail: float = 1000.0

    @property
    def obs_dim(self) -> int:
        return len(self.monitored_buses) + len(self.controllable_buses)

    @property
    def act_dim(self) -> int:
        return len(self.controllable_buses)


@dataclass(frozen=True)
class RewardBreakdown:
    voltage_penalty: float
    shed_penalty: float
    invalid_penalty: float
    terminal_penalty: float

    @property
    def total(self) -> float:
        return (self.voltage_penalty + self.shed_penalty
                + self.invalid_penalty + self.terminal_penalty)


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    case_id: str
    fault_bus: int
    fault_duration: float


class ScenarioError(RuntimeError):
    """Raised when a scenario cannot be realized (e.g. its case will not solve)."""


def _nearest_monitored(case: PowerFlowCase, start: int, monitored: Sequence[int]) -> int:
    """Breadth-first over in-service branches; smallest-id monitored bus at the
    first reachable depth."""
    mon = set(monitored)
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {start}
    frontier = deque([start])
    while frontier:
        hits = []
        nxt = deque()
        for _ in range(len(frontier)):
            u = frontier.popleft()
            if u in mon:
                hits.append(u)
                continue
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if hits:
            return min(hits)
        frontier = nxt
    raise ValueError(f"bus {start}: no monitored bus reachable")


def build_env_spec(case: PowerFlowCase, *, voltage_class_kv: float = 115.0,
                   motor_mw_threshold: float = 20.0, **overrides) -> EnvSpec:
    """Derive monitored/controllable bus lists from the case itself."""
    zoned = {b for z in case.zones for b in z.buses}
    monitored = tuple(sorted(
        b.id for b in case.buses
        if b.id in zoned and b.voltage_kv >= voltage_class_kv))
    controllable = tuple(sorted(
        ld.bus for ld in case.loads
        if ld.motor is not None
        and ld.p0 * ld.motor_fraction * case.base_mva >= motor_mw_threshold))
    if not monitored:
        raise ValueError("case has no monitored buses at or above the voltage class")
    if not controllable:
        raise ValueError("case has no controllable motor-load buses")
    assoc = tuple(monitored.index(_nearest_monitored(case, cb, monitored))
                  for cb in controllable)
    return EnvSpec(monitored, controllable, assoc, **overrides)


class GridEnv:
    """Gym-style episodic environment.

    ``cases`` may be a single case or a mapping/sequence of cases; scenarios
    select by ``case_id``.  Per-case power flow and the quiet pre-fault state
    are cached, so repeated resets only pay for the faulted portion.
    """

    def __init__(self, cases: PowerFlowCase | Mapping[str, PowerFlowCase] | Sequence[PowerFlowCase],
                 spec: EnvSpec | None = None, *,
                 relays: UvlsSettings | None = None,
                 params: SimParams | None = None):
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
        # hybrid mode: the rule-based backup waits an extra second so the
        # policy gets the first move; the standalone baseline uses offset 0
        self.relays = relays if relays is not None else UvlsSettings(backup_offset_s=1.0)
        self.params = params if params is not None else SimParams()
        self._prefault: dict[str, DynState] = {}
        self._state: DynState | None = None
        self._scenario: Scenario | None = None
        self._clear_t = 0.0
        self._done = True
        self._mon_pos: np.ndarray | None = None
        self._ctl_load_idx: np.ndarray | None = None
        self._initial_ctl_mw = 0.0
        self._mw_seen = 0.0

    # -- episode plumbing ---------------------------------------------------

    def _prefault_state(self, case_id: str) -> DynState:
        cached = self._prefault.get(case_id)
        if cached is None:
            case = self._cases.get(case_id)
            if case is None:
                raise ScenarioError(f"unknown case_id {case_id!r}")
            sol = solve_power_flow(case)
            if not sol.converged:
                raise ScenarioError(
                    f"case {case_id!r}: power flow did not converge "
                    f"(max mismatch {sol.max_mismatch:.3e}); scenario rejected")
            st = init_dynamics(case, sol, self.params)
            simulate_interval(st, SIM_DT, self.spec.fault_start)
            self._prefault[case_id] = st
            cached = st
        return cached

    def _index_state(self, st: DynState) -> None:
        spec = self.spec
        self._mon_pos = np.array([st.model.bus_pos[b] for b in spec.monitored_buses])
        self._ctl_load_idx = np.array(
            [st.model.load_index_of_bus(b) for b in spec.controllable_buses])
        self._initial_ctl_mw = float(
            st.model.load_mw0[self._ctl_load_idx].sum())

    def _observe(self, st: DynState) -> np.ndarray:
        v = np.abs(st.v[self._mon_pos])
        rem = st.remaining[self._ctl_load_idx]
        return np.concatenate([v, rem])

    def reset(self, scenario: Scenario) -> np.ndarray:
        spec = self.spec
        st = self._prefault_state(scenario.case_id).copy()
        self._clear_t = spec.fault_start + scenario.fault_duration
        events = [Event(spec.fault_start, "apply_fault", scenario.fault_bus),
                  Event(self._clear_t, "clear_fault", scenario.fault_bus)]
        # first control instant at or after clearing, on the control_dt grid
        n_ctl = int(np.ceil(self._clear_t / spec.control_dt - 1e-9))
        t_first = n_ctl * spec.control_dt
        simulate_interval(st, SIM_DT, t_first - st.t, events=events,
                          relays=self.relays)
        self._state = st
        self._scenario = scenario
        self._done = False
        self._index_state(st)
        self._mw_seen = st.total_mw_shed()
        return self._observe(st)

    # -- action handling ----------------------------------------------------

    def mask_action(self, obs: np.ndarray, raw_action: np.ndarray) -> tuple[np.ndarray, int]:
        """Clip to [act_low, act_high], then zero components whose associated
        monitored voltage is at or above v_mask.  Returns (masked, invalid_count)
        where invalid counts components that were nonzero after clipping but
        got zeroed by the mask."""
        spec = self.spec
        raw = np.asarray(raw_action, dtype=float)
        if raw.shape != (spec.act_dim,):
            raise ValueError(f"action has shape {raw.shape}, expected ({spec.act_dim},)")
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (spec.obs_dim,):
            raise ValueError(f"observation has shape {obs.shape}, expected ({spec.obs_dim},)")
        clipped = np.clip(raw, spec.act_low, spec.act_high)
        v_assoc = obs[list(spec.mask_assoc)]
        healthy = v_assoc >= spec.v_mask
        invalid = int(np.count_nonzero(healthy & (clipped > 0.0)))
        masked = np.where(healthy, 0.0, clipped)
        return masked, invalid

    def step(self, action: np.ndarray) -> tuple[np.ndarray, RewardBreakdown, bool, dict]:
        if self._done or self._state is None:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        spec = self.spec
        st = self._state
        obs_now = self._observe(st)
        masked, invalid = self.mask_action(obs_now, action)

        policy_before = st.mw_shed_policy
        uvls_before = st.mw_shed_uvls
        for frac, bus in zip(masked, spec.controllable_buses):
            if frac > 0.0:
                shed_load(st, int(bus), float(frac), source="policy")
        simulate_interval(st, SIM_DT, spec.control_dt, relays=self.relays)

        tau = st.t - self._clear_t
        v = np.abs(st.v[self._mon_pos])
        bound = recovery_envelope(tau)
        voltage_penalty = -spec.c1 * float(np.maximum(0.0, bound - v).sum())
        mw_policy = st.mw_shed_policy - policy_before
        mw_uvls = st.mw_shed_uvls - uvls_before
        shed_penalty = -spec.c2 * (mw_policy + mw_uvls) / self._initial_ctl_mw
        invalid_penalty = -spec.c3 * invalid

        done = st.collapsed or st.t >= spec.episode_len - 1e-9
        terminal_penalty = 0.0
        if done:
            if st.collapsed or bool(np.any(v < 0.95)):
                terminal_penalty = -spec.r_fail
            self._done = True
        reward = RewardBreakdown(voltage_penalty, shed_penalty,
                                 invalid_penalty, terminal_penalty)
        info = {
            "t": st.t,
            "mw_shed_policy": mw_policy,
            "mw_shed_uvls": mw_uvls,
            "invalid_count": invalid,
            "min_monitored_v": float(v.min()),
            "collapsed": st.collapsed,
        }
        return self._observe(st), reward, done, info

    @property
    def state(self) -> DynState:
        if self._state is None:
            raise RuntimeError("no active episode")
        return self._state

    @property
    def clear_time(self) -> float:
        return self._clear_t
