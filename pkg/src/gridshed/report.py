"""Benchmark harness: UVLS baseline, policy-vs-baseline comparison, traces.

The baseline is the rule-based UVLS scheme at its primary settings (no backup
delay offset) with zero policy actions, scored by exactly the same reward
accounting as policy episodes.  Comparisons join per-scenario results on
scenario_id and reduce them to the three aggregates the benchmark cares
about: how often the policy beats the baseline where shedding is required,
how much less load it sheds there, and how reliably it keeps its hands off
scenarios that recover on their own.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .dynamics import SIM_DT, Event, SimParams, init_dynamics, shed_load, simulate_interval
from .env import EnvSpec, GridEnv, Scenario, build_env_spec
from .network import PowerFlowCase
from .pars import Policy, evaluate, policy_act
from .rollout import RolloutPool, TaskResult
from .screening import ScenarioDataset, Screener
from .powerflow import solve_power_flow
from .uvls import UvlsSettings

__all__ = [
    "ComparisonRow",
    "ComparisonReport",
    "run_baseline",
    "compare",
    "classify_no_shed",
    "export_trace",
]


@dataclass(frozen=True)
class ComparisonRow:
    scenario_id: str
    reward_policy: float
    reward_baseline: float
    reward_diff: float
    mw_shed_policy: float
    mw_shed_baseline: float
    requires_shedding: bool


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ComparisonRow, ...]

    # -- aggregates (all recomputable from rows) ------------------------------

    @property
    def n_scenarios(self) -> int:
        return len(self.rows)

    @property
    def n_shedding_required(self) -> int:
        return sum(1 for r in self.rows if r.requires_shedding)

    @property
    def win_fraction(self) -> float:
        """Fraction of shedding-required scenarios with reward_diff > 0 (strict)."""
        req = [r for r in self.rows if r.requires_shedding]
        if not req:
            return float("nan")
        return sum(1 for r in req if r.reward_diff > 0) / len(req)

    @property
    def mean_shed_reduction(self) -> float:
        """Mean over shedding-required scenarios of (base − policy)/base MW;
        scenarios where the baseline shed nothing are excluded."""
        fr = [(r.mw_shed_baseline - r.mw_shed_policy) / r.mw_shed_baseline
              for r in self.rows if r.requires_shedding and r.mw_shed_baseline > 0]
        if not fr:
            return float("nan")
        return float(np.mean(fr))

    @property
    def no_shed_compliance(self) -> float:
        """Fraction of no-shed scenarios on which the policy shed nothing itself."""
        ns = [r for r in self.rows if not r.requires_shedding]
        if not ns:
            return float("nan")
        return sum(1 for r in ns if r.mw_shed_policy == 0.0) / len(ns)

    def aggregates(self) -> dict:
        return {
            "n_scenarios": self.n_scenarios,
            "n_shedding_required": self.n_shedding_required,
            "win_fraction": self.win_fraction,
            "mean_shed_reduction": self.mean_shed_reduction,
            "no_shed_compliance": self.no_shed_compliance,
        }

    # -- serialization --------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario_id", "reward_policy", "reward_baseline",
                        "reward_diff", "mw_shed_policy", "mw_shed_baseline",
                        "requires_shedding"])
            for r in self.rows:
                w.writerow([r.scenario_id, repr(r.reward_policy),
                            repr(r.reward_baseline), repr(r.reward_diff),
                            repr(r.mw_shed_policy), repr(r.mw_shed_baseline),
                            str(r.requires_shedding).lower()])

    def to_json(self, path, *, config_hash: str = "", provenance: str = "") -> None:
        payload = dict(self.aggregates())
        payload["config_hash"] = config_hash
        payload["provenance"] = provenance
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, allow_nan=True)
            fh.write("\n")


def run_baseline(scenarios: Sequence[Scenario],
                 cases: PowerFlowCase | Mapping[str, PowerFlowCase] | Sequence[PowerFlowCase],
                 *, spec: EnvSpec | None = None, params: SimParams | None = None,
                 relays: UvlsSettings | None = None, workers: int = 1,
                 pool: RolloutPool | None = None) -> list[TaskResult]:
    """UVLS-only runs: primary relay settings, zero policy actions.

    Results are ordered by scenario_id; per-scenario failures come back as
    failed TaskResults.  Pass ``pool`` to reuse an existing baseline pool.
    """
    own = pool is None
    if pool is None:
        pool = RolloutPool(cases, spec, relays=relays if relays is not None else UvlsSettings(),
                           params=params, workers=workers)
    try:
        zero = Policy.zeros(pool.spec.act_dim, pool.spec.obs_dim)
        return evaluate(zero, scenarios, pool)
    finally:
        if own:
            pool.close()


def compare(policy_results: Sequence[TaskResult],
            baseline_results: Sequence[TaskResult],
            labels: Mapping[str, bool] | ScenarioDataset) -> ComparisonReport:
    """Join result lists on scenario_id and reduce to a ComparisonReport.

    ``labels`` maps scenario_id to requires_shedding (a dataset works too).
    The two result lists must cover identical scenario sets.
    """
    pol = {r.scenario_id: r for r in policy_results}
    base = {r.scenario_id: r for r in baseline_results}
    if set(pol) != set(base):
        only_p = sorted(set(pol) - set(base))
        only_b = sorted(set(base) - set(pol))
        raise ValueError(
            f"result sets differ; only in policy results: {only_p}; "
            f"only in baseline results: {only_b}")
    if isinstance(labels, ScenarioDataset):
        labels = {s.scenario_id: lab
                  for s, lab in zip(labels.scenarios, labels.requires_shedding)}
    missing = sorted(set(pol) - set(labels))
    if missing:
        raise ValueError(f"labels missing for scenarios: {missing}")
    rows = []
    for sid in sorted(pol):
        p, b = pol[sid], base[sid]
        rows.append(ComparisonRow(sid, p.total_reward, b.total_reward,
                                  p.total_reward - b.total_reward,
                                  p.mw_shed_total, b.mw_shed_total,
                                  bool(labels[sid])))
    return ComparisonReport(tuple(rows))


def classify_no_shed(scenarios: Sequence[Scenario],
                     cases: PowerFlowCase | Mapping[str, PowerFlowCase] | Sequence[PowerFlowCase],
                     *, spec: EnvSpec | None = None, params: SimParams | None = None,
                     screener: Screener | None = None) -> dict[str, bool]:
    """True per scenario iff a no-control, no-UVLS rollout satisfies the
    envelope throughout and at the terminal instant (the complement of the
    dataset's requires_shedding label)."""
    scr = screener if screener is not None else Screener(cases, spec=spec, params=params)
    return {s.scenario_id: scr.stable(s.case_id, s.fault_bus, s.fault_duration)
            for s in sorted(scenarios, key=lambda s: s.scenario_id)}


def export_trace(scenario: Scenario,
                 cases: PowerFlowCase | Mapping[str, PowerFlowCase] | Sequence[PowerFlowCase],
                 policy: Policy | None, path, *,
                 spec: EnvSpec | None = None, params: SimParams | None = None,
                 relays: UvlsSettings | None = None) -> list[list[float]]:
    """Write one controller's episode trace CSV and return its rows.

    Rows cover the whole control grid from t = 0 to the episode end
    (episode_len/control_dt + 1 rows): quiet pre-fault samples, the faulted
    interval, and the controlled recovery, each row carrying the time, every
    monitored bus voltage, and the cumulative MW shed.  ``policy`` None means
    relays only; policy runs default to hybrid relay settings, relay-only
    runs to primary settings.
    """
    if isinstance(cases, PowerFlowCase):
        case_map = {cases.case_id: cases}
    elif isinstance(cases, Mapping):
        case_map = dict(cases)
    else:
        case_map = {c.case_id: c for c in cases}
    case = case_map[scenario.case_id]
    spec = spec if spec is not None else build_env_spec(case)
    params = params if params is not None else SimParams()
    if relays is None:
        relays = UvlsSettings(backup_offset_s=1.0) if policy is not None else UvlsSettings()

    sol = solve_power_flow(case)
    if not sol.converged:
        raise ValueError(f"case {case.case_id!r}: power flow did not converge")
    st = init_dynamics(case, sol, params)
    mon_pos = np.array([st.model.bus_pos[b] for b in spec.monitored_buses])
    ctl_idx = np.array([st.model.load_index_of_bus(b) for b in spec.controllable_buses])

    clear_t = spec.fault_start + scenario.fault_duration
    t_first = int(np.ceil(clear_t / spec.control_dt - 1e-9)) * spec.control_dt
    n_chunks = int(round(spec.episode_len / spec.control_dt))

    def row():
        return [float(st.t), *np.abs(st.v[mon_pos]).tolist(),
                float(st.total_mw_shed())]

    rows = [row()]
    for k in range(n_chunks):
        t0 = k * spec.control_dt
        t1 = t0 + spec.control_dt
        if policy is not None and t0 >= t_first - 1e-9 and not st.collapsed:
            obs = np.concatenate([np.abs(st.v[mon_pos]), st.remaining[ctl_idx]])
            raw = np.clip(policy_act(policy, obs), spec.act_low, spec.act_high)
            v_assoc = obs[list(spec.mask_assoc)]
            for frac, bus, va in zip(raw, spec.controllable_buses, v_assoc):
                if frac > 0.0 and va < spec.v_mask:
                    shed_load(st, int(bus), float(frac), source="policy")
        events = []
        if t0 <= spec.fault_start < t1 or spec.fault_start == t0:
            events.append(Event(spec.fault_start, "apply_fault", scenario.fault_bus))
        if t0 < clear_t <= t1:
            events.append(Event(clear_t, "clear_fault", scenario.fault_bus))
        simulate_interval(st, SIM_DT, spec.control_dt, events=events, relays=relays)
        rows.append(row())

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"v_{b}" for b in spec.monitored_buses] + ["mw_shed"])
        for r in rows:
            w.writerow([repr(x) for x in r])
    return rows
