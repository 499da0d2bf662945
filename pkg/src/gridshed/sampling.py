"""Hierarchical Latin-hypercube sampling of operating conditions.

Level 1 stratifies the total system load scale (one sample per stratum).
Level 2 commits machines in merit order until committed capacity covers the
sampled load times a margin.  Level 3 jitters the proportional dispatch of
committed machines, with each machine's jitter independently stratified across
the whole batch.  Every draw is materialized through ``scale_case`` and kept
only if the power flow converges and the dynamic initialization is feasible;
a stratum that keeps failing is reported unfillable rather than silently
dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dynamics import init_dynamics
from .network import PowerFlowCase
from .powerflow import scale_case, solve_power_flow

__all__ = ["SamplingConfig", "CaseDraw", "SamplingReport", "hierarchical_lhs"]


@dataclass(frozen=True)
class SamplingConfig:
    n_cases: int
    load_range: tuple[float, float] = (0.55, 1.15)
    capacity_margin: float = 1.15
    merit_order: tuple[str, ...] | None = None  # default: machines in case order
    dispatch_jitter: float = 0.10
    max_retries: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        lo, hi = self.load_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"bad load_range {self.load_range}")
        if not 0.0 <= self.dispatch_jitter < 1.0:
            raise ValueError("dispatch_jitter must be in [0, 1)")


@dataclass(frozen=True)
class CaseDraw:
    """Diagnostics for one materialized case (the raw hierarchy draws)."""

    case_id: str
    stratum: int
    load_scale: float
    committed: tuple[str, ...]
    dispatch: Mapping[str, float]  # fraction of p_max per committed machine
    jitter: Mapping[str, float]
    retries: int


@dataclass
class SamplingReport:
    config: SamplingConfig
    cases: list[PowerFlowCase] = field(default_factory=list)
    draws: list[CaseDraw] = field(default_factory=list)
    unfillable: list[int] = field(default_factory=list)


def _lhs_strata(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Permuted stratum indices plus a uniform position inside each stratum."""
    return rng.permutation(n), rng.uniform(size=n)


def _commit(case: PowerFlowCase, order: tuple[str, ...], target_p: float,
            margin: float) -> tuple[str, ...]:
    by_id = {m.id: m for m in case.machines}
    slack_bus = next(b.id for b in case.buses if b.kind == "slack")
    committed: list[str] = [m.id for m in case.machines if m.bus == slack_bus]
    cap = sum(by_id[mid].p_max for mid in committed)
    for mid in order:
        if mid in committed:
            continue
        if cap >= margin * target_p:
            break
        committed.append(mid)
        cap += by_id[mid].p_max
    if cap < margin * target_p:
        # merit list exhausted; keep everything rather than under-commit
        for mid in order:
            if mid not in committed:
                committed.append(mid)
    return tuple(sorted(committed, key=lambda mid: order.index(mid) if mid in order else -1))


def hierarchical_lhs(case: PowerFlowCase, config: SamplingConfig) -> SamplingReport:
    """Draw ``config.n_cases`` operating-condition cases from ``case``.

    Deterministic for a fixed seed: rerunning produces bit-identical cases.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_cases
    lo, hi = config.load_range
    width = (hi - lo) / n
    order = (config.merit_order if config.merit_order is not None
             else tuple(m.id for m in case.machines))
    unknown = [mid for mid in order if mid not in {m.id for m in case.machines}]
    if unknown:
        raise ValueError(f"merit_order names unknown machines: {unknown}")

    strata, u_load = _lhs_strata(rng, n)
    # one stratified jitter lane per machine, drawn up front for the whole batch
    jit_lanes = {m.id: _lhs_strata(rng, n) for m in case.machines}
    total_p = case.total_load_p()

    report = SamplingReport(config=config)
    for k in range(n):
        stratum = int(strata[k])
        u = float(u_load[k])
        retries = 0
        made = None
        while made is None and retries <= config.max_retries:
            scale = lo + (stratum + u) * width
            target = scale * total_p
            committed = _commit(case, order, target, config.capacity_margin)
            jitter = {}
            for mid in committed:
                perm, us = jit_lanes[mid]
                cell = (int(perm[k]) + float(us[k])) / n  # in [0, 1)
                if retries:
                    cell = (int(perm[k]) + rng.uniform()) / n  # redraw inside stratum
                jitter[mid] = config.dispatch_jitter * (2.0 * cell - 1.0)
            cap = sum(m.p_max for m in case.machines if m.id in committed)
            base_frac = target / cap
            dispatch = {mid: float(np.clip(base_frac * (1.0 + jitter[mid]), 0.02, 0.95))
                        for mid in committed}
            candidate = scale_case(
                case, scale, commitment={m.id: (m.id in committed) for m in case.machines},
                dispatch=dispatch, case_id=f"{case.case_id}-s{k:03d}")
            sol = solve_power_flow(candidate)
            ok = sol.converged
            if ok:
                try:
                    init_dynamics(candidate, sol)
                except ValueError:
                    ok = False
            if ok:
                made = (candidate, CaseDraw(candidate.case_id, stratum, scale,
                                            committed, dispatch, jitter, retries))
            else:
                retries += 1
                u = rng.uniform()  # redraw inside the same stratum
        if made is None:
            report.unfillable.append(stratum)
        else:
            report.cases.append(made[0])
            report.draws.append(made[1])
    return report
