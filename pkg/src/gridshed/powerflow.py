"""Newton-Raphson AC power flow (polar form) and operating-point scaling.

The solver works on the dense admittance matrix from :func:`gridshed.network.build_ybus`.
Buses are handled in case order; the slack bus keeps its setpoint voltage at
angle zero.  PV buses whose aggregate machine reactive range is exceeded are
switched to PQ at the binding limit starting from a configurable iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .network import CaseError, PowerFlowCase, build_ybus

__all__ = [
    "PowerFlowSolution",
    "PowerFlowError",
    "solve_power_flow",
    "bus_injections",
    "power_mismatch",
    "scale_case",
]


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PowerFlowSolution:
    """Converged (or best-effort) operating point.

    ``v_mag``/``v_ang`` are per-unit magnitude and radian angle arrays in case
    bus order.  ``gen_p``/``gen_q`` give the per-machine allocation in pu on the
    system base; the slack machine absorbs the network imbalance.
    """

    converged: bool
    n_iter: int
    max_mismatch: float
    bus_ids: tuple[int, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    gen_p: dict[str, float]
    gen_q: dict[str, float]

    def v_complex(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def v_at(self, bus_id: int) -> complex:
        i = self.bus_ids.index(bus_id)
        return complex(self.v_mag[i] * np.exp(1j * self.v_ang[i]))

    def angle_deg(self, bus_id: int) -> float:
        i = self.bus_ids.index(bus_id)
        return math.degrees(self.v_ang[i])


def bus_injections(case: PowerFlowCase) -> np.ndarray:
    """Specified complex power injection per bus (generation minus load), pu.

    The slack bus entry carries whatever the schedule says; the solver never
    uses its P (and never uses Q at PV buses).
    """
    idx = case.bus_index()
    s = np.zeros(len(case.buses), dtype=complex)
    for m in case.machines:
        if m.status:
            s[idx[m.bus]] += m.p_set
    for l in case.loads:
        s[idx[l.bus]] -= complex(l.p0, l.q0)
    return s


def power_mismatch(
    case: PowerFlowCase,
    v_mag: np.ndarray,
    v_ang: np.ndarray,
    sbus: np.ndarray | None = None,
) -> np.ndarray:
    """Complex mismatch S(V) - S_spec at every bus for a candidate voltage profile."""
    y = build_ybus(case)
    v = v_mag * np.exp(1j * v_ang)
    if sbus is None:
        sbus = bus_injections(case)
    return v * np.conj(y @ v) - sbus


def _machine_allocation(
    case: PowerFlowCase,
    kinds0: Sequence[str],
    v: np.ndarray,
    y: np.ndarray,
) -> tuple[dict[str, float], dict[str, float]]:
    """Split bus-level generator P/Q among the machines at each bus.

    P: every in-service machine keeps its dispatch except at the slack bus,
    where the imbalance is distributed proportionally to p_max.
    Q: the bus requirement is split proportionally to each machine's reactive
    range (equal split when all ranges are zero).
    """
    idx = case.bus_index()
    s_inj = v * np.conj(y @ v)
    load_p = np.zeros(len(case.buses))
    load_q = np.zeros(len(case.buses))
    for l in case.loads:
        load_p[idx[l.bus]] += l.p0
        load_q[idx[l.bus]] += l.q0

    gen_p: dict[str, float] = {}
    gen_q: dict[str, float] = {}
    for b_pos, bus in enumerate(case.buses):
        machines = [m for m in case.machines if m.bus == bus.id and m.status]
        if not machines:
            continue
        p_bus = s_inj[b_pos].real + load_p[b_pos]
        q_bus = s_inj[b_pos].imag + load_q[b_pos]
        if kinds0[b_pos] == "slack":
            cap = np.array([m.p_max for m in machines])
            wp = cap / cap.sum() if cap.sum() > 0 else np.full(len(machines), 1.0 / len(machines))
            for m, w in zip(machines, wp):
                gen_p[m.id] = float(p_bus * w)
        else:
            for m in machines:
                gen_p[m.id] = m.p_set
        rng = np.array([m.q_max - m.q_min for m in machines])
        if rng.sum() > 0:
            wq = rng / rng.sum()
            base = np.array([m.q_min for m in machines])
            extra = q_bus - base.sum()
            for m, w, b0 in zip(machines, wq, base):
                gen_q[m.id] = float(b0 + extra * w)
        else:
            for m in machines:
                gen_q[m.id] = float(q_bus / len(machines))
    for m in case.machines:
        if not m.status:
            gen_p[m.id] = 0.0
            gen_q[m.id] = 0.0
    return gen_p, gen_q


def solve_power_flow(
    case: PowerFlowCase,
    tol: float = 1e-8,
    max_iter: int = 20,
    qlim_start_iter: int = 3,
    enforce_q_limits: bool = True,
) -> PowerFlowSolution:
    """Full-Jacobian Newton-Raphson from a flat start.

    Convergence is the infinity norm of the active/reactive mismatch vector.
    From iteration ``qlim_start_iter`` onward, PV buses violating their
    aggregate machine Q range are converted to PQ at the binding limit.
    """
    n = len(case.buses)
    idx = case.bus_index()
    y = build_ybus(case)
    sbus = bus_injections(case)

    kinds0 = [b.kind for b in case.buses]
    kinds = list(kinds0)
    q_lo = np.full(n, -np.inf)
    q_hi = np.full(n, np.inf)
    for b_pos, bus in enumerate(case.buses):
        if bus.kind == "pv":
            ms = [m for m in case.machines if m.bus == bus.id and m.status]
            q_lo[b_pos] = sum(m.q_min for m in ms)
            q_hi[b_pos] = sum(m.q_max for m in ms)
    load_q = np.zeros(n)
    for l in case.loads:
        load_q[idx[l.bus]] += l.q0

    # flat start: setpoint magnitude at slack/pv, 1.0 at pq, all angles zero
    vm = np.array([b.v_set if b.kind in ("slack", "pv") else 1.0 for b in case.buses])
    va = np.zeros(n)

    def bus_sets() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pv = np.array([i for i, k in enumerate(kinds) if k == "pv"], dtype=int)
        pq = np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int)
        pvpq = np.concatenate([pv, pq])
        return pv, pq, pvpq

    def mismatch_vec() -> tuple[np.ndarray, np.ndarray]:
        v = vm * np.exp(1j * va)
        mis = v * np.conj(y @ v) - sbus
        _, pq, pvpq = bus_sets()
        f = np.concatenate([mis[pvpq].real, mis[pq].imag])
        return f, v

    def apply_q_limits() -> bool:
        """Convert violating PV buses to PQ at the binding limit.  True if any flipped."""
        v = vm * np.exp(1j * va)
        s_inj = v * np.conj(y @ v)
        flipped = False
        for b_pos in range(n):
            if kinds[b_pos] != "pv":
                continue
            q_gen = s_inj[b_pos].imag + load_q[b_pos]
            if q_gen > q_hi[b_pos] + tol:
                sbus[b_pos] = complex(sbus[b_pos].real, q_hi[b_pos] - load_q[b_pos])
                kinds[b_pos] = "pq"
                flipped = True
            elif q_gen < q_lo[b_pos] - tol:
                sbus[b_pos] = complex(sbus[b_pos].real, q_lo[b_pos] - load_q[b_pos])
                kinds[b_pos] = "pq"
                flipped = True
        return flipped

    f, v = mismatch_vec()
    n_iter = 0
    while n_iter < max_iter:
        if f.size == 0 or np.max(np.abs(f)) <= tol:
            # converged for the current bus typing; re-check reactive limits once
            if not (enforce_q_limits and apply_q_limits()):
                break
            f, v = mismatch_vec()
            if f.size == 0 or np.max(np.abs(f)) <= tol:
                break
            continue
        n_iter += 1
        pv, pq, pvpq = bus_sets()

        ibus = y @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vnorm = np.diag(v / np.abs(v))
        ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
        ds_dvm = diag_v @ np.conj(y @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm

        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])

        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {n_iter}") from exc

        npvpq = pvpq.size
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]

        if enforce_q_limits and n_iter >= qlim_start_iter:
            apply_q_limits()
        f, v = mismatch_vec()

    fv, vfin = mismatch_vec()
    max_mis = float(np.max(np.abs(fv))) if fv.size else 0.0
    gen_p, gen_q = _machine_allocation(case, kinds0, vfin, y)
    return PowerFlowSolution(
        converged=max_mis <= tol,
        n_iter=n_iter,
        max_mismatch=max_mis,
        bus_ids=tuple(b.id for b in case.buses),
        v_mag=vm.copy(),
        v_ang=va.copy(),
        gen_p=gen_p,
        gen_q=gen_q,
    )


# ---------------------------------------------------------------------------
# Case scaling
# ---------------------------------------------------------------------------

def scale_case(
    case: PowerFlowCase,
    load_scale: float | Mapping[int | None, float] = 1.0,
    commitment: Mapping[str, bool] | None = None,
    dispatch: Mapping[str, float] | None = None,
    case_id: str | None = None,
) -> PowerFlowCase:
    """Derive a new operating point from a base case.

    ``load_scale`` is either a single factor or a mapping zone_id -> factor
    (key ``None`` covers loads at unzoned buses); factors must lie in
    [0.4, 1.2].  ``commitment`` switches machines in or out by id; a PV bus
    left with no in-service machine becomes PQ.  ``dispatch`` maps machine_id
    to a loading fraction of ``p_max``; machines not listed (or when dispatch
    is None) keep their existing ``p_set``.  Identity arguments return an
    equal case.  Raises :class:`CaseError` when committed capacity cannot
    cover the scaled load.
    """
    if isinstance(load_scale, Mapping):
        scale_map = dict(load_scale)
    else:
        scale_map = {None: float(load_scale)}
        for z in case.zones:
            scale_map[z.zone_id] = float(load_scale)
    for key, s in scale_map.items():
        if not (0.4 <= s <= 1.2):
            raise CaseError(f"load scale {s} for zone {key} outside [0.4, 1.2]")

    def factor_for(bus_id: int) -> float:
        z = case.zone_of(bus_id)
        if z in scale_map:
            return scale_map[z]
        if None in scale_map:
            return scale_map[None]
        raise CaseError(f"no load scale given for zone {z} (bus {bus_id})")

    loads = tuple(
        replace(l, p0=l.p0 * factor_for(l.bus), q0=l.q0 * factor_for(l.bus))
        for l in case.loads
    )

    commitment = dict(commitment or {})
    machines = []
    for m in case.machines:
        status = m.status
        if m.id in commitment:
            status = 1 if commitment[m.id] else 0
        p_set = m.p_set
        if dispatch is not None and m.id in dispatch and status:
            frac = float(dispatch[m.id])
            if not (0.0 <= frac <= 1.0):
                raise CaseError(f"dispatch fraction {frac} for machine {m.id} outside [0, 1]")
            p_set = frac * m.p_max
            if p_set < m.p_min - 1e-12 or p_set > m.p_max + 1e-12:
                raise CaseError(
                    f"dispatch for machine {m.id} gives p_set {p_set:.4f} outside "
                    f"[{m.p_min}, {m.p_max}]"
                )
        machines.append(replace(m, status=status, p_set=p_set))
    machines = tuple(machines)

    # bus kind adjustments: pv bus with no in-service machine becomes pq
    buses = []
    for b in case.buses:
        kind = b.kind
        if b.kind == "pv" and not any(m.bus == b.id and m.status for m in machines):
            kind = "pq"
        if b.kind == "slack" and not any(m.bus == b.id and m.status for m in machines):
            raise CaseError(f"slack bus {b.id} must keep an in-service machine")
        buses.append(replace(b, kind=kind))
    buses = tuple(buses)

    if not any(m.status for m in machines):
        raise CaseError("no committed machine remains in the synchronous area")

    total_load = sum(l.p0 for l in loads)
    committed_cap = sum(m.p_max for m in machines if m.status)
    if committed_cap < total_load:
        raise CaseError(
            f"committed capacity {committed_cap:.3f} pu below scaled load {total_load:.3f} pu"
        )

    return PowerFlowCase(
        case_id=case.case_id if case_id is None else case_id,
        base_mva=case.base_mva,
        buses=buses,
        branches=case.branches,
        machines=machines,
        loads=loads,
        zones=case.zones,
    )
