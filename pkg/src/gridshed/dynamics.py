"""Transient-stability time-domain simulation.

Differential states are integrated with the trapezoidal rule, solved
simultaneously with the algebraic network equations by fixed-point iteration
at every step:

* synchronous machines: two-axis model (rotor angle, speed deviation, E'q,
  E'd) plus a first-order fast exciter with non-windup field limits, coupled
  to the network through a Norton current injection whose symmetric part is
  folded into the admittance matrix (saliency stays on the right-hand side);
* induction motors: one slip ODE per motor, ``2 Hm ds/dt = Tm(s) - Te(V, s)``
  with the electrical torque from the steady-state equivalent circuit, so the
  motor enters the network solve as an exact slip-dependent admittance;
* static loads: ZIP with the constant-power part rolled off smoothly
  (C1 quadratic blend) below ``pload_blend_v`` so the network equations stay
  solvable through faults;
* events: timestamped fault application/clearing and load shedding, applied
  at step boundaries and appended to an event log that is sufficient to
  replay the run bit-identically.

A failed network solve marks the state collapsed: integration stops and all
subsequently sampled voltages read zero rather than raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from . import _kernel
from .network import PowerFlowCase, build_ybus
from .powerflow import PowerFlowSolution
from .uvls import UvlsSettings, uvls_scan

SIM_DT = 1.0 / 240.0
"""Canonical integration step: 4 steps per 60 Hz cycle, 24 per 0.1 s control step."""

__all__ = [
    "SIM_DT",
    "OMEGA_S",
    "SimParams",
    "Event",
    "SimModel",
    "DynState",
    "init_dynamics",
    "simulate_interval",
    "shed_load",
    "apply_fault",
    "clear_fault",
    "motor_admittance",
    "motor_torque",
    "replay_events",
]

OMEGA_S = 2.0 * math.pi * 60.0  # electrical base speed, rad/s


@dataclass(frozen=True)
class SimParams:
    """Numerical knobs for the simulator (electrical parameters live on the case)."""

    fault_g: float = 1.0e4  # near-bolted fault shunt: y = fault_g + j*fault_b
    fault_b: float = -1.0e4
    pload_blend_v: float = 0.6  # constant-P rolloff corner voltage, pu
    alg_tol: float = 1.0e-9  # fixed-point tolerance on |dV| and state change
    alg_max_iter: int = 30
    s_min: float = 1.0e-6  # slip floor


@dataclass(frozen=True)
class Event:
    """Timestamped simulation event: kind in {"apply_fault", "clear_fault", "shed"}."""

    t: float
    kind: str
    bus: int
    fraction: float = 0.0  # shed events: fraction of episode-initial load
    source: str = ""  # shed events: "policy" | "uvls" | free-form
    mw: float = 0.0  # shed events: MW actually removed (filled when applied)


# ---------------------------------------------------------------------------
# Motor equivalent circuit
# ---------------------------------------------------------------------------

def motor_admittance(rs: float, xs: float, xm: float, rr: float, xr: float, s: float) -> complex:
    """Input admittance of the equivalent circuit at slip ``s`` (own base)."""
    zr = complex(rr / s, xr)
    zm = 1j * xm
    z = complex(rs, xs) + (zm * zr) / (zm + zr)
    return 1.0 / z


def motor_torque(rs: float, xs: float, xm: float, rr: float, xr: float,
                 s: float, v: float) -> float:
    """Air-gap electrical torque at slip ``s`` and terminal voltage ``v`` (own base)."""
    zr = complex(rr / s, xr)
    zm = 1j * xm
    z_in = complex(rs, xs) + (zm * zr) / (zm + zr)
    i_s = v / z_in
    i_r = i_s * zm / (zm + zr)
    return float(abs(i_r) ** 2 * rr / s)


def _solve_initial_slip(rs, xs, xm, rr, xr, v0: float, s_hint: float = 0.02) -> float:
    """Slip at which the motor draws exactly 1.0 pu electrical power (own base).

    Root of f(s) = v0^2 * Re(y(s)) - 1 on (0, s at peak input power); raises
    ValueError when the motor cannot absorb 1 pu at this voltage.
    """

    def f(s: float) -> float:
        return v0 * v0 * motor_admittance(rs, xs, xm, rr, xr, s).real - 1.0

    lo = 1e-5
    if f(lo) >= 0.0:
        raise ValueError("motor draws >= 1 pu at near-zero slip; check parameters")
    # walk up in slip until the power crosses 1 pu; stop past the input-power peak
    s_prev, f_prev = lo, f(lo)
    s_cur = max(s_hint, 2 * lo)
    while s_cur <= 1.0:
        f_cur = f(s_cur)
        if f_cur >= 0.0:
            return float(brentq(f, s_prev, s_cur, xtol=1e-14, rtol=8.9e-16))
        if f_cur < f_prev:  # past the peak and still below 1 pu: infeasible
            break
        s_prev, f_prev = s_cur, f_cur
        s_cur *= 1.5
    raise ValueError(f"motor cannot absorb 1 pu at voltage {v0:.3f}; peak input too low")


# ---------------------------------------------------------------------------
# Model (per case + operating point) and state
# ---------------------------------------------------------------------------

class SimModel:
    """Immutable per-case precomputation shared by every state copy.

    Holds the base admittance matrix, machine/load/motor parameter arrays and
    the power-flow-consistent constants (initial static ZIP powers referenced
    to the solved voltage, motor MVA scales, mechanical torque setpoints).
    """

    def __init__(self, case: PowerFlowCase, sol: PowerFlowSolution, params: SimParams):
        self.case = case
        self.params = params
        self.n = len(case.buses)
        self.bus_ids = tuple(b.id for b in case.buses)
        self.bus_pos = {bid: i for i, bid in enumerate(self.bus_ids)}
        self.y_base = build_ybus(case)

        v0 = sol.v_complex()
        self.v0 = v0.copy()

        # --- synchronous machines (in service only) ---
        machs = [m for m in case.machines if m.status]
        self.machines = machs
        nm = len(machs)
        self.nm = nm
        self.mbus = np.array([self.bus_pos[m.bus] for m in machs], dtype=np.int64)
        self.xd = np.array([m.xd for m in machs])
        self.xq = np.array([m.xq for m in machs])
        self.xdp = np.array([m.xd_p for m in machs])
        self.xqp = np.array([m.xq_p for m in machs])
        self.td0p = np.array([m.td0_p for m in machs])
        self.tq0p = np.array([m.tq0_p for m in machs])
        self.two_h = np.array([2.0 * m.h for m in machs])
        self.damp = np.array([m.d for m in machs])
        self.ka = np.array([m.exciter.ka for m in machs])
        self.ta = np.array([m.exciter.ta for m in machs])
        self.efd_min = np.array([m.exciter.efd_min for m in machs])
        self.efd_max = np.array([m.exciter.efd_max for m in machs])
        # Norton fold: symmetric part of the dq admittance goes on the diagonal
        self.y_mach_fold = -0.5j * (1.0 / self.xdp + 1.0 / self.xqp)
        self.b_sal = 0.5 * (1.0 / self.xdp - 1.0 / self.xqp)

        # --- loads ---
        loads = case.loads
        self.loads = loads
        nl = len(loads)
        self.nl = nl
        self.lbus = np.array([self.bus_pos[l.bus] for l in loads], dtype=np.int64)
        self.load_mw0 = np.array([l.initial_mw(case.base_mva) for l in loads])
        v0l = np.abs(v0[self.lbus]) if nl else np.zeros(0)
        self.v0_load = v0l

        p0 = np.array([l.p0 for l in loads])
        q0 = np.array([l.q0 for l in loads])
        mfrac = np.array([l.motor_fraction for l in loads])

        # --- induction motors: solve own-base slip so P_in = 1 pu at V0 ---
        mot_idx = [i for i, l in enumerate(loads) if l.motor_fraction > 0.0]
        self.mot_load_idx = np.array(mot_idx, dtype=np.int64)
        self.nmot = len(mot_idx)
        self.mot_bus = (self.lbus[self.mot_load_idx] if self.nmot
                        else np.zeros(0, dtype=np.int64))
        mp = [loads[i].motor for i in mot_idx]
        self.mot_rs = np.array([m.rs for m in mp])
        self.mot_xs = np.array([m.xs for m in mp])
        self.mot_xm = np.array([m.xm for m in mp])
        self.mot_rr = np.array([m.rr for m in mp])
        self.mot_xr = np.array([m.xr for m in mp])
        self.mot_2hm = np.array([2.0 * m.h_m for m in mp])
        self.mot_alpha = np.array([m.torque_exponent for m in mp])

        slip0 = np.zeros(self.nmot)
        q_mot_sys = np.zeros(nl)
        self.mot_k = np.zeros(self.nmot)  # own-base -> system-base power scale
        self.mot_tm0 = np.zeros(self.nmot)
        for j, li in enumerate(mot_idx):
            l = loads[li]
            vj = float(np.abs(v0[self.lbus[li]]))
            try:
                s0 = _solve_initial_slip(l.motor.rs, l.motor.xs, l.motor.xm,
                                         l.motor.rr, l.motor.xr, vj)
            except ValueError as exc:
                raise ValueError(f"motor at bus {l.bus}: {exc}") from exc
            slip0[j] = s0
            y0 = motor_admittance(l.motor.rs, l.motor.xs, l.motor.xm,
                                  l.motor.rr, l.motor.xr, s0)
            k = l.motor_fraction * l.p0  # P_in is exactly 1 pu own base at V0
            self.mot_k[j] = k
            q_mot_sys[li] = -vj * vj * y0.imag * k
            te0 = motor_torque(l.motor.rs, l.motor.xs, l.motor.xm,
                               l.motor.rr, l.motor.xr, s0, vj)
            self.mot_tm0[j] = te0 / (1.0 - s0) ** l.motor.torque_exponent
        self.slip0 = slip0

        # --- static ZIP remainder (motor share removed; Q may go negative) ---
        p_stat = p0 * (1.0 - mfrac)
        q_stat = q0 - q_mot_sys
        zz = np.array([l.zip_z for l in loads])
        zi = np.array([l.zip_i for l in loads])
        zp = np.array([l.zip_p for l in loads])
        s_z = (p_stat + 1j * q_stat) * zz
        s_i = (p_stat + 1j * q_stat) * zi
        s_p = (p_stat + 1j * q_stat) * zp
        with np.errstate(divide="ignore", invalid="ignore"):
            self.y_zip = np.where(v0l > 0, np.conj(s_z) / np.maximum(v0l, 1e-12) ** 2, 0.0)
            self.i_zip = np.where(v0l > 0, np.conj(s_i) / np.maximum(v0l, 1e-12), 0.0)
        self.y_zip = self.y_zip.astype(np.complex128)
        self.i_zip = self.i_zip.astype(np.complex128)
        self.s_p = s_p.astype(np.complex128)

        # --- UVLS relay placement: every zoned load bus is protected ---
        zoned = [i for i, l in enumerate(loads) if case.zone_of(l.bus) is not None]
        self.relay_load_idx = np.array(zoned, dtype=np.int64)
        self.relay_bus = (self.lbus[self.relay_load_idx] if zoned
                          else np.zeros(0, dtype=np.int64))

        # machine initial conditions from the power flow
        self.delta0 = np.zeros(nm)
        self.eqp0 = np.zeros(nm)
        self.edp0 = np.zeros(nm)
        self.efd0 = np.zeros(nm)
        self.pm = np.zeros(nm)
        self.vref = np.zeros(nm)
        for i, m in enumerate(machs):
            vt = v0[self.mbus[i]]
            s_gen = complex(sol.gen_p[m.id], sol.gen_q[m.id])
            i_gen = np.conj(s_gen / vt)
            e_xq = vt + 1j * m.xq * i_gen
            delta = np.angle(e_xq)
            u = vt * np.exp(-1j * delta)
            w = i_gen * np.exp(-1j * delta)
            vd, vq = -u.imag, u.real
            idq, iq = -w.imag, w.real
            eqp = vq + m.xd_p * idq
            edp = vd - m.xq_p * iq
            efd = eqp + (m.xd - m.xd_p) * idq
            if not (m.exciter.efd_min <= efd <= m.exciter.efd_max):
                raise ValueError(
                    f"machine {m.id}: initial field voltage {efd:.3f} outside exciter limits"
                )
            pe = edp * idq + eqp * iq + (m.xq_p - m.xd_p) * idq * iq
            self.delta0[i] = delta
            self.eqp0[i] = eqp
            self.edp0[i] = edp
            self.efd0[i] = efd
            self.pm[i] = pe
            self.vref[i] = abs(vt) + efd / m.exciter.ka

    # -- helpers -------------------------------------------------------------

    def kernel_static(self) -> tuple:
        """Constant argument block for :func:`gridshed._kernel.run_chunk`."""
        return (
            self.mbus, self.xd, self.xq, self.xdp, self.xqp, self.td0p, self.tq0p,
            self.two_h, self.damp, self.ka, self.ta, self.efd_min, self.efd_max,
            self.y_mach_fold, self.b_sal, self.pm, self.vref,
            self.lbus, self.y_zip, self.i_zip, self.s_p, self.params.pload_blend_v,
            self.mot_bus, self.mot_load_idx, self.mot_rs, self.mot_xs, self.mot_xm,
            self.mot_rr, self.mot_xr, self.mot_2hm, self.mot_alpha, self.mot_tm0,
            self.mot_k,
        )

    def load_index_of_bus(self, bus_id: int) -> int:
        pos = self.bus_pos[bus_id]
        hits = np.nonzero(self.lbus == pos)[0]
        if hits.size == 0:
            raise KeyError(f"no load at bus {bus_id}")
        return int(hits[0])


@dataclass
class DynState:
    """Mutable simulation state.  ``t`` is always ``n_steps`` integrations past ``t0``."""

    model: SimModel
    t: float
    v: np.ndarray  # complex bus voltages
    delta: np.ndarray
    omega: np.ndarray  # speed deviation, pu
    eqp: np.ndarray
    edp: np.ndarray
    efd: np.ndarray
    slip: np.ndarray
    remaining: np.ndarray  # per-load remaining fraction of episode-initial MW
    uvls_timer: np.ndarray
    uvls_firings: np.ndarray
    active_faults: dict[int, complex] = field(default_factory=dict)  # bus id -> admittance
    collapsed: bool = False
    mw_shed_policy: float = 0.0
    mw_shed_uvls: float = 0.0
    event_log: list[Event] = field(default_factory=list)

    def copy(self) -> "DynState":
        return DynState(
            model=self.model,
            t=self.t,
            v=self.v.copy(),
            delta=self.delta.copy(),
            omega=self.omega.copy(),
            eqp=self.eqp.copy(),
            edp=self.edp.copy(),
            efd=self.efd.copy(),
            slip=self.slip.copy(),
            remaining=self.remaining.copy(),
            uvls_timer=self.uvls_timer.copy(),
            uvls_firings=self.uvls_firings.copy(),
            active_faults=dict(self.active_faults),
            collapsed=self.collapsed,
            mw_shed_policy=self.mw_shed_policy,
            mw_shed_uvls=self.mw_shed_uvls,
            event_log=list(self.event_log),
        )

    def v_mag(self) -> np.ndarray:
        return np.abs(self.v)

    def v_at(self, bus_id: int) -> float:
        return float(abs(self.v[self.model.bus_pos[bus_id]]))

    def remaining_at(self, bus_id: int) -> float:
        return float(self.remaining[self.model.load_index_of_bus(bus_id)])

    def total_mw_shed(self) -> float:
        return self.mw_shed_policy + self.mw_shed_uvls


def init_dynamics(case: PowerFlowCase, sol: PowerFlowSolution,
                  params: SimParams | None = None) -> DynState:
    """Build the dynamic model at a converged power-flow point; state is in equilibrium."""
    if not sol.converged:
        raise ValueError("cannot initialize dynamics from a non-converged power flow")
    model = SimModel(case, sol, params or SimParams())
    return DynState(
        model=model,
        t=0.0,
        v=model.v0.copy(),
        delta=model.delta0.copy(),
        omega=np.zeros(model.nm),
        eqp=model.eqp0.copy(),
        edp=model.edp0.copy(),
        efd=model.efd0.copy(),
        slip=model.slip0.copy(),
        remaining=np.ones(model.nl),
        uvls_timer=np.zeros(model.relay_load_idx.size),
        uvls_firings=np.zeros(model.relay_load_idx.size, dtype=int),
    )


# ---------------------------------------------------------------------------
# Operations (all are logged)
# ---------------------------------------------------------------------------

def shed_load(state: DynState, bus: int, fraction: float, source: str = "policy") -> float:
    """Remove ``fraction`` of the episode-initial load at ``bus``; returns MW removed.

    The request is clamped so the remaining fraction never goes negative.
    """
    model = state.model
    li = model.load_index_of_bus(bus)
    applied = min(float(fraction), float(state.remaining[li]))
    applied = max(applied, 0.0)
    state.remaining[li] -= applied
    mw = applied * model.load_mw0[li]
    if source == "uvls":
        state.mw_shed_uvls += mw
    else:
        state.mw_shed_policy += mw
    state.event_log.append(Event(state.t, "shed", bus, fraction=applied, source=source, mw=mw))
    return mw


def apply_fault(state: DynState, bus: int, y_fault: complex | None = None) -> None:
    model = state.model
    if bus not in model.bus_pos:
        raise KeyError(f"unknown fault bus {bus}")
    if y_fault is None:
        y_fault = complex(model.params.fault_g, model.params.fault_b)
    state.active_faults[bus] = y_fault
    state.event_log.append(Event(state.t, "apply_fault", bus))


def clear_fault(state: DynState, bus: int) -> None:
    state.active_faults.pop(bus, None)
    state.event_log.append(Event(state.t, "clear_fault", bus))


# ---------------------------------------------------------------------------
# Network interface
# ---------------------------------------------------------------------------

def _pload_blend(vmag: np.ndarray, v_corner: float) -> np.ndarray:
    """C1 rolloff for the constant-power part: smoothstep u^2(3-2u) below the corner.

    Near zero voltage the drawn power goes as v^2 (impedance-like), which keeps
    the per-step network fixed point contractive through bolted faults.
    """
    u = np.minimum(vmag / v_corner, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _iload_blend(vmag: np.ndarray, v_corner: float) -> np.ndarray:
    """C1 rolloff for the constant-current magnitude: u(2-u) below the corner."""
    u = np.minimum(vmag / v_corner, 1.0)
    return u * (2.0 - u)


def _event_ybus(model: SimModel, active_faults: dict[int, complex]) -> np.ndarray:
    """Base admittance matrix with active fault shunts added."""
    y = model.y_base.copy()
    for bus, yf in active_faults.items():
        p = model.bus_pos[bus]
        y[p, p] += yf
    return y


def _assemble_and_solve(model: SimModel, y_event: np.ndarray, v_prev: np.ndarray,
                        delta: np.ndarray, eqp: np.ndarray, edp: np.ndarray,
                        slip: np.ndarray, remaining: np.ndarray) -> np.ndarray:
    """One linear network solve with nonlinear injections evaluated at ``v_prev``."""
    y = y_event.copy()
    rhs = np.zeros(model.n, dtype=complex)

    if model.nm:
        # machines: symmetric dq admittance folded on the diagonal; the internal
        # source and the saliency correction ride on the right-hand side
        ejd = np.exp(1j * delta)
        k_src = edp / model.xqp + 1j * eqp / model.xdp
        np.add.at(y, (model.mbus, model.mbus), model.y_mach_fold)
        np.add.at(rhs, model.mbus,
                  1j * model.b_sal * ejd * ejd * np.conj(v_prev[model.mbus]) - k_src * ejd)

    if model.nl:
        vload = v_prev[model.lbus]
        vmag = np.abs(vload)
        safe_v = np.where(vmag > 1e-9, vload, 1.0)
        safe_m = np.maximum(vmag, 1e-9)
        # constant-impedance part: exact admittance on the diagonal
        np.add.at(y, (model.lbus, model.lbus), model.y_zip * remaining)
        # constant-current part: fixed magnitude at fixed power factor, rolled
        # off below the corner voltage
        i_cur = (model.i_zip * remaining
                 * _iload_blend(vmag, model.params.pload_blend_v) * (vload / safe_m))
        # constant-power part with the low-voltage rolloff
        blend = _pload_blend(vmag, model.params.pload_blend_v)
        i_pow = np.conj(model.s_p) * remaining * blend / np.conj(safe_v)
        cur = np.where(vmag > 1e-9, i_cur + i_pow, 0.0)
        np.add.at(rhs, model.lbus, -cur)

    if model.nmot:
        y_mot = np.empty(model.nmot, dtype=complex)
        for j in range(model.nmot):
            y_mot[j] = motor_admittance(model.mot_rs[j], model.mot_xs[j], model.mot_xm[j],
                                        model.mot_rr[j], model.mot_xr[j], float(slip[j]))
        y_mot *= model.mot_k * remaining[model.mot_load_idx]
        np.add.at(y, (model.mot_bus, model.mot_bus), y_mot)

    return np.linalg.solve(y, rhs)


# ---------------------------------------------------------------------------
# Derivatives and stepping
# ---------------------------------------------------------------------------

def _derivatives(model: SimModel, v: np.ndarray, delta: np.ndarray, omega: np.ndarray,
                 eqp: np.ndarray, edp: np.ndarray, efd: np.ndarray,
                 slip: np.ndarray) -> tuple[np.ndarray, ...]:
    """Right-hand sides of all differential equations at a given network solution."""
    if model.nm:
        vt = v[model.mbus]
        u = vt * np.exp(-1j * delta)
        vd, vq = -u.imag, u.real
        i_d = (eqp - vq) / model.xdp
        i_q = (vd - edp) / model.xqp
        pe = edp * i_d + eqp * i_q + (model.xqp - model.xdp) * i_d * i_q
        d_delta = OMEGA_S * omega
        d_omega = (model.pm - pe - model.damp * omega) / model.two_h
        d_eqp = (efd - eqp - (model.xd - model.xdp) * i_d) / model.td0p
        d_edp = (-edp + (model.xq - model.xqp) * i_q) / model.tq0p
        d_efd = (model.ka * (model.vref - np.abs(vt)) - efd) / model.ta
    else:
        d_delta = d_omega = d_eqp = d_edp = d_efd = np.zeros(0)

    if model.nmot:
        vmag = np.abs(v[model.mot_bus])
        te = np.empty(model.nmot)
        for j in range(model.nmot):
            te[j] = motor_torque(model.mot_rs[j], model.mot_xs[j], model.mot_xm[j],
                                 model.mot_rr[j], model.mot_xr[j],
                                 float(slip[j]), float(vmag[j]))
        tm = model.mot_tm0 * (1.0 - slip) ** model.mot_alpha
        d_slip = (tm - te) / model.mot_2hm
    else:
        d_slip = np.zeros(0)

    return d_delta, d_omega, d_eqp, d_edp, d_efd, d_slip


def simulate_interval(
    state: DynState,
    dt: float,
    duration: float,
    events: Sequence[Event] = (),
    relays: UvlsSettings | None = None,
    sample_every: int = 0,
    on_sample: Callable[[DynState], None] | None = None,
) -> DynState:
    """Advance the state by ``duration`` seconds in steps of ``dt`` (in place).

    ``dt`` must divide ``duration``.  Each event is applied at the first step
    boundary at or after its timestamp; all events must land inside the
    interval (no later than one step before its end).  When ``relays`` is
    given, the relay scheme is scanned every step and its sheds are applied
    and logged before integrating.  When ``sample_every`` is positive,
    ``on_sample(state)`` is called after every that many steps.  A collapsed
    state keeps time advancing with voltages pinned to zero so downstream
    traces stay rectangular.

    The heavy lifting happens in :func:`gridshed._kernel.run_chunk`; results
    are bit-identical however the caller slices the interval because the
    per-step arithmetic never depends on chunk boundaries.
    """
    model = state.model
    n_steps = int(round(duration / dt))
    if n_steps <= 0 or abs(n_steps * dt - duration) > 1e-9:
        raise ValueError(f"dt {dt} does not divide duration {duration}")

    t0 = state.t
    ev_by_step: dict[int, list[Event]] = {}
    for e in events:
        if e.t < t0 - 1e-9 or e.t > t0 + duration + 1e-9:
            raise ValueError(
                f"event at t={e.t} outside interval [{t0}, {t0 + duration}]"
            )
        # An event landing exactly on the end boundary takes effect after the
        # last step here (bookkeeping only); the next interval rebuilds the
        # admittance matrix from it, so slicing the timeline differently
        # yields bit-identical trajectories.
        si = min(n_steps, max(0, math.ceil((e.t - t0) / dt - 1e-9)))
        ev_by_step.setdefault(si, []).append(e)

    splits = {0, n_steps} | set(ev_by_step)
    if sample_every > 0:
        splits |= set(range(sample_every, n_steps + 1, sample_every))
    splits = sorted(splits)

    static = model.kernel_static()
    if relays is not None:
        uv = (True, float(relays.v_threshold), float(relays.delay_s),
              float(relays.shed_fraction), int(relays.max_firings),
              float(relays.backup_offset_s))
        cap = model.relay_load_idx.size * relays.max_firings + 1
    else:
        uv = (False, 0.9, 0.33, 0.2, 0, 0.0)
        cap = 1
    fired_step = np.empty(cap, dtype=np.int64)
    fired_load = np.empty(cap, dtype=np.int64)
    fired_applied = np.empty(cap, dtype=np.float64)

    y_event = _event_ybus(model, state.active_faults)
    for ci in range(len(splits) - 1):
        cur, nxt = splits[ci], splits[ci + 1]
        state.t = t0 + cur * dt
        dirty = False
        for ev in ev_by_step.get(cur, ()):  # due exactly at this boundary
            if ev.kind == "apply_fault":
                apply_fault(state, ev.bus)
                dirty = True
            elif ev.kind == "clear_fault":
                clear_fault(state, ev.bus)
                dirty = True
            elif ev.kind == "shed":
                shed_load(state, ev.bus, ev.fraction, ev.source or "policy")
            else:
                raise ValueError(f"unknown event kind {ev.kind!r}")
        if dirty:
            y_event = _event_ybus(model, state.active_faults)

        if not state.collapsed:
            n_fired, col = _kernel.run_chunk(
                nxt - cur, dt, y_event, state.v,
                state.delta, state.omega, state.eqp, state.edp, state.efd,
                state.slip, state.remaining,
                *static,
                uv[0], model.relay_load_idx, model.relay_bus,
                uv[1], uv[2], uv[3], uv[4], uv[5],
                state.uvls_timer, state.uvls_firings,
                model.params.alg_tol, model.params.alg_max_iter, model.params.s_min,
                fired_step, fired_load, fired_applied,
            )
            for fi in range(n_fired):
                li = int(fired_load[fi])
                mw = float(fired_applied[fi]) * model.load_mw0[li]
                state.mw_shed_uvls += mw
                state.event_log.append(Event(
                    t0 + (cur + int(fired_step[fi])) * dt, "shed",
                    model.loads[li].bus, fraction=float(fired_applied[fi]),
                    source="uvls", mw=mw,
                ))
            if col >= 0:
                state.collapsed = True
                state.v = np.zeros_like(state.v)
                state.event_log.append(Event(t0 + (cur + col) * dt, "collapse", -1))

        state.t = t0 + nxt * dt
        if (sample_every > 0 and on_sample is not None
                and nxt % sample_every == 0 and nxt > 0):
            on_sample(state)

    for ev in ev_by_step.get(n_steps, ()):  # due exactly at the end boundary
        if ev.kind == "apply_fault":
            apply_fault(state, ev.bus)
        elif ev.kind == "clear_fault":
            clear_fault(state, ev.bus)
        elif ev.kind == "shed":
            shed_load(state, ev.bus, ev.fraction, ev.source or "policy")
        else:
            raise ValueError(f"unknown event kind {ev.kind!r}")
    return state


def replay_events(case: PowerFlowCase, sol: PowerFlowSolution, params: SimParams,
                  dt: float, duration: float, log: Sequence[Event]) -> DynState:
    """Re-run a logged episode from scratch (relays off; logged sheds applied verbatim)."""
    state = init_dynamics(case, sol, params)
    events = [e for e in log if e.kind in ("apply_fault", "clear_fault", "shed")]
    return simulate_interval(state, dt, duration, events=events, relays=None)
