import math

import numpy as np
import pytest

from gridshed.dynamics import (SIM_DT, Event, SimParams, init_dynamics,
                               replay_events, shed_load, simulate_interval)
from gridshed.powerflow import solve_power_flow


def test_equilibrium_hold_1s(fresh_state):
    """No events: every bus voltage stays within 1e-4 pu of its start for 1 s."""
    v0 = np.abs(fresh_state.v).copy()
    worst = [0.0]

    def watch(st):
        worst[0] = max(worst[0], float(np.max(np.abs(np.abs(st.v) - v0))))

    simulate_interval(fresh_state, SIM_DT, 1.0, sample_every=1, on_sample=watch)
    assert worst[0] < 1e-4


def test_equilibrium_single_step_rhs(fresh_state):
    """One trapezoidal step from equilibrium moves nothing: the implicit
    update of a zero right-hand side is the identity."""
    before = fresh_state.copy()
    simulate_interval(fresh_state, SIM_DT, SIM_DT)
    assert np.max(np.abs(fresh_state.delta - before.delta)) < 1e-8
    assert np.max(np.abs(fresh_state.omega - before.omega)) < 1e-8
    assert np.max(np.abs(fresh_state.slip - before.slip)) < 1e-8
    assert np.max(np.abs(fresh_state.efd - before.efd)) < 1e-7


def test_initial_slip_matches_bisection_oracle(base_case, base_solution, fresh_state):
    """Initialization solves P_in = 1 pu (motor base) at the solved voltage;
    the oracle bisects the textbook equivalent-circuit input power directly."""
    motors = [(l, k) for k, l in enumerate(
        l for l in base_case.loads if l.motor_fraction > 0)]
    vmag = dict(zip([b.id for b in base_case.buses], base_solution.v_mag))

    def p_in(m, s, v):
        zr = complex(m.rr / s, m.xr)
        z = complex(m.rs, m.xs) + (1j * m.xm * zr) / (zr + 1j * m.xm)
        return v * v * (1 / z).conjugate().real

    for load, k in motors:
        m = load.motor
        v0 = vmag[load.bus]
        lo, hi = 1e-6, 0.2
        assert p_in(m, lo, v0) < 1.0 < p_in(m, hi, v0)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if p_in(m, mid, v0) < 1.0:
                lo = mid
            else:
                hi = mid
        assert fresh_state.slip[k] == pytest.approx(0.5 * (lo + hi), abs=1e-6)


def test_trapezoidal_order(base_case, base_solution):
    """Richardson estimate on a smooth post-clearing window: order >= 1.8."""
    st = init_dynamics(base_case, base_solution, SimParams())
    simulate_interval(st, SIM_DT, 1.2,
                      events=[Event(1.0, "apply_fault", 4),
                              Event(1.0 + 2 / 60, "clear_fault", 4)])
    finals = []
    for div in (1, 2, 4):
        run = st.copy()
        simulate_interval(run, SIM_DT / div, 0.5)
        finals.append(run.v.copy())
    # with x_h ~ x* + C h^p: |x_h - x_{h/4}| / |x_{h/2} - x_{h/4}| = 2^p + 1
    e1 = np.linalg.norm(finals[0] - finals[2])
    e2 = np.linalg.norm(finals[1] - finals[2])
    order = math.log2(e1 / e2 - 1)
    assert order >= 1.8


def test_fidvr_signature(base_case, base_solution, spec):
    """18-cycle fault at ring bus 4, no control: some monitored bus stays
    below 0.7 pu for at least 1 s after clearing."""
    st = init_dynamics(base_case, base_solution, SimParams())
    mon = np.array([st.model.bus_pos[b] for b in spec.monitored_buses])
    clear_t = 1.0 + 18 / 60
    below = [0.0]

    def watch(s):
        if s.t > clear_t and np.min(np.abs(s.v[mon])) < 0.7:
            below[0] += SIM_DT

    simulate_interval(st, SIM_DT, 9.0,
                      events=[Event(1.0, "apply_fault", 4),
                              Event(clear_t, "clear_fault", 4)],
                      sample_every=1, on_sample=watch)
    assert below[0] >= 1.0
    assert not st.collapsed


def test_shed_arithmetic(fresh_state):
    shed_load(fresh_state, 111, 0.2)
    shed_load(fresh_state, 111, 0.2)
    assert fresh_state.remaining_at(111) == pytest.approx(0.6)
    shed_load(fresh_state, 111, 0.0)
    assert fresh_state.remaining_at(111) == pytest.approx(0.6)


def test_shed_clamp(fresh_state, base_case):
    initial_mw = next(l.p0 for l in base_case.loads if l.bus == 111) * base_case.base_mva
    shed_load(fresh_state, 111, 0.9)
    got = shed_load(fresh_state, 111, 0.2)
    assert fresh_state.remaining_at(111) == 0.0
    assert got == pytest.approx(0.1 * initial_mw)


def test_shed_accounting_vs_remaining(base_case, base_solution):
    """Total MW shed equals sum of initial_mw * (1 - remaining_final) to 1e-9."""
    st = init_dynamics(base_case, base_solution, SimParams())
    shed_load(st, 111, 0.3)
    shed_load(st, 213, 0.15)
    shed_load(st, 112, 1.5)  # clamps
    initial = {l.bus: l.p0 * base_case.base_mva for l in base_case.loads}
    by_remaining = sum(initial[b] * (1.0 - st.remaining_at(b))
                       for b in (111, 112, 213))
    assert st.total_mw_shed() == pytest.approx(by_remaining, abs=1e-9)


def test_remaining_fraction_monotone(base_case, base_solution):
    st = init_dynamics(base_case, base_solution, SimParams())
    lows = st.remaining.copy()
    from gridshed.uvls import UvlsSettings
    seen_increase = [False]

    def watch(s):
        nonlocal lows
        if np.any(s.remaining > lows + 1e-15):
            seen_increase[0] = True
        lows = np.minimum(lows, s.remaining)

    simulate_interval(st, SIM_DT, 5.0,
                      events=[Event(1.0, "apply_fault", 4),
                              Event(1.3, "clear_fault", 4)],
                      relays=UvlsSettings(), sample_every=1, on_sample=watch)
    assert not seen_increase[0]
    assert st.mw_shed_uvls > 0  # the relays did act in this severe scenario


def test_event_log_replay_bit_identical(base_case, base_solution):
    params = SimParams()
    st = init_dynamics(base_case, base_solution, params)
    from gridshed.uvls import UvlsSettings
    simulate_interval(st, SIM_DT, 6.0,
                      events=[Event(1.0, "apply_fault", 4),
                              Event(1.3, "clear_fault", 4)],
                      relays=UvlsSettings())
    assert st.event_log  # fault, clear, and relay sheds
    again = replay_events(base_case, base_solution, params, SIM_DT, 6.0,
                          st.event_log)
    assert np.array_equal(again.v, st.v)
    assert np.array_equal(again.delta, st.delta)
    assert np.array_equal(again.slip, st.slip)
    assert np.array_equal(again.remaining, st.remaining)


def test_slicing_invariance(base_case, base_solution):
    """One 3 s interval == thirty 0.1 s chunks, bit for bit, events included."""
    params = SimParams()
    events = [Event(1.0, "apply_fault", 7), Event(1.0 + 10 / 60, "clear_fault", 7)]
    one = init_dynamics(base_case, base_solution, params)
    simulate_interval(one, SIM_DT, 3.0, events=events)

    chunked = init_dynamics(base_case, base_solution, params)
    for k in range(30):
        t0, t1 = 0.1 * k, 0.1 * (k + 1)
        evs = [e for e in events if t0 < e.t <= t1 or (e.t == 0.0 and k == 0)]
        simulate_interval(chunked, SIM_DT, 0.1, events=evs)
    assert np.array_equal(one.v, chunked.v)
    assert np.array_equal(one.delta, chunked.delta)
    assert np.array_equal(one.slip, chunked.slip)


def test_collapse_flag_pins_voltages(base_case, base_solution):
    """Starving the algebraic solver forces mid-fault non-convergence: the
    state marks collapsed and keeps advancing with voltages pinned to zero."""
    st = init_dynamics(base_case, base_solution, SimParams(alg_max_iter=2))
    simulate_interval(st, SIM_DT, 3.0, events=[Event(1.0, "apply_fault", 4)])
    assert st.collapsed
    assert st.t == pytest.approx(3.0)
    assert np.all(np.abs(st.v) == 0.0)


def test_dt_must_divide_duration(fresh_state):
    with pytest.raises(ValueError):
        simulate_interval(fresh_state, SIM_DT, 0.01)


def test_event_outside_interval_rejected(fresh_state):
    with pytest.raises(ValueError, match="outside"):
        simulate_interval(fresh_state, SIM_DT, 1.0,
                          events=[Event(2.0, "apply_fault", 4)])
