import numpy as np
import pytest

from gridshed.dynamics import SIM_DT, Event, SimParams, init_dynamics, simulate_interval
from gridshed.uvls import UvlsSettings, uvls_scan


def _drive(state, bus, profile, settings, dt=SIM_DT):
    """Feed a synthetic voltage timeline to the relay scan; returns firing times.

    ``profile(t)`` gives the voltage at the protected bus; all other buses are
    held at 1.0 so only one relay can act.
    """
    model = state.model
    pos = model.bus_pos[bus]
    fired = []
    t = 0.0
    while t < 4.0:
        state.v[:] = 1.0
        state.v[pos] = profile(t)
        for load_idx in uvls_scan(state, settings, dt):
            fired.append((t, load_idx))
        t += dt
    return fired


def test_hand_timeline_first_firing(fresh_state):
    """Voltage below 0.90 from t=1.2 s on: stage (0.90, 0.33 s, 0.20) fires at
    1.53 s (within one sim step)."""
    fired = _drive(fresh_state, 111, lambda t: 0.85 if t >= 1.2 else 1.0,
                   UvlsSettings(max_firings=1))
    assert len(fired) == 1
    assert fired[0][0] == pytest.approx(1.53, abs=SIM_DT)


def test_hand_timeline_hybrid_offset(fresh_state):
    """backup_delay_offset 1.0 s shifts the same first firing to 2.53 s."""
    fired = _drive(fresh_state, 111, lambda t: 0.85 if t >= 1.2 else 1.0,
                   UvlsSettings(max_firings=1, backup_offset_s=1.0))
    assert len(fired) == 1
    assert fired[0][0] == pytest.approx(2.53, abs=SIM_DT)


def test_timer_resets_on_recovery(fresh_state):
    """A dip shorter than the delay, then recovery, then a new dip: the timer
    restarts, so the firing is 0.33 s after the second dip's start."""
    def profile(t):
        if 1.0 <= t < 1.2 or t >= 2.0:
            return 0.85
        return 1.0
    fired = _drive(fresh_state, 111, profile, UvlsSettings(max_firings=1))
    assert len(fired) == 1
    assert fired[0][0] == pytest.approx(2.33, abs=SIM_DT)


def test_healthy_voltage_never_fires(fresh_state):
    fired = _drive(fresh_state, 111, lambda t: 0.95, UvlsSettings())
    assert fired == []


def test_rearm_and_lockout(fresh_state):
    """Sustained depression: fires every 0.33 s until max_firings, then locks."""
    fired = _drive(fresh_state, 111, lambda t: 0.80, UvlsSettings(max_firings=3))
    assert len(fired) == 3
    times = [t for t, _ in fired]
    assert times[0] == pytest.approx(0.33, abs=SIM_DT)
    assert times[1] == pytest.approx(0.66, abs=2 * SIM_DT)
    assert times[2] == pytest.approx(0.99, abs=2 * SIM_DT)


def test_backup_offset_first_firing_only(fresh_state):
    """Hybrid offset delays only the first firing; re-fires use the base delay."""
    fired = _drive(fresh_state, 111, lambda t: 0.80,
                   UvlsSettings(max_firings=2, backup_offset_s=1.0))
    assert len(fired) == 2
    assert fired[0][0] == pytest.approx(1.33, abs=SIM_DT)
    assert fired[1][0] == pytest.approx(1.66, abs=2 * SIM_DT)


def test_no_fault_no_firing_in_simulation(base_case, base_solution):
    """Integrated check: relays armed, no fault ever applied, nothing fires."""
    st = init_dynamics(base_case, base_solution, SimParams())
    simulate_interval(st, SIM_DT, 3.0, relays=UvlsSettings())
    assert st.mw_shed_uvls == 0.0
    assert not any(e.kind == "shed" for e in st.event_log)


def test_kernel_matches_python_scan(base_case, base_solution):
    """The in-kernel relay implementation and the python mirror agree on a
    real severe scenario: same shed events at the same steps."""
    params = SimParams()
    settings = UvlsSettings()
    events = [Event(1.0, "apply_fault", 4), Event(1.3, "clear_fault", 4)]

    kern = init_dynamics(base_case, base_solution, params)
    simulate_interval(kern, SIM_DT, 6.0, events=events, relays=settings)
    kernel_sheds = [(round(e.t / SIM_DT), e.bus) for e in kern.event_log
                    if e.kind == "shed"]

    mir = init_dynamics(base_case, base_solution, params)
    mirror_sheds = []
    from gridshed.dynamics import apply_fault, clear_fault, shed_load
    n = round(6.0 / SIM_DT)
    for k in range(n):
        t = k * SIM_DT
        if abs(t - 1.0) < 1e-12:
            apply_fault(mir, 4)
        if abs(t - 1.3) < 1e-12:
            clear_fault(mir, 4)
        for load_idx in uvls_scan(mir, settings, SIM_DT):
            bus = int(mir.model.loads[load_idx].bus)
            shed_load(mir, bus, settings.shed_fraction, source="uvls")
            mirror_sheds.append((k, bus))
        simulate_interval(mir, SIM_DT, SIM_DT)
    assert kernel_sheds == mirror_sheds
