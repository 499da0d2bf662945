"""Under-voltage load-shedding relay scheme.

Each protected load bus carries an identical definite-time relay: a timer
accumulates while the bus voltage stays below ``v_threshold`` continuously and
resets the moment it recovers.  When the timer reaches the stage delay the
relay sheds ``shed_fraction`` of the bus's episode-initial load, re-arms, and
may fire again after another full delay, up to ``max_firings`` total, after
which it locks out.  ``backup_offset_s`` (used when the relay acts as a backup
behind a faster controller) is added to the delay of each bus's first firing
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["UvlsSettings", "uvls_scan"]


@dataclass(frozen=True)
class UvlsSettings:
    v_threshold: float = 0.90
    delay_s: float = 0.33
    shed_fraction: float = 0.20
    max_firings: int = 3
    backup_offset_s: float = 0.0


def uvls_scan(state, settings: UvlsSettings, dt: float) -> list[int]:
    """Advance relay timers by one step and return protected-load indices that fire.

    ``state`` is a :class:`gridshed.dynamics.DynState`; voltages are read at
    the start of the step.  Timers and firing counters live on the state so a
    scan has no side effects beyond them.  The caller applies the sheds.
    """
    model = state.model
    fired: list[int] = []
    if model.relay_load_idx.size == 0:
        return fired
    vmag = np.abs(state.v[model.lbus[model.relay_load_idx]])
    for k in range(model.relay_load_idx.size):
        if state.uvls_firings[k] >= settings.max_firings:
            continue  # locked out
        if vmag[k] < settings.v_threshold:
            state.uvls_timer[k] += dt
        else:
            state.uvls_timer[k] = 0.0
            continue
        required = settings.delay_s
        if state.uvls_firings[k] == 0:
            required += settings.backup_offset_s
        if state.uvls_timer[k] >= required - 1e-12:
            fired.append(int(model.relay_load_idx[k]))
            state.uvls_firings[k] += 1
            state.uvls_timer[k] = 0.0
    return fired
