"""Jitted inner loop of the transient simulator.

This module is the production stepping path; :mod:`gridshed.dynamics` wraps it
and also carries slower reference implementations of the same formulas that
the test suite cross-checks against.  The kernel advances whole chunks of
trapezoidal steps (between event boundaries) including the relay scheme, so
per-step Python overhead disappears.

Everything here must stay deterministic: no threading, no RNG, plain IEEE
arithmetic, identical operation order regardless of how callers chunk an
interval.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

OMEGA_S = 2.0 * math.pi * 60.0


@njit(cache=True)
def motor_admittance_nb(rs, xs, xm, rr, xr, s):
    zr = complex(rr / s, xr)
    zm = complex(0.0, xm)
    z = complex(rs, xs) + (zm * zr) / (zm + zr)
    return 1.0 / z


@njit(cache=True)
def motor_torque_nb(rs, xs, xm, rr, xr, s, vmag):
    zr = complex(rr / s, xr)
    zm = complex(0.0, xm)
    z_in = complex(rs, xs) + (zm * zr) / (zm + zr)
    i_s = vmag / z_in
    i_r = i_s * zm / (zm + zr)
    return (i_r.real * i_r.real + i_r.imag * i_r.imag) * rr / s


@njit(cache=True)
def _derivs(v, delta, omega, eqp, edp, efd, slip,
            mbus, xd, xq, xdp, xqp, td0p, tq0p, two_h, damp, ka, ta, pm, vref,
            mot_bus, m_rs, m_xs, m_xm, m_rr, m_xr, m_2h, m_alpha, m_tm0,
            d_delta, d_omega, d_eqp, d_edp, d_efd, d_slip):
    for i in range(mbus.shape[0]):
        vt = v[mbus[i]]
        c = math.cos(delta[i])
        s = math.sin(delta[i])
        u = vt * complex(c, -s)  # v * exp(-j delta)
        vd = -u.imag
        vq = u.real
        i_d = (eqp[i] - vq) / xdp[i]
        i_q = (vd - edp[i]) / xqp[i]
        pe = edp[i] * i_d + eqp[i] * i_q + (xqp[i] - xdp[i]) * i_d * i_q
        d_delta[i] = OMEGA_S * omega[i]
        d_omega[i] = (pm[i] - pe - damp[i] * omega[i]) / two_h[i]
        d_eqp[i] = (efd[i] - eqp[i] - (xd[i] - xdp[i]) * i_d) / td0p[i]
        d_edp[i] = (-edp[i] + (xq[i] - xqp[i]) * i_q) / tq0p[i]
        d_efd[i] = (ka[i] * (vref[i] - abs(vt)) - efd[i]) / ta[i]
    for j in range(mot_bus.shape[0]):
        vm = abs(v[mot_bus[j]])
        te = motor_torque_nb(m_rs[j], m_xs[j], m_xm[j], m_rr[j], m_xr[j], slip[j], vm)
        tm = m_tm0[j] * (1.0 - slip[j]) ** m_alpha[j]
        d_slip[j] = (tm - te) / m_2h[j]


@njit(cache=True)
def _solve_lin(a, b):
    """Gaussian elimination with partial pivoting; destroys ``a`` and ``b``.

    Returns (x, ok).  A vanishing pivot reports failure instead of raising so
    the stepping loop can mark the state collapsed without unwinding through
    an exception (which would lose in-kernel bookkeeping).
    """
    n = a.shape[0]
    for col in range(n):
        piv = col
        mx = abs(a[col, col])
        for r in range(col + 1, n):
            m = abs(a[r, col])
            if m > mx:
                mx = m
                piv = r
        if mx < 1e-13:
            return b, False
        if piv != col:
            for c2 in range(col, n):
                tmp = a[col, c2]
                a[col, c2] = a[piv, c2]
                a[piv, c2] = tmp
            tmpb = b[col]
            b[col] = b[piv]
            b[piv] = tmpb
        inv = 1.0 / a[col, col]
        for r in range(col + 1, n):
            f = a[r, col] * inv
            if f != 0.0:
                for c2 in range(col + 1, n):
                    a[r, c2] -= f * a[col, c2]
                b[r] -= f * b[col]
    for col in range(n - 1, -1, -1):
        acc = b[col]
        for c2 in range(col + 1, n):
            acc -= a[col, c2] * b[c2]
        b[col] = acc / a[col, col]
    return b, True


@njit(cache=True)
def _net_solve(y_event, v_prev, delta, eqp, edp, slip, remaining,
               mbus, xdp, xqp, y_fold, b_sal,
               lbus, y_zip, i_zip, s_p, blend_v,
               mot_bus, mot_li, m_rs, m_xs, m_xm, m_rr, m_xr, m_k):
    n = y_event.shape[0]
    y = y_event.copy()
    rhs = np.zeros(n, dtype=np.complex128)

    for i in range(mbus.shape[0]):
        c = math.cos(delta[i])
        s = math.sin(delta[i])
        ejd = complex(c, s)
        k_src = complex(edp[i] / xqp[i], eqp[i] / xdp[i])
        b = mbus[i]
        y[b, b] += y_fold[i]
        rhs[b] += complex(0.0, b_sal[i]) * ejd * ejd * v_prev[b].conjugate() - k_src * ejd

    for i in range(lbus.shape[0]):
        b = lbus[i]
        vl = v_prev[b]
        vm = abs(vl)
        y[b, b] += y_zip[i] * remaining[i]
        if vm > 1e-9:
            u = vm / blend_v
            if u > 1.0:
                u = 1.0
            bi = u * (2.0 - u)
            bp = u * u * (3.0 - 2.0 * u)
            i_cur = i_zip[i] * remaining[i] * bi * (vl / vm)
            i_pow = s_p[i].conjugate() * remaining[i] * bp / vl.conjugate()
            rhs[b] -= i_cur + i_pow

    for j in range(mot_bus.shape[0]):
        ym = motor_admittance_nb(m_rs[j], m_xs[j], m_xm[j], m_rr[j], m_xr[j], slip[j])
        b = mot_bus[j]
        y[b, b] += ym * m_k[j] * remaining[mot_li[j]]

    return _solve_lin(y, rhs)


@njit(cache=True)
def run_chunk(n_steps, dt,
              y_event, v,
              delta, omega, eqp, edp, efd, slip, remaining,
              mbus, xd, xq, xdp, xqp, td0p, tq0p, two_h, damp, ka, ta,
              efd_lo, efd_hi, y_fold, b_sal, pm, vref,
              lbus, y_zip, i_zip, s_p, blend_v,
              mot_bus, mot_li, m_rs, m_xs, m_xm, m_rr, m_xr, m_2h, m_alpha, m_tm0, m_k,
              uvls_on, relay_li, relay_bus, uv_thresh, uv_delay, uv_frac,
              uv_maxfir, uv_backoff, uvls_timer, uvls_firings,
              alg_tol, alg_max_iter, s_min,
              fired_step, fired_load, fired_applied):
    """Advance ``n_steps`` trapezoidal steps in place.

    Returns ``(n_fired, collapse_step)`` where ``collapse_step`` is the
    zero-based step at which the network solve failed, or -1.  Relay firings
    are recorded in the ``fired_*`` buffers (step index, load index, applied
    fraction); the caller turns them into logged events and MW totals.
    """
    nm = mbus.shape[0]
    nmot = mot_bus.shape[0]
    nprot = relay_li.shape[0]
    n = v.shape[0]
    n_fired = 0

    fn_delta = np.empty(nm)
    fn_omega = np.empty(nm)
    fn_eqp = np.empty(nm)
    fn_edp = np.empty(nm)
    fn_efd = np.empty(nm)
    fn_slip = np.empty(nmot)
    f1_delta = np.empty(nm)
    f1_omega = np.empty(nm)
    f1_eqp = np.empty(nm)
    f1_edp = np.empty(nm)
    f1_efd = np.empty(nm)
    f1_slip = np.empty(nmot)
    p_delta = np.empty(nm)
    p_omega = np.empty(nm)
    p_eqp = np.empty(nm)
    p_edp = np.empty(nm)
    p_efd = np.empty(nm)
    p_slip = np.empty(nmot)

    for k in range(n_steps):
        # --- relay scheme: scan start-of-step voltages, shed immediately ---
        if uvls_on:
            for r in range(nprot):
                if uvls_firings[r] >= uv_maxfir:
                    continue
                vmag_r = abs(v[relay_bus[r]])
                if vmag_r < uv_thresh:
                    uvls_timer[r] += dt
                    req = uv_delay
                    if uvls_firings[r] == 0:
                        req += uv_backoff
                    if uvls_timer[r] >= req - 1e-12:
                        li = relay_li[r]
                        applied = uv_frac
                        if applied > remaining[li]:
                            applied = remaining[li]
                        if applied < 0.0:
                            applied = 0.0
                        remaining[li] -= applied
                        fired_step[n_fired] = k
                        fired_load[n_fired] = li
                        fired_applied[n_fired] = applied
                        n_fired += 1
                        uvls_firings[r] += 1
                        uvls_timer[r] = 0.0
                else:
                    uvls_timer[r] = 0.0

        # --- derivatives at step start ---
        _derivs(v, delta, omega, eqp, edp, efd, slip,
                mbus, xd, xq, xdp, xqp, td0p, tq0p, two_h, damp, ka, ta, pm, vref,
                mot_bus, m_rs, m_xs, m_xm, m_rr, m_xr, m_2h, m_alpha, m_tm0,
                fn_delta, fn_omega, fn_eqp, fn_edp, fn_efd, fn_slip)

        # --- explicit predictor (with non-windup/physical clamps) ---
        for i in range(nm):
            p_delta[i] = delta[i] + dt * fn_delta[i]
            p_omega[i] = omega[i] + dt * fn_omega[i]
            p_eqp[i] = eqp[i] + dt * fn_eqp[i]
            p_edp[i] = edp[i] + dt * fn_edp[i]
            e = efd[i] + dt * fn_efd[i]
            if e < efd_lo[i]:
                e = efd_lo[i]
            elif e > efd_hi[i]:
                e = efd_hi[i]
            p_efd[i] = e
        for j in range(nmot):
            sl = slip[j] + dt * fn_slip[j]
            if sl < s_min:
                sl = s_min
            elif sl > 1.0:
                sl = 1.0
            p_slip[j] = sl

        # --- corrector: network + trapezoid fixed point ---
        v_it = v
        ok = False
        for _ in range(alg_max_iter):
            v_new, solved = _net_solve(y_event, v_it, p_delta, p_eqp, p_edp, p_slip,
                                       remaining,
                                       mbus, xdp, xqp, y_fold, b_sal,
                                       lbus, y_zip, i_zip, s_p, blend_v,
                                       mot_bus, mot_li, m_rs, m_xs, m_xm, m_rr, m_xr, m_k)
            if not solved:
                return n_fired, k
            allfin = True
            for b in range(n):
                re = v_new[b].real
                im = v_new[b].imag
                if not (math.isfinite(re) and math.isfinite(im)):
                    allfin = False
                    break
            if not allfin:
                return n_fired, k

            _derivs(v_new, p_delta, p_omega, p_eqp, p_edp, p_efd, p_slip,
                    mbus, xd, xq, xdp, xqp, td0p, tq0p, two_h, damp, ka, ta, pm, vref,
                    mot_bus, m_rs, m_xs, m_xm, m_rr, m_xr, m_2h, m_alpha, m_tm0,
                    f1_delta, f1_omega, f1_eqp, f1_edp, f1_efd, f1_slip)

            dx = 0.0
            for i in range(nm):
                c = delta[i] + 0.5 * dt * (fn_delta[i] + f1_delta[i])
                d = abs(c - p_delta[i])
                if d > dx:
                    dx = d
                p_delta[i] = c
                c = omega[i] + 0.5 * dt * (fn_omega[i] + f1_omega[i])
                d = abs(c - p_omega[i])
                if d > dx:
                    dx = d
                p_omega[i] = c
                c = eqp[i] + 0.5 * dt * (fn_eqp[i] + f1_eqp[i])
                d = abs(c - p_eqp[i])
                if d > dx:
                    dx = d
                p_eqp[i] = c
                c = edp[i] + 0.5 * dt * (fn_edp[i] + f1_edp[i])
                d = abs(c - p_edp[i])
                if d > dx:
                    dx = d
                p_edp[i] = c
                c = efd[i] + 0.5 * dt * (fn_efd[i] + f1_efd[i])
                if c < efd_lo[i]:
                    c = efd_lo[i]
                elif c > efd_hi[i]:
                    c = efd_hi[i]
                d = abs(c - p_efd[i])
                if d > dx:
                    dx = d
                p_efd[i] = c
            for j in range(nmot):
                c = slip[j] + 0.5 * dt * (fn_slip[j] + f1_slip[j])
                if c < s_min:
                    c = s_min
                elif c > 1.0:
                    c = 1.0
                d = abs(c - p_slip[j])
                if d > dx:
                    dx = d
                p_slip[j] = c

            dv = 0.0
            for b in range(n):
                d = abs(v_new[b] - v_it[b])
                if d > dv:
                    dv = d
            v_it = v_new
            if dv < alg_tol and dx < alg_tol:
                ok = True
                break
        if not ok:
            return n_fired, k

        # --- commit ---
        for b in range(n):
            v[b] = v_it[b]
        for i in range(nm):
            delta[i] = p_delta[i]
            omega[i] = p_omega[i]
            eqp[i] = p_eqp[i]
            edp[i] = p_edp[i]
            efd[i] = p_efd[i]
        for j in range(nmot):
            slip[j] = p_slip[j]

    return n_fired, -1
