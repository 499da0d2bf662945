"""Power-system case model: schema, JSON round-trip, validation, admittance matrix.

A case is a plain frozen-dataclass tree.  All electrical quantities are in per
unit on ``base_mva`` except where a field name says otherwise (``voltage_kv``).
Machine and motor parameters are on their own MVA base where noted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "CaseError",
    "Bus",
    "Branch",
    "Exciter",
    "Machine",
    "MotorParams",
    "Load",
    "Zone",
    "PowerFlowCase",
    "load_case",
    "save_case",
    "case_to_dict",
    "case_from_dict",
    "validate_case",
    "build_ybus",
    "fixture_path",
]

BUS_KINDS = ("slack", "pv", "pq")


class CaseError(ValueError):
    """Raised when a case violates a schema invariant.

    The message names the first violated invariant and the offending element.
    """


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "slack" | "pv" | "pq"
    voltage_kv: float
    v_set: float = 1.0  # setpoint for slack/pv; initial guess hint for pq
    shunt_g: float = 0.0  # pu conductance to ground at nominal voltage
    shunt_b: float = 0.0  # pu susceptance (positive = capacitive)


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0  # total line charging susceptance, pu
    tap: float = 1.0  # off-nominal tap on the from side
    status: int = 1


@dataclass(frozen=True)
class Exciter:
    """First-order fast static exciter: Ta * dEfd/dt = Ka*(Vref - Vt) - Efd."""

    ka: float = 200.0
    ta: float = 0.05
    efd_min: float = 0.0
    efd_max: float = 5.0


@dataclass(frozen=True)
class Machine:
    """Two-axis synchronous machine.  Reactances/time-constants on system base."""

    id: str
    bus: int
    p_set: float  # dispatched P, pu (ignored for the slack machine by the power flow)
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    h: float  # inertia constant, s
    d: float  # damping, pu torque / pu speed
    xd: float
    xq: float
    xd_p: float
    xq_p: float
    td0_p: float
    tq0_p: float
    exciter: Exciter = field(default_factory=Exciter)
    status: int = 1


@dataclass(frozen=True)
class MotorParams:
    """Induction motor equivalent circuit, per unit on the motor's own MVA base.

    The motor base MVA itself is implied: the motor is initialized drawing
    1.0 pu electrical power on its own base, and that own base is sized so the
    draw equals ``motor_fraction * p0`` of the hosting load.
    """

    rs: float = 0.04
    xs: float = 0.10
    xm: float = 2.8
    rr: float = 0.05
    xr: float = 0.10
    h_m: float = 0.4  # mechanical inertia constant, s
    torque_exponent: float = 0.0  # Tm ~ (1-s)^alpha; 0 = constant torque


@dataclass(frozen=True)
class Load:
    """Composite load: static ZIP part plus an optional induction-motor part.

    ``zip_z + zip_i + zip_p`` must sum to 1; the split applies to the static
    remainder after the motor share ``motor_fraction`` is carved out of ``p0``.
    """

    bus: int
    p0: float  # pu on system base
    q0: float
    motor_fraction: float = 0.0
    zip_z: float = 0.4
    zip_i: float = 0.3
    zip_p: float = 0.3
    motor: MotorParams | None = None

    def initial_mw(self, base_mva: float) -> float:
        return self.p0 * base_mva


@dataclass(frozen=True)
class Zone:
    zone_id: int
    name: str
    buses: tuple[int, ...]


@dataclass(frozen=True)
class PowerFlowCase:
    case_id: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    machines: tuple[Machine, ...]
    loads: tuple[Load, ...]
    zones: tuple[Zone, ...]

    # -- index helpers -------------------------------------------------------

    def bus_index(self) -> dict[int, int]:
        """Map bus id -> position in ``self.buses``."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def bus_by_id(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def zone_of(self, bus_id: int) -> int | None:
        for z in self.zones:
            if bus_id in z.buses:
                return z.zone_id
        return None

    def total_load_p(self) -> float:
        return float(sum(l.p0 for l in self.loads))

    def in_service_machines(self) -> tuple[Machine, ...]:
        return tuple(m for m in self.machines if m.status)


# ---------------------------------------------------------------------------
# JSON round-trip
# ---------------------------------------------------------------------------

def case_to_dict(case: PowerFlowCase) -> dict:
    def bus_d(b: Bus) -> dict:
        return {
            "id": b.id,
            "kind": b.kind,
            "voltage_kv": b.voltage_kv,
            "v_set": b.v_set,
            "shunt_g": b.shunt_g,
            "shunt_b": b.shunt_b,
        }

    def branch_d(br: Branch) -> dict:
        return {
            "from": br.from_bus,
            "to": br.to_bus,
            "r": br.r,
            "x": br.x,
            "b_charging": br.b_charging,
            "tap": br.tap,
            "status": br.status,
        }

    def mach_d(m: Machine) -> dict:
        return {
            "id": m.id,
            "bus": m.bus,
            "status": m.status,
            "p_set": m.p_set,
            "p_min": m.p_min,
            "p_max": m.p_max,
            "q_min": m.q_min,
            "q_max": m.q_max,
            "h": m.h,
            "d": m.d,
            "xd": m.xd,
            "xq": m.xq,
            "xd_p": m.xd_p,
            "xq_p": m.xq_p,
            "td0_p": m.td0_p,
            "tq0_p": m.tq0_p,
            "exciter": {
                "ka": m.exciter.ka,
                "ta": m.exciter.ta,
                "efd_min": m.exciter.efd_min,
                "efd_max": m.exciter.efd_max,
            },
        }

    def load_d(l: Load) -> dict:
        d = {
            "bus": l.bus,
            "p0": l.p0,
            "q0": l.q0,
            "motor_fraction": l.motor_fraction,
            "zip": {"z": l.zip_z, "i": l.zip_i, "p": l.zip_p},
        }
        if l.motor is not None:
            d["motor"] = {
                "rs": l.motor.rs,
                "xs": l.motor.xs,
                "xm": l.motor.xm,
                "rr": l.motor.rr,
                "xr": l.motor.xr,
                "h_m": l.motor.h_m,
                "torque_exponent": l.motor.torque_exponent,
            }
        return d

    def zone_d(z: Zone) -> dict:
        return {"zone_id": z.zone_id, "name": z.name, "buses": list(z.buses)}

    return {
        "case_id": case.case_id,
        "base_mva": case.base_mva,
        "buses": [bus_d(b) for b in case.buses],
        "branches": [branch_d(br) for br in case.branches],
        "machines": [mach_d(m) for m in case.machines],
        "loads": [load_d(l) for l in case.loads],
        "zones": [zone_d(z) for z in case.zones],
    }


def case_from_dict(d: Mapping) -> PowerFlowCase:
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                kind=str(b["kind"]),
                voltage_kv=float(b["voltage_kv"]),
                v_set=float(b.get("v_set", 1.0)),
                shunt_g=float(b.get("shunt_g", 0.0)),
                shunt_b=float(b.get("shunt_b", 0.0)),
            )
            for b in d["buses"]
        )
        branches = tuple(
            Branch(
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                r=float(br["r"]),
                x=float(br["x"]),
                b_charging=float(br.get("b_charging", 0.0)),
                tap=float(br.get("tap", 1.0)),
                status=int(br.get("status", 1)),
            )
            for br in d["branches"]
        )
        machines = []
        for m in d["machines"]:
            exc = m.get("exciter", {})
            machines.append(
                Machine(
                    id=str(m["id"]),
                    bus=int(m["bus"]),
                    status=int(m.get("status", 1)),
                    p_set=float(m["p_set"]),
                    p_min=float(m.get("p_min", 0.0)),
                    p_max=float(m["p_max"]),
                    q_min=float(m["q_min"]),
                    q_max=float(m["q_max"]),
                    h=float(m["h"]),
                    d=float(m.get("d", 0.0)),
                    xd=float(m["xd"]),
                    xq=float(m["xq"]),
                    xd_p=float(m["xd_p"]),
                    xq_p=float(m["xq_p"]),
                    td0_p=float(m["td0_p"]),
                    tq0_p=float(m["tq0_p"]),
                    exciter=Exciter(
                        ka=float(exc.get("ka", 200.0)),
                        ta=float(exc.get("ta", 0.05)),
                        efd_min=float(exc.get("efd_min", 0.0)),
                        efd_max=float(exc.get("efd_max", 5.0)),
                    ),
                )
            )
        loads = []
        for l in d["loads"]:
            zip_d = l.get("zip", {"z": 0.4, "i": 0.3, "p": 0.3})
            motor = None
            if "motor" in l and l["motor"] is not None:
                mo = l["motor"]
                motor = MotorParams(
                    rs=float(mo.get("rs", 0.04)),
                    xs=float(mo.get("xs", 0.10)),
                    xm=float(mo.get("xm", 2.8)),
                    rr=float(mo.get("rr", 0.05)),
                    xr=float(mo.get("xr", 0.10)),
                    h_m=float(mo.get("h_m", 0.4)),
                    torque_exponent=float(mo.get("torque_exponent", 0.0)),
                )
            loads.append(
                Load(
                    bus=int(l["bus"]),
                    p0=float(l["p0"]),
                    q0=float(l["q0"]),
                    motor_fraction=float(l.get("motor_fraction", 0.0)),
                    zip_z=float(zip_d["z"]),
                    zip_i=float(zip_d["i"]),
                    zip_p=float(zip_d["p"]),
                    motor=motor,
                )
            )
        zones = tuple(
            Zone(
                zone_id=int(z["zone_id"]),
                name=str(z["name"]),
                buses=tuple(int(b) for b in z["buses"]),
            )
            for z in d["zones"]
        )
        case = PowerFlowCase(
            case_id=str(d["case_id"]),
            base_mva=float(d["base_mva"]),
            buses=buses,
            branches=branches,
            machines=tuple(machines),
            loads=tuple(loads),
            zones=zones,
        )
    except KeyError as exc:  # missing required field
        raise CaseError(f"missing required case field {exc.args[0]!r}") from exc
    validate_case(case)
    return case


def load_case(path: str | Path) -> PowerFlowCase:
    """Load and validate a case from a JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        return case_from_dict(json.load(fh))


def save_case(case: PowerFlowCase, path: str | Path) -> None:
    """Write a case as canonical JSON (sorted keys, repr floats) for bit-stable round trips."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(case_to_dict(case), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _connected(case: PowerFlowCase) -> bool:
    ids = [b.id for b in case.buses]
    adj: dict[int, set[int]] = {i: set() for i in ids}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(ids)


def validate_case(case: PowerFlowCase) -> None:
    """Check schema invariants; raise :class:`CaseError` naming the first violation."""
    if case.base_mva <= 0:
        raise CaseError(f"base_mva must be positive, got {case.base_mva}")
    if not case.buses:
        raise CaseError("case has no buses")

    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted(i for i in set(ids) if ids.count(i) > 1)[0]
        raise CaseError(f"duplicate bus id {dup}")
    id_set = set(ids)

    slacks = [b.id for b in case.buses if b.kind == "slack"]
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus {b.id} has unknown kind {b.kind!r}")
        if b.voltage_kv <= 0:
            raise CaseError(f"bus {b.id} voltage_kv must be positive")
        if not (0.9 <= b.v_set <= 1.1):
            raise CaseError(f"bus {b.id} v_set {b.v_set} outside [0.9, 1.1]")
    if len(slacks) != 1:
        raise CaseError(f"exactly one slack bus required, found {len(slacks)}")

    for br in case.branches:
        for end, name in ((br.from_bus, "from"), (br.to_bus, "to")):
            if end not in id_set:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end} ({name})")
        if br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has zero reactance")
        if br.tap <= 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has non-positive tap {br.tap}")
    if not _connected(case):
        raise CaseError("network is not connected over in-service branches")

    mach_ids = [m.id for m in case.machines]
    if len(set(mach_ids)) != len(mach_ids):
        dup_m = sorted(i for i in set(mach_ids) if mach_ids.count(i) > 1)[0]
        raise CaseError(f"duplicate machine id {dup_m!r}")
    buses_by_id = {b.id: b for b in case.buses}
    for m in case.machines:
        if m.bus not in id_set:
            raise CaseError(f"machine {m.id} references unknown bus {m.bus}")
        if m.h <= 0:
            raise CaseError(f"machine {m.id} inertia must be positive")
        if not (m.xd >= m.xd_p > 0):
            raise CaseError(f"machine {m.id} requires xd >= xd_p > 0")
        if not (m.xq >= m.xq_p > 0):
            raise CaseError(f"machine {m.id} requires xq >= xq_p > 0")
        if m.td0_p <= 0 or m.tq0_p <= 0:
            raise CaseError(f"machine {m.id} time constants must be positive")
        if m.q_min > m.q_max:
            raise CaseError(f"machine {m.id} has q_min > q_max")
        if not (m.p_min <= m.p_set <= m.p_max):
            raise CaseError(f"machine {m.id} p_set {m.p_set} outside [{m.p_min}, {m.p_max}]")
        if m.exciter.ta <= 0 or m.exciter.ka <= 0:
            raise CaseError(f"machine {m.id} exciter gains must be positive")
    for b in case.buses:
        if b.kind in ("slack", "pv"):
            if not any(m.bus == b.id and m.status for m in case.machines):
                raise CaseError(f"{b.kind} bus {b.id} has no in-service machine")

    load_buses = [l.bus for l in case.loads]
    if len(set(load_buses)) != len(load_buses):
        dup_l = sorted(i for i in set(load_buses) if load_buses.count(i) > 1)[0]
        raise CaseError(f"multiple loads at bus {dup_l}; merge them into one record")
    for l in case.loads:
        if l.bus not in id_set:
            raise CaseError(f"load references unknown bus {l.bus}")
        if abs(l.zip_z + l.zip_i + l.zip_p - 1.0) > 1e-9:
            raise CaseError(f"load at bus {l.bus} ZIP weights must sum to 1")
        if min(l.zip_z, l.zip_i, l.zip_p) < 0:
            raise CaseError(f"load at bus {l.bus} has a negative ZIP weight")
        if not (0.0 <= l.motor_fraction <= 1.0):
            raise CaseError(f"load at bus {l.bus} motor_fraction outside [0, 1]")
        if l.motor_fraction > 0 and l.motor is None:
            raise CaseError(f"load at bus {l.bus} has motor_fraction > 0 but no motor parameters")
        if l.motor_fraction > 0 and l.p0 <= 0:
            raise CaseError(f"load at bus {l.bus} has a motor share but non-positive p0")

    zone_ids = [z.zone_id for z in case.zones]
    if len(set(zone_ids)) != len(zone_ids):
        raise CaseError("duplicate zone_id")
    seen_zone_buses: dict[int, int] = {}
    for z in case.zones:
        for zb in z.buses:
            if zb not in id_set:
                raise CaseError(f"zone {z.zone_id} references unknown bus {zb}")
            if zb in seen_zone_buses:
                raise CaseError(f"bus {zb} appears in zones {seen_zone_buses[zb]} and {z.zone_id}")
            seen_zone_buses[zb] = z.zone_id
    for l in case.loads:
        if l.motor_fraction > 0 and l.bus not in seen_zone_buses:
            raise CaseError(f"motor load bus {l.bus} belongs to no zone")


# ---------------------------------------------------------------------------
# Admittance matrix
# ---------------------------------------------------------------------------

def build_ybus(case: PowerFlowCase) -> np.ndarray:
    """Dense complex bus admittance matrix in case bus order.

    Branch model is the standard pi section with an off-nominal tap ``t`` on
    the from side: ``Yff = (ys + j b/2) / t^2``, ``Yft = -ys / t``,
    ``Ytf = -ys / t``, ``Ytt = ys + j b/2``.  Bus shunts are added to the
    diagonal.
    """
    n = len(case.buses)
    idx = case.bus_index()
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.status:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        tap = br.tap
        y[f, f] += (ys + bc) / tap**2
        y[t, t] += ys + bc
        y[f, t] += -ys / tap
        y[t, f] += -ys / tap
    for b in case.buses:
        y[idx[b.id], idx[b.id]] += complex(b.shunt_g, b.shunt_b)
    return y


def fixture_path(name: str = "mini-south") -> Path:
    """Path to a bundled fixture case."""
    return Path(__file__).parent / "fixtures" / f"{name}.json"
