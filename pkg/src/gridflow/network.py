"""Domain model for unbalanced three-phase distribution networks.

All electrical quantities are stored in per-unit on a per-phase power base
(S_base, kVA) with a per-bus line-to-neutral voltage base (base_kv).  File
formats carry physical units (kW, kvar, kV, ohms); conversion happens in the
circuit parser.  Everything here is immutable after construction and all
operations are pure functions.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace

import numpy as np

PHASES = ("a", "b", "c")
PHASE_INDEX = {"a": 0, "b": 1, "c": 2}

# delta branches in fixed order: ab, bc, ca
DELTA_PAIRS = (("a", "b"), ("b", "c"), ("c", "a"))

ZERO_VOLTAGE_FLOOR = 1e-6


class GridError(Exception):
    pass


class ZeroVoltage(GridError):
    """A load model was evaluated at a collapsed (near-zero) voltage."""


@dataclass(frozen=True)
class PhaseSet:
    a: bool = False
    b: bool = False
    c: bool = False

    def __post_init__(self):
        if not (self.a or self.b or self.c):
            raise ValueError("PhaseSet must contain at least one phase")

    @classmethod
    def from_string(cls, s: str) -> "PhaseSet":
        s = s.lower()
        bad = set(s) - {"a", "b", "c"}
        if bad:
            raise ValueError(f"unknown phases {sorted(bad)!r}")
        return cls(a="a" in s, b="b" in s, c="c" in s)

    def to_string(self) -> str:
        return "".join(p for p in PHASES if getattr(self, p))

    def __iter__(self):
        return (p for p in PHASES if getattr(self, p))

    def __contains__(self, ph: str) -> bool:
        return getattr(self, ph)

    def __len__(self) -> int:
        return sum((self.a, self.b, self.c))

    def indices(self) -> list[int]:
        return [PHASE_INDEX[p] for p in self]

    def issubset(self, other: "PhaseSet") -> bool:
        return all(p in other for p in self)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: PhaseSet
    base_kv: float  # line-to-neutral kV

    def __post_init__(self):
        if not (self.base_kv > 0):
            raise ValueError(f"bus {self.id}: base_kv must be positive")


@dataclass(frozen=True)
class TransformerParams:
    """Grounded-wye / grounded-wye transformer: per-phase ideal turns ratio
    (primary pu volts / secondary pu volts) plus a per-phase series impedance
    on the secondary side, in pu on the system base."""

    ratio: tuple[float, float, float]
    z_series: tuple[complex, complex, complex]


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: PhaseSet
    kind: str = "line"  # line | transformer | switch
    z_matrix: np.ndarray = None  # 3x3 complex, pu (total, already scaled by length)
    shunt_b: np.ndarray = None  # 3x3 susceptance, pu (total)
    length: float = 1.0
    switch_state: str = "closed"  # switches only
    transformer_params: TransformerParams | None = None

    def __post_init__(self):
        if self.z_matrix is None:
            object.__setattr__(self, "z_matrix", np.zeros((3, 3), complex))
        if self.shunt_b is None:
            object.__setattr__(self, "shunt_b", np.zeros((3, 3), float))
        self.z_matrix.setflags(write=False)
        self.shunt_b.setflags(write=False)

    @property
    def closed(self) -> bool:
        return self.kind != "switch" or self.switch_state == "closed"

    def z_submatrix(self) -> np.ndarray:
        idx = self.phases.indices()
        return self.z_matrix[np.ix_(idx, idx)]


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    phases: PhaseSet
    connection: str = "wye"  # wye | delta
    model: str = "constant_pq"  # constant_pq | constant_z | constant_i | zip
    s_rated: tuple[complex, complex, complex] = (0j, 0j, 0j)  # pu per phase (wye)
    # or per delta branch ab,bc,ca
    v_rated: float = 1.0
    zip_weights: tuple[float, float, float] = (0.0, 0.0, 1.0)  # (w_z, w_i, w_p)

    def scaled(self, k: float) -> "Load":
        return replace(self, s_rated=tuple(s * k for s in self.s_rated))


@dataclass(frozen=True)
class Capacitor:
    id: str
    bus: str
    phases: PhaseSet
    connection: str = "wye"
    kvar_pu: tuple[float, float, float] = (0.0, 0.0, 0.0)
    v_rated: float = 1.0


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...]
    capacitors: tuple[Capacitor, ...]
    source_bus: str
    source_voltage: tuple[complex, complex, complex]
    s_base_kva: float = 1000.0

    _bus_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b.id: b for b in self.buses})

    def bus(self, bus_id: str) -> Bus:
        return self._bus_index[bus_id]

    def has_bus(self, bus_id: str) -> bool:
        return bus_id in self._bus_index

    def with_loads(self, loads) -> "NetworkModel":
        return replace(self, loads=tuple(loads))

    def with_switch_states(self, states: dict[str, str]) -> "NetworkModel":
        branches = tuple(
            replace(br, switch_state=states[br.id]) if br.id in states else br
            for br in self.branches
        )
        return replace(self, branches=branches)


# ---------------------------------------------------------------------------
# validation

def validate_network(net: NetworkModel) -> list[str]:
    """Collect every invariant violation as a human-readable string.

    An empty list means the network is well formed and connected.
    """
    out = []
    seen = set()
    for b in net.buses:
        if b.id in seen:
            out.append(f"duplicate bus id {b.id!r}")
        seen.add(b.id)
        if not (b.base_kv > 0):
            out.append(f"bus {b.id}: base_kv must be positive")

    comp_ids = set()
    for group in (net.branches, net.loads, net.capacitors):
        for item in group:
            if item.id in comp_ids:
                out.append(f"duplicate component id {item.id!r}")
            comp_ids.add(item.id)

    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if not net.has_bus(end):
                out.append(f"branch {br.id}: dangling branch endpoint {end!r}")
        if br.length < 0:
            out.append(f"branch {br.id}: negative length")
        if not np.allclose(br.z_matrix, br.z_matrix.T):
            out.append(f"branch {br.id}: z_matrix not symmetric")
        absent = [i for i in range(3) if PHASES[i] not in br.phases]
        if absent and (np.any(br.z_matrix[absent, :]) or np.any(br.z_matrix[:, absent])):
            out.append(f"branch {br.id}: z_matrix nonzero on absent phase")
        if br.kind == "line":
            for i in br.phases.indices():
                if br.z_matrix[i, i] == 0:
                    out.append(f"branch {br.id}: zero series impedance on phase {PHASES[i]}")
        if br.kind == "transformer" and br.transformer_params is None:
            out.append(f"branch {br.id}: transformer without parameters")
        for end in (br.from_bus, br.to_bus):
            if net.has_bus(end) and not br.phases.issubset(net.bus(end).phases):
                out.append(f"branch {br.id}: phases not present on bus {end!r}")

    for ld in net.loads:
        if not net.has_bus(ld.bus):
            out.append(f"load {ld.id}: unknown bus {ld.bus!r}")
        else:
            if not ld.phases.issubset(net.bus(ld.bus).phases):
                out.append(f"load {ld.id}: phases not present on bus {ld.bus!r}")
        if ld.connection == "delta" and len(ld.phases) < 2:
            out.append(f"load {ld.id}: delta connection needs at least two phases")
        if ld.model == "zip":
            w = ld.zip_weights
            if any(x < 0 for x in w):
                out.append(f"load {ld.id}: ZIP weights must be nonnegative")
            if abs(sum(w) - 1.0) > 1e-9:
                out.append(f"load {ld.id}: ZIP weights must sum to 1")

    for cap in net.capacitors:
        if not net.has_bus(cap.bus):
            out.append(f"capacitor {cap.id}: unknown bus {cap.bus!r}")
        elif not cap.phases.issubset(net.bus(cap.bus).phases):
            out.append(f"capacitor {cap.id}: phases not present on bus {cap.bus!r}")
        if any(q < 0 for q in cap.kvar_pu):
            out.append(f"capacitor {cap.id}: negative kvar")

    if not net.has_bus(net.source_bus):
        out.append(f"unknown source bus {net.source_bus!r}")

    # connectivity over closed branches
    if net.buses and net.has_bus(net.source_bus):
        adj = {b.id: [] for b in net.buses}
        for br in net.branches:
            if br.closed and net.has_bus(br.from_bus) and net.has_bus(br.to_bus):
                adj[br.from_bus].append(br.to_bus)
                adj[br.to_bus].append(br.from_bus)
        reached = {net.source_bus}
        stack = [net.source_bus]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in reached:
                    reached.add(nb)
                    stack.append(nb)
        for b in net.buses:
            if b.id not in reached:
                out.append(f"bus {b.id}: not connected to source")

    return out


# ---------------------------------------------------------------------------
# component current models (Table-style load laws)

def _check_voltage(v: complex, what: str):
    if abs(v) < ZERO_VOLTAGE_FLOOR:
        raise ZeroVoltage(f"{what}: |V| below {ZERO_VOLTAGE_FLOOR} pu")


def _wye_component_currents(model, s_rated, v_rated, v, phases):
    """Per-phase line currents of a wye load for one elementary model."""
    i = np.zeros(3, complex)
    for p in phases.indices():
        s = s_rated[p]
        if s == 0:
            continue
        _check_voltage(v[p], f"phase {PHASES[p]}")
        if model == "constant_pq":
            i[p] = (s / v[p]).conjugate()
        elif model == "constant_z":
            z = abs(v_rated) ** 2 / s.conjugate()
            i[p] = v[p] / z
        elif model == "constant_i":
            mag = abs(s) / abs(v_rated)
            delta = cmath.phase(v[p])
            theta = cmath.phase(s)  # power-factor angle from rated power
            i[p] = cmath.rect(mag, delta - theta)
        else:
            raise ValueError(f"unknown load model {model!r}")
    return i


def _delta_component_currents(model, s_rated, v_rated, v, phases):
    """Delta-branch currents mapped onto line currents (ab, bc, ca order)."""
    i_line = np.zeros(3, complex)
    vr_pp = abs(v_rated) * math.sqrt(3.0)
    for k, (p, q) in enumerate(DELTA_PAIRS):
        if p not in phases or q not in phases:
            continue
        s = s_rated[k]
        if s == 0:
            continue
        vpq = v[PHASE_INDEX[p]] - v[PHASE_INDEX[q]]
        _check_voltage(vpq, f"pair {p}{q}")
        if model == "constant_pq":
            i_br = (s / vpq).conjugate()
        elif model in ("constant_z", "constant_i"):
            # Table rule: constant-I delta uses the constant-impedance form
            z = vr_pp ** 2 / s.conjugate()
            i_br = vpq / z
        else:
            raise ValueError(f"unknown load model {model!r}")
        i_line[PHASE_INDEX[p]] += i_br
        i_line[PHASE_INDEX[q]] -= i_br
    return i_line


def load_current(load: Load, v) -> np.ndarray:
    """Line currents drawn by a load at bus voltages ``v`` (length-3 complex).

    For ZIP loads the three elementary currents are evaluated independently
    and combined with the (w_z, w_i, w_p) weights.
    """
    v = np.asarray(v, complex)
    comp = _delta_component_currents if load.connection == "delta" else _wye_component_currents
    if load.model == "zip":
        wz, wi, wp = load.zip_weights
        i = np.zeros(3, complex)
        if wz:
            i = i + wz * comp("constant_z", load.s_rated, load.v_rated, v, load.phases)
        if wi:
            i = i + wi * comp("constant_i", load.s_rated, load.v_rated, v, load.phases)
        if wp:
            i = i + wp * comp("constant_pq", load.s_rated, load.v_rated, v, load.phases)
        return i
    return comp(load.model, load.s_rated, load.v_rated, v, load.phases)


def capacitor_current(cap: Capacitor, v) -> np.ndarray:
    """Constant-impedance shunt capacitor current, wye or delta."""
    v = np.asarray(v, complex)
    s = tuple(-1j * q for q in cap.kvar_pu)
    i = np.zeros(3, complex)
    if cap.connection == "delta":
        vr_pp = abs(cap.v_rated) * math.sqrt(3.0)
        for k, (p, q) in enumerate(DELTA_PAIRS):
            if p not in cap.phases or q not in cap.phases or s[k] == 0:
                continue
            z = vr_pp ** 2 / s[k].conjugate()
            i_br = (v[PHASE_INDEX[p]] - v[PHASE_INDEX[q]]) / z
            i[PHASE_INDEX[p]] += i_br
            i[PHASE_INDEX[q]] -= i_br
        return i
    for p in cap.phases.indices():
        if s[p] == 0:
            continue
        z = abs(cap.v_rated) ** 2 / s[p].conjugate()
        i[p] = v[p] / z
    return i


def lump_distributed_load(branch: Branch, load: Load):
    """Replace a load uniformly distributed along ``branch`` by two lumped
    loads: 2/3 of the power at a synthetic bus one fourth of the way from
    the sending end, 1/3 at the receiving bus.  The branch is split into two
    series segments with impedances proportional to their lengths.

    Returns (segment_1, segment_2, load_at_tap, load_at_receiving, tap_bus_id).
    """
    if branch.kind != "line":
        raise ValueError("distributed loads only apply to line branches")
    tap_id = f"{branch.to_bus}__tap_{branch.id}"
    z1 = branch.z_matrix * 0.25
    z2 = branch.z_matrix * 0.75
    seg1 = replace(branch, id=f"{branch.id}__1", to_bus=tap_id,
                   z_matrix=z1, shunt_b=branch.shunt_b * 0.25,
                   length=branch.length * 0.25)
    seg2 = replace(branch, id=f"{branch.id}__2", from_bus=tap_id,
                   z_matrix=z2, shunt_b=branch.shunt_b * 0.75,
                   length=branch.length * 0.75)
    load_tap = replace(load, id=f"{load.id}__tap", bus=tap_id,
                       s_rated=tuple(s * (2.0 / 3.0) for s in load.s_rated))
    load_recv = replace(load, id=f"{load.id}__recv", bus=branch.to_bus,
                        s_rated=tuple(s * (1.0 / 3.0) for s in load.s_rated))
    return seg1, seg2, load_tap, load_recv, tap_id
