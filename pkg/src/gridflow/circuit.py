"""Line-oriented circuit description format (`.ckt`) and loadshape CSVs.

Each non-comment line declares one component as ``kind key=value ...``.
Physical units (kV, kW, kvar, ohms) are converted to per-unit on load;
the serializer emits the per-unit form with full float precision so that
parse(serialize(net)) is exact.
"""

from __future__ import annotations

import cmath
import math

import numpy as np

from .network import (
    Branch,
    Bus,
    Capacitor,
    Load,
    NetworkModel,
    PhaseSet,
    TransformerParams,
    DELTA_PAIRS,
    validate_network,
)


class CircuitSyntaxError(Exception):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class SemanticError(Exception):
    def __init__(self, component: str, reason: str):
        super().__init__(f"{component}: {reason}")
        self.component = component
        self.reason = reason


class FormatError(Exception):
    pass


def _tokenize(line: str):
    """Split ``kind key=value ...`` respecting double-quoted values."""
    parts = []
    buf = ""
    quoted = False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        elif ch.isspace() and not quoted:
            if buf:
                parts.append(buf)
                buf = ""
        else:
            buf += ch
    if buf:
        parts.append(buf)
    return parts, quoted


def _parse_props(tokens, line_no):
    props = {}
    for tok in tokens:
        if "=" not in tok:
            raise CircuitSyntaxError(line_no, f"expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        if not key:
            raise CircuitSyntaxError(line_no, f"empty key in {tok!r}")
        if key in props:
            raise CircuitSyntaxError(line_no, f"duplicate key {key!r}")
        props[key.lower()] = val
    return props


def _floats(val: str) -> list[float]:
    return [float(x) for x in val.split(",") if x != ""]


def _complexes(val: str) -> list[complex]:
    return [complex(x) for x in val.split(",") if x != ""]


def _triangle_matrix(val: str, line_no: int) -> np.ndarray:
    """Lower-triangle rows separated by '|', entries by ','."""
    rows = [_floats(r) for r in val.split("|")]
    if [len(r) for r in rows] != list(range(1, len(rows) + 1)):
        raise CircuitSyntaxError(line_no, "matrix must be lower-triangular rows 1,2,3")
    n = len(rows)
    m = np.zeros((n, n))
    for i, row in enumerate(rows):
        for j, x in enumerate(row):
            m[i, j] = x
            m[j, i] = x
    return m


def _expand_to_phases(m: np.ndarray, phases: PhaseSet) -> np.ndarray:
    idx = phases.indices()
    if m.shape[0] != len(idx):
        raise ValueError(f"matrix size {m.shape[0]} does not match phases {phases.to_string()}")
    out = np.zeros((3, 3), m.dtype)
    out[np.ix_(idx, idx)] = m
    return out


def _sequence_to_phase(z1: complex, z0: complex, phases: PhaseSet) -> np.ndarray:
    """Expand positive/zero-sequence impedances to a 3x3 phase matrix."""
    zs = (z0 + 2.0 * z1) / 3.0
    zm = (z0 - z1) / 3.0
    out = np.zeros((3, 3), complex)
    idx = phases.indices()
    for i in idx:
        for j in idx:
            out[i, j] = zs if i == j else zm
    return out


def _phase_tuple(values: list[float], phases: PhaseSet, what: str, line_no: int):
    """Map a comma list onto the declared phases (absent phases zero)."""
    if len(values) == 1:
        values = values * len(phases)
    if len(values) != len(phases):
        raise CircuitSyntaxError(line_no, f"{what}: expected {len(phases)} values")
    out = [0.0, 0.0, 0.0]
    for i, p in zip(phases.indices(), range(len(values))):
        out[i] = values[p]
    return tuple(out)


def _delta_tuple(values: list[float], phases: PhaseSet, what: str, line_no: int):
    """Map a comma list onto present delta pairs (ab, bc, ca order)."""
    pairs = [k for k, (p, q) in enumerate(DELTA_PAIRS) if p in phases and q in phases]
    if len(phases) == 2:
        pairs = pairs[:1]
    if len(values) == 1:
        values = values * len(pairs)
    if len(values) != len(pairs):
        raise CircuitSyntaxError(line_no, f"{what}: expected {len(pairs)} values")
    out = [0.0, 0.0, 0.0]
    for k, v in zip(pairs, values):
        out[k] = v
    return tuple(out)


def parse_circuit(text: str, validate: bool = True) -> NetworkModel:
    """Parse circuit text into a validated per-unit NetworkModel.

    With ``validate=False`` the model is returned even when it has
    semantic violations, so callers can report them all at once."""
    s_base_kva = 1000.0
    buses: list[Bus] = []
    bus_map: dict[str, Bus] = {}
    branches: list[Branch] = []
    loads: list[Load] = []
    caps: list[Capacitor] = []
    source = None
    ids = set()

    def fresh_id(props, line_no, kind):
        cid = props.get("id")
        if cid is None:
            raise CircuitSyntaxError(line_no, f"{kind} needs an id")
        if cid in ids:
            raise CircuitSyntaxError(line_no, f"redefinition of id {cid!r}")
        ids.add(cid)
        return cid

    def z_base(bus_id: str, line_no: int) -> float:
        if bus_id not in bus_map:
            raise CircuitSyntaxError(line_no, f"unknown bus {bus_id!r}")
        kv = bus_map[bus_id].base_kv
        return kv * kv * 1000.0 / s_base_kva

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("//"):
            continue
        tokens, unclosed = _tokenize(line)
        if unclosed:
            raise CircuitSyntaxError(line_no, "unterminated quote")
        kind = tokens[0].lower()
        try:
            props = _parse_props(tokens[1:], line_no)
        except CircuitSyntaxError:
            raise
        try:
            if kind == "set":
                if "sbase_kva" in props:
                    s_base_kva = float(props["sbase_kva"])
                continue

            if kind == "bus":
                cid = fresh_id(props, line_no, "bus")
                bus = Bus(cid, PhaseSet.from_string(props.get("phases", "abc")),
                          float(props["basekv"]))
                buses.append(bus)
                bus_map[cid] = bus
                continue

            if kind == "line":
                cid = fresh_id(props, line_no, "line")
                phases = PhaseSet.from_string(props.get("phases", "abc"))
                length = float(props.get("length", 1.0))
                if "zmatrix_pu" in props:
                    zfull = np.array(_complexes(props["zmatrix_pu"]), complex).reshape(3, 3)
                    bfull = (np.array(_floats(props["bmatrix_pu"]), float).reshape(3, 3)
                             if "bmatrix_pu" in props else np.zeros((3, 3)))
                else:
                    if "rmatrix" in props:
                        r = _expand_to_phases(_triangle_matrix(props["rmatrix"], line_no), phases)
                        x = _expand_to_phases(_triangle_matrix(props["xmatrix"], line_no), phases)
                        z_ohm = (r + 1j * x) * length
                    else:
                        z1 = complex(float(props["r1"]), float(props["x1"]))
                        z0 = complex(float(props.get("r0", props["r1"])),
                                     float(props.get("x0", props["x1"])))
                        z_ohm = _sequence_to_phase(z1, z0, phases) * length
                    zb = z_base(props["to"], line_no)
                    zfull = z_ohm / zb
                    bfull = np.zeros((3, 3))
                    if "b_us" in props:  # total shunt susceptance, microsiemens/length
                        b = _expand_to_phases(_triangle_matrix(props["b_us"], line_no), phases)
                        bfull = b * 1e-6 * length * zb
                branches.append(Branch(cid, props["from"], props["to"], phases,
                                       kind="line", z_matrix=zfull, shunt_b=bfull,
                                       length=length))
                continue

            if kind == "transformer":
                cid = fresh_id(props, line_no, "transformer")
                phases = PhaseSet.from_string(props.get("phases", "abc"))
                conn = props.get("conn", "gwye-gwye")
                if conn != "gwye-gwye":
                    raise SemanticError(cid, f"unsupported transformer connection {conn!r}")
                if "z_pu" in props:
                    zs = _complexes(props["z_pu"])
                    if len(zs) == 1:
                        zs = zs * 3
                    ratio = tuple(_floats(props.get("ratio", "1,1,1")))
                    if len(ratio) == 1:
                        ratio = ratio * 3
                else:
                    kva = float(props["kva"])
                    z_own = complex(float(props.get("rpct", 0.0)),
                                    float(props["xpct"])) / 100.0
                    z_sys = z_own * (3.0 * s_base_kva / kva)
                    zs = [z_sys] * 3
                    kv_from = float(props["kv_from"])
                    kv_to = float(props["kv_to"])
                    if props["from"] not in bus_map or props["to"] not in bus_map:
                        raise CircuitSyntaxError(line_no, "transformer endpoints must be declared first")
                    n = kv_from / kv_to
                    t = n * bus_map[props["to"]].base_kv / bus_map[props["from"]].base_kv
                    ratio = (t, t, t)
                zmat = np.zeros((3, 3), complex)
                for i in phases.indices():
                    zmat[i, i] = zs[i] if len(zs) == 3 else zs[0]
                branches.append(Branch(cid, props["from"], props["to"], phases,
                                       kind="transformer", z_matrix=zmat,
                                       transformer_params=TransformerParams(
                                           ratio=tuple(ratio), z_series=tuple(zmat.diagonal()))))
                continue

            if kind == "switch":
                cid = fresh_id(props, line_no, "switch")
                phases = PhaseSet.from_string(props.get("phases", "abc"))
                state = props.get("state", "closed")
                if state not in ("open", "closed"):
                    raise CircuitSyntaxError(line_no, f"bad switch state {state!r}")
                branches.append(Branch(cid, props["from"], props["to"], phases,
                                       kind="switch", switch_state=state))
                continue

            if kind == "load":
                cid = fresh_id(props, line_no, "load")
                phases = PhaseSet.from_string(props.get("phases", "abc"))
                conn = props.get("conn", "wye")
                model = {"pq": "constant_pq", "z": "constant_z", "i": "constant_i",
                         "zip": "zip"}.get(props.get("model", "pq"))
                if model is None:
                    raise CircuitSyntaxError(line_no, f"bad load model {props.get('model')!r}")
                mapper = _delta_tuple if conn == "delta" else _phase_tuple
                if "p_pu_raw" in props:
                    p = tuple(_floats(props["p_pu_raw"]))
                    q = tuple(_floats(props["q_pu_raw"]))
                elif "p_pu" in props:
                    p = mapper(_floats(props["p_pu"]), phases, "p_pu", line_no)
                    q = mapper(_floats(props.get("q_pu", "0")), phases, "q_pu", line_no)
                else:
                    p = mapper([v / s_base_kva for v in _floats(props["kw"])],
                               phases, "kw", line_no)
                    q = mapper([v / s_base_kva for v in _floats(props.get("kvar", "0"))],
                               phases, "kvar", line_no)
                zipw = tuple(_floats(props["zipw"])) if "zipw" in props else (0.0, 0.0, 1.0)
                if len(zipw) != 3:
                    raise CircuitSyntaxError(line_no, "zipw needs three weights")
                loads.append(Load(cid, props["bus"], phases, connection=conn, model=model,
                                  s_rated=tuple(complex(pp, qq) for pp, qq in zip(p, q)),
                                  v_rated=float(props.get("vpu", 1.0)),
                                  zip_weights=zipw))
                continue

            if kind == "capacitor":
                cid = fresh_id(props, line_no, "capacitor")
                phases = PhaseSet.from_string(props.get("phases", "abc"))
                conn = props.get("conn", "wye")
                mapper = _delta_tuple if conn == "delta" else _phase_tuple
                if "kvar_pu_raw" in props:
                    kvar = tuple(_floats(props["kvar_pu_raw"]))
                elif "kvar_pu" in props:
                    kvar = mapper(_floats(props["kvar_pu"]), phases, "kvar_pu", line_no)
                else:
                    kvar = mapper([v / s_base_kva for v in _floats(props["kvar"])],
                                  phases, "kvar", line_no)
                caps.append(Capacitor(cid, props["bus"], phases, connection=conn,
                                      kvar_pu=kvar, v_rated=float(props.get("vpu", 1.0))))
                continue

            if kind == "source":
                if source is not None:
                    raise CircuitSyntaxError(line_no, "duplicate source declaration")
                pu = float(props.get("pu", 1.0))
                ang = math.radians(float(props.get("angle_deg", 0.0)))
                source = (props["bus"],
                          tuple(cmath.rect(pu, ang + shift)
                                for shift in (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)))
                continue

            raise CircuitSyntaxError(line_no, f"unknown component kind {kind!r}")
        except KeyError as exc:
            raise CircuitSyntaxError(line_no, f"missing property {exc.args[0]!r}") from None
        except ValueError as exc:
            raise CircuitSyntaxError(line_no, str(exc)) from None

    if source is None:
        raise SemanticError("source", "no source declaration")

    net = NetworkModel(buses=tuple(buses), branches=tuple(branches), loads=tuple(loads),
                       capacitors=tuple(caps), source_bus=source[0],
                       source_voltage=source[1], s_base_kva=s_base_kva)
    if validate:
        violations = validate_network(net)
        if violations:
            raise SemanticError(violations[0].split(":")[0],
                                "; ".join(violations))
    return net


def parse_circuit_file(path, validate: bool = True) -> NetworkModel:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_circuit(fh.read(), validate=validate)


# ---------------------------------------------------------------------------
# serialization (per-unit canonical form, exact float round-trip)

def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_c(z: complex) -> str:
    return f"({_fmt(z.real)}{'+' if z.imag >= 0 else '-'}{_fmt(abs(z.imag))}j)"


def serialize_circuit(net: NetworkModel) -> str:
    out = [f"set sbase_kva={_fmt(net.s_base_kva)}"]
    for b in net.buses:
        out.append(f"bus id={b.id} phases={b.phases.to_string()} basekv={_fmt(b.base_kv)}")
    va = net.source_voltage[0]
    out.append(f"source bus={net.source_bus} pu={_fmt(abs(va))} "
               f"angle_deg={_fmt(math.degrees(cmath.phase(va)))}")
    for br in net.branches:
        common = f"id={br.id} from={br.from_bus} to={br.to_bus} phases={br.phases.to_string()}"
        if br.kind == "line":
            zm = ",".join(_fmt_c(z) for z in br.z_matrix.ravel())
            extra = f" zmatrix_pu={zm}"
            if np.any(br.shunt_b):
                extra += " bmatrix_pu=" + ",".join(_fmt(x) for x in br.shunt_b.ravel())
            out.append(f"line {common} length={_fmt(br.length)}{extra}")
        elif br.kind == "transformer":
            tp = br.transformer_params
            out.append(f"transformer {common} conn=gwye-gwye "
                       f"ratio={','.join(_fmt(t) for t in tp.ratio)} "
                       f"z_pu={','.join(_fmt_c(z) for z in tp.z_series)}")
        else:
            out.append(f"switch {common} state={br.switch_state}")
    model_tag = {"constant_pq": "pq", "constant_z": "z", "constant_i": "i", "zip": "zip"}
    for ld in net.loads:
        p = ",".join(_fmt(s.real) for s in ld.s_rated)
        q = ",".join(_fmt(s.imag) for s in ld.s_rated)
        extra = f" zipw={','.join(_fmt(w) for w in ld.zip_weights)}" if ld.model == "zip" else ""
        out.append(f"load id={ld.id} bus={ld.bus} phases={ld.phases.to_string()} "
                   f"conn={ld.connection} model={model_tag[ld.model]} "
                   f"p_pu_raw={p} q_pu_raw={q} vpu={_fmt(ld.v_rated)}{extra}")
    for cap in net.capacitors:
        out.append(f"capacitor id={cap.id} bus={cap.bus} phases={cap.phases.to_string()} "
                   f"conn={cap.connection} "
                   f"kvar_pu_raw={','.join(_fmt(v) for v in cap.kvar_pu)} vpu={_fmt(cap.v_rated)}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# loadshapes

def parse_loadshape(text: str, name: str = "loadshape") -> list[float]:
    """One multiplier per row; an optional non-numeric header row is skipped."""
    values = []
    rows = [r.strip() for r in text.splitlines()]
    rows = [r for r in rows if r]
    if not rows:
        raise FormatError("empty loadshape")
    start = 0
    try:
        float(rows[0].split(",")[0])
    except ValueError:
        start = 1
    for i, row in enumerate(rows[start:], start=start + 1):
        cell = row.split(",")[0]
        try:
            v = float(cell)
        except ValueError:
            raise FormatError(f"{name} row {i}: non-numeric value {cell!r}") from None
        if not math.isfinite(v) or v < 0:
            raise FormatError(f"{name} row {i}: multiplier must be finite and >= 0")
        values.append(v)
    if not values:
        raise FormatError("loadshape has no data rows")
    return values


def parse_loadshape_file(path) -> list[float]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_loadshape(fh.read(), name=str(path))
