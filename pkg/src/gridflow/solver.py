"""Steady-state solvers for three-phase unbalanced networks.

Two independent algorithms over the same network model:

* forward-backward sweep (radial networks): backward pass aggregates branch
  currents leaves-to-source, forward pass propagates voltages source-to-leaves
  through per-component rules (line drop, transformer ratio + series drop).
* current-injection fixed point (general networks): load currents are
  recomputed from the latest voltages and the reduced admittance system is
  re-solved with a cached LU factorization until the voltage settles.

Closed ideal switches merge their endpoint buses before either solver runs;
open switches are removed.
"""

from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .network import (
    Branch,
    NetworkModel,
    PHASES,
    PHASE_INDEX,
    capacitor_current,
    load_current,
)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200


class SolverError(Exception):
    pass


class NotRadial(SolverError):
    def __init__(self, extra_edges):
        super().__init__(f"network is not radial; non-tree branches: {sorted(extra_edges)}")
        self.extra_edges = list(extra_edges)


class Diverged(SolverError):
    pass


class SingularBranch(SolverError):
    pass


class SingularSystem(SolverError):
    pass


# ---------------------------------------------------------------------------
# switch resolution

class ResolvedNetwork:
    """Network with switches resolved: open dropped, closed merged.

    Buses are grouped under a leader; all electrical computation runs on the
    leader graph and is mapped back to member buses afterwards.
    """

    def __init__(self, net: NetworkModel):
        self.net = net
        parent = {b.id: b.id for b in net.buses}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        self.closed_switches = []
        for br in net.branches:
            if br.kind == "switch":
                if br.switch_state == "closed":
                    self.closed_switches.append(br)
                    parent[find(br.to_bus)] = find(br.from_bus)
        self.leader = {b.id: find(b.id) for b in net.buses}

        # leader order follows bus declaration order
        self.groups: dict[str, list[str]] = {}
        for b in net.buses:
            self.groups.setdefault(self.leader[b.id], []).append(b.id)

        # group phases = union of member phases
        self.group_phases: dict[str, list[int]] = {}
        for g, members in self.groups.items():
            present = set()
            for m in members:
                present.update(net.bus(m).phases.indices())
            self.group_phases[g] = sorted(present)

        self.branches = [br for br in net.branches if br.kind != "switch"]
        self.source_group = self.leader[net.source_bus]

        # node index over (group, phase)
        self.node_index: dict[tuple[str, int], int] = {}
        for g in self.groups:
            for p in self.group_phases[g]:
                self.node_index[(g, p)] = len(self.node_index)
        self.n_nodes = len(self.node_index)
        self.source_nodes = [self.node_index[(self.source_group, p)]
                             for p in self.group_phases[self.source_group]]

        # loads/capacitors per group
        self.group_loads: dict[str, list] = {g: [] for g in self.groups}
        for ld in net.loads:
            self.group_loads[self.leader[ld.bus]].append(ld)
        self.group_caps: dict[str, list] = {g: [] for g in self.groups}
        for cap in net.capacitors:
            self.group_caps[self.leader[cap.bus]].append(cap)

        # line-charging shunt halves per group, as 3x3 admittance accumulators
        self.group_shunt = {g: np.zeros((3, 3), complex) for g in self.groups}
        for br in self.branches:
            if np.any(br.shunt_b):
                half = 1j * br.shunt_b / 2.0
                self.group_shunt[self.leader[br.from_bus]] += half
                self.group_shunt[self.leader[br.to_bus]] += half

    def endpoint_groups(self, br: Branch):
        return self.leader[br.from_bus], self.leader[br.to_bus]

    def consumed_current(self, volt: dict[str, np.ndarray],
                         loads_override=None) -> dict[str, np.ndarray]:
        """Per-group length-3 current consumed by loads, capacitors and line
        charging at the current voltages."""
        out = {g: np.zeros(3, complex) for g in self.groups}
        if loads_override is None:
            for g, lds in self.group_loads.items():
                for ld in lds:
                    out[g] += load_current(ld, volt[g])
        else:
            for ld in loads_override:
                g = self.leader[ld.bus]
                out[g] += load_current(ld, volt[g])
        for g, caps in self.group_caps.items():
            for cap in caps:
                out[g] += capacitor_current(cap, volt[g])
        for g, ysh in self.group_shunt.items():
            if np.any(ysh):
                out[g] += ysh @ volt[g]
        return out


@dataclass
class SweepOrder:
    """Branch visit order for the sweeps: forward is source-to-leaves."""
    forward: list[str]
    backward: list[str] = field(init=False)
    parent_of: dict[str, str] = None  # child group -> branch id

    def __post_init__(self):
        self.backward = list(reversed(self.forward))


def order_branches(net: NetworkModel, resolved: ResolvedNetwork | None = None) -> SweepOrder:
    """BFS tree of the resolved network from the source; NotRadial on loops."""
    r = resolved or ResolvedNetwork(net)
    adj: dict[str, list] = {g: [] for g in r.groups}
    for br in r.branches:
        gf, gt = r.endpoint_groups(br)
        adj[gf].append((gt, br))
        adj[gt].append((gf, br))
    seen = {r.source_group}
    order = []
    used = set()
    parent_of = {}
    queue = [r.source_group]
    while queue:
        g = queue.pop(0)
        for nb, br in adj[g]:
            if br.id in used:
                continue
            if nb in seen:
                continue
            used.add(br.id)
            seen.add(nb)
            parent_of[nb] = br.id
            order.append(br.id)
            queue.append(nb)
    extra = {br.id for br in r.branches} - used
    if extra:
        raise NotRadial(extra)
    return SweepOrder(forward=order, parent_of=parent_of)


# ---------------------------------------------------------------------------
# solution container

@dataclass
class PFSolution:
    bus_voltage: dict[tuple[str, str], complex]       # (bus, phase) -> V pu
    bus_current: dict[tuple[str, str], complex]       # injected/consumed current
    branch_current: dict[str, np.ndarray]             # branch id -> length-3
    branch_loss: dict[str, complex]                   # branch id -> complex pu
    iterations: int
    converged: bool

    def voltage_array(self, net: NetworkModel) -> np.ndarray:
        return np.array([self.bus_voltage[(b.id, p)]
                         for b in net.buses for p in b.phases])

    def min_voltage(self) -> float:
        return min(abs(v) for v in self.bus_voltage.values())


def _flat_start(r: ResolvedNetwork) -> dict[str, np.ndarray]:
    vspec = np.asarray(r.net.source_voltage, complex)
    return {g: vspec.copy() for g in r.groups}


def _branch_current_from_v(br: Branch, vf: np.ndarray, vt: np.ndarray) -> np.ndarray:
    """Series current (receiving side) per phase from endpoint voltages."""
    idx = [PHASE_INDEX[p] for p in br.phases]
    i = np.zeros(3, complex)
    if br.kind == "transformer":
        tp = br.transformer_params
        for p in idx:
            z = tp.z_series[p]
            if z == 0:
                raise SingularBranch(f"branch {br.id}: zero transformer impedance")
            i[p] = (vf[p] / tp.ratio[p] - vt[p]) / z
        return i
    zsub = br.z_submatrix()
    try:
        ysub = np.linalg.inv(zsub)
    except np.linalg.LinAlgError:
        raise SingularBranch(f"branch {br.id}: singular impedance submatrix") from None
    i[idx] = ysub @ (vf[idx] - vt[idx])
    return i


def _branch_loss(br: Branch, vf: np.ndarray, vt: np.ndarray, i_to: np.ndarray) -> complex:
    if br.kind == "switch":
        return 0j
    idx = [PHASE_INDEX[p] for p in br.phases]
    if br.kind == "transformer":
        t = br.transformer_params.ratio
        drop = np.array([vf[p] / t[p] - vt[p] for p in idx])
    else:
        drop = vf[idx] - vt[idx]
    return complex(np.sum(drop * np.conj(i_to[idx])))


def _package_solution(net: NetworkModel, r: ResolvedNetwork,
                      volt: dict[str, np.ndarray],
                      branch_to_current: dict[str, np.ndarray],
                      iterations: int, converged: bool,
                      loads_override=None) -> PFSolution:
    loads = net.loads if loads_override is None else tuple(loads_override)

    bus_voltage = {}
    for b in net.buses:
        for p in b.phases:
            bus_voltage[(b.id, p)] = complex(volt[r.leader[b.id]][PHASE_INDEX[p]])

    # per original bus: current consumed by attached loads/capacitors
    bus_cur = {b.id: np.zeros(3, complex) for b in net.buses}
    for ld in loads:
        bus_cur[ld.bus] += load_current(ld, volt[r.leader[ld.bus]])
    for cap in net.capacitors:
        bus_cur[cap.bus] += capacitor_current(cap, volt[r.leader[cap.bus]])

    # closed-switch currents via KCL at the switch's to_bus
    incident: dict[str, list] = {b.id: [] for b in net.buses}
    for br in net.branches:
        if br.kind != "switch":
            incident[br.from_bus].append((br, +1))
            incident[br.to_bus].append((br, -1))
    for sw in r.closed_switches:
        i = bus_cur[sw.to_bus].copy()
        gsh = r.group_shunt[r.leader[sw.to_bus]]
        # shunts live on the merged group; attribute them to the leader only
        for br, sign in incident[sw.to_bus]:
            cur = branch_to_current[br.id]
            if sign > 0:  # current leaves to_bus into the branch (from side)
                if br.kind == "transformer":
                    t = br.transformer_params.ratio
                    i += np.array([cur[k] / t[k] for k in range(3)])
                else:
                    i += cur
            # branches delivering into to_bus other than the switch itself
            # would require a full KCL ordering; desk feeders have a single
            # feed through the switch
        branch_to_current[sw.id] = i

    # source supply current: from-side currents of tree branches at source
    # group plus local consumption
    src_group = r.source_group
    supply = np.zeros(3, complex)
    for br in r.branches:
        gf, gt = r.endpoint_groups(br)
        cur = branch_to_current[br.id]
        if gf == src_group:
            if br.kind == "transformer":
                t = br.transformer_params.ratio
                supply += np.array([cur[k] / t[k] for k in range(3)])
            else:
                supply += cur
        elif gt == src_group:
            supply -= cur
    for m in r.groups[src_group]:
        supply += bus_cur[m]

    bus_current = {}
    for b in net.buses:
        vals = supply if b.id == net.source_bus else bus_cur[b.id]
        for p in b.phases:
            bus_current[(b.id, p)] = complex(vals[PHASE_INDEX[p]])

    branch_loss = {}
    for br in net.branches:
        if br.kind == "switch":
            branch_loss[br.id] = 0j
            continue
        vf = volt[r.leader[br.from_bus]]
        vt = volt[r.leader[br.to_bus]]
        branch_loss[br.id] = _branch_loss(br, vf, vt, branch_to_current[br.id])
    for sw in net.branches:
        if sw.kind == "switch" and sw.id not in branch_to_current:
            branch_to_current[sw.id] = np.zeros(3, complex)  # open switch

    return PFSolution(bus_voltage=bus_voltage, bus_current=bus_current,
                      branch_current=branch_to_current, branch_loss=branch_loss,
                      iterations=iterations, converged=converged)


# ---------------------------------------------------------------------------
# forward-backward sweep

def fbs_solve(net: NetworkModel, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER, loads=None) -> PFSolution:
    """Forward-backward sweep on a radial network; flat start at V_spec."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = ResolvedNetwork(net)
    order = order_branches(net, r)
    branch_by_id = {br.id: br for br in r.branches}

    # children per group for the backward aggregation
    children: dict[str, list] = {g: [] for g in r.groups}
    branch_to_group = {}
    branch_from_group = {}
    for bid in order.forward:
        br = branch_by_id[bid]
        gf, gt = r.endpoint_groups(br)
        # orient along the tree (parent -> child)
        child = gt if order.parent_of.get(gt) == bid else gf
        parent = gf if child == gt else gt
        children[parent].append((bid, child))
        branch_to_group[bid] = child
        branch_from_group[bid] = parent

    volt = _flat_start(r)
    vspec = np.asarray(net.source_voltage, complex)
    i_to = {bid: np.zeros(3, complex) for bid in order.forward}

    iterations = 0
    converged = False
    while iterations < max_iter:
        iterations += 1
        consumed = r.consumed_current(volt, loads_override=loads)

        # backward: aggregate currents from the leaves
        for bid in order.backward:
            br = branch_by_id[bid]
            child = branch_to_group[bid]
            acc = consumed[child].copy()
            for cbid, _ in children[child]:
                cbr = branch_by_id[cbid]
                cur = i_to[cbid]
                if cbr.kind == "transformer":
                    t = cbr.transformer_params.ratio
                    cur = np.array([cur[k] / t[k] for k in range(3)])
                acc += cur
            idx = [PHASE_INDEX[p] for p in br.phases]
            val = np.zeros(3, complex)
            val[idx] = acc[idx]
            i_to[bid] = val

        # forward: push voltages down from the source
        new_volt = {g: v.copy() for g, v in volt.items()}
        new_volt[r.source_group] = vspec.copy()
        for bid in order.forward:
            br = branch_by_id[bid]
            parent = branch_from_group[bid]
            child = branch_to_group[bid]
            vf = new_volt[parent]
            vt = new_volt[child].copy()
            idx = [PHASE_INDEX[p] for p in br.phases]
            if br.kind == "transformer":
                tp = br.transformer_params
                oriented = br.to_bus
                if r.leader[oriented] != child:
                    raise SolverError(f"transformer {br.id} oriented against the tree")
                for p in idx:
                    vt[p] = vf[p] / tp.ratio[p] - tp.z_series[p] * i_to[bid][p]
            else:
                # symmetric Z makes the drop equation orientation-free when
                # the current is taken parent->child
                drop = br.z_matrix @ i_to[bid]
                vt[idx] = vf[idx] - drop[idx]
            new_volt[child] = vt

        delta = max(np.max(np.abs(new_volt[g] - volt[g])) for g in r.groups)
        volt = new_volt
        if not np.isfinite(delta):
            raise Diverged("forward-backward sweep produced non-finite voltages")
        if delta < tol:
            converged = True
            break

    branch_to_current = {bid: i_to[bid] for bid in order.forward}
    # orient reported branch currents from from_bus to to_bus as declared
    for bid in list(branch_to_current):
        br = branch_by_id[bid]
        if r.leader[br.to_bus] != branch_to_group[bid]:
            branch_to_current[bid] = -branch_to_current[bid]
    return _package_solution(net, r, volt, branch_to_current, iterations,
                             converged, loads_override=loads)


# ---------------------------------------------------------------------------
# admittance matrix and current-injection solver

def assemble_ybus(net: NetworkModel, resolved: ResolvedNetwork | None = None):
    """Sparse complex nodal admittance matrix over the resolved node index."""
    r = resolved or ResolvedNetwork(net)
    rows, cols, vals = [], [], []

    def add(g1, p1, g2, p2, y):
        rows.append(r.node_index[(g1, p1)])
        cols.append(r.node_index[(g2, p2)])
        vals.append(y)

    for br in r.branches:
        gf, gt = r.endpoint_groups(br)
        idx = [PHASE_INDEX[p] for p in br.phases]
        if br.kind == "transformer":
            tp = br.transformer_params
            for p in idx:
                if tp.z_series[p] == 0:
                    raise SingularBranch(f"branch {br.id}: zero transformer impedance")
                y = 1.0 / tp.z_series[p]
                t = tp.ratio[p]
                add(gf, p, gf, p, y / (t * t))
                add(gt, p, gt, p, y)
                add(gf, p, gt, p, -y / t)
                add(gt, p, gf, p, -y / t)
            continue
        zsub = br.z_submatrix()
        try:
            ysub = np.linalg.inv(zsub)
        except np.linalg.LinAlgError:
            raise SingularBranch(f"branch {br.id}: singular impedance submatrix") from None
        bsub = 1j * br.shunt_b[np.ix_(idx, idx)] / 2.0
        for a, p in enumerate(idx):
            for b_, q in enumerate(idx):
                add(gf, p, gf, q, ysub[a, b_] + bsub[a, b_])
                add(gt, p, gt, q, ysub[a, b_] + bsub[a, b_])
                add(gf, p, gt, q, -ysub[a, b_])
                add(gt, p, gf, q, -ysub[a, b_])
    y = sparse.coo_matrix((vals, (rows, cols)), shape=(r.n_nodes, r.n_nodes), dtype=complex)
    return y.tocsc()


class CurrentInjectionSolver:
    """Fixed-point current-injection solver with a cached LU factorization.

    The admittance matrix depends only on the topology, so one instance can
    solve many load scenarios cheaply.
    """

    def __init__(self, net: NetworkModel, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER):
        if tol <= 0:
            raise ValueError("tol must be positive")
        self.net = net
        self.tol = tol
        self.max_iter = max_iter
        self.resolved = ResolvedNetwork(net)
        self.ybus = assemble_ybus(net, self.resolved)
        r = self.resolved
        self.free = np.array([i for i in range(r.n_nodes) if i not in set(r.source_nodes)])
        self.src = np.array(r.source_nodes)
        yr = self.ybus[np.ix_(self.free, self.free)]
        self.y_rs = self.ybus[np.ix_(self.free, self.src)]
        try:
            self.lu = splu(yr.tocsc()) if len(self.free) else None
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
        vspec = np.asarray(net.source_voltage, complex)
        self.v_src = np.array([vspec[p] for (g, p), i in r.node_index.items()
                               if i in set(r.source_nodes)])

    def _volt_dict(self, v_nodes: np.ndarray) -> dict[str, np.ndarray]:
        r = self.resolved
        out = {g: np.zeros(3, complex) for g in r.groups}
        for (g, p), i in r.node_index.items():
            out[g][p] = v_nodes[i]
        return out

    def solve(self, loads=None) -> PFSolution:
        net, r = self.net, self.resolved
        v_nodes = np.zeros(r.n_nodes, complex)
        vspec = np.asarray(net.source_voltage, complex)
        for (g, p), i in r.node_index.items():
            v_nodes[i] = vspec[p]

        iterations = 0
        converged = False
        while iterations < self.max_iter:
            iterations += 1
            volt = self._volt_dict(v_nodes)
            consumed = r.consumed_current(volt, loads_override=loads)
            # line-charging shunts are already inside Y; take them back out
            for g, ysh in r.group_shunt.items():
                if np.any(ysh):
                    consumed[g] = consumed[g] - ysh @ volt[g]
            inj = np.zeros(r.n_nodes, complex)
            for (g, p), i in r.node_index.items():
                inj[i] = -consumed[g][p]
            if self.lu is None:
                converged = True
                break
            rhs = inj[self.free] - self.y_rs @ v_nodes[self.src]
            v_new = self.lu.solve(rhs)
            if not np.all(np.isfinite(v_new)):
                raise Diverged("current-injection iteration produced non-finite voltages")
            delta = np.max(np.abs(v_new - v_nodes[self.free])) if len(v_new) else 0.0
            v_nodes[self.free] = v_new
            if delta < self.tol:
                converged = True
                break

        volt = self._volt_dict(v_nodes)
        branch_to_current = {}
        for br in r.branches:
            gf, gt = r.endpoint_groups(br)
            branch_to_current[br.id] = _branch_current_from_v(br, volt[gf], volt[gt])
        return _package_solution(net, r, volt, branch_to_current, iterations,
                                 converged, loads_override=loads)


def solve_current_injection(net: NetworkModel, tol: float = DEFAULT_TOL,
                            max_iter: int = DEFAULT_MAX_ITER) -> PFSolution:
    return CurrentInjectionSolver(net, tol=tol, max_iter=max_iter).solve()


# ---------------------------------------------------------------------------
# mismatch and losses

def power_mismatch(net: NetworkModel, sol: PFSolution, loads=None) -> dict[tuple[str, str], complex]:
    """Residual between scheduled injections and the trigonometric power-flow
    equations evaluated with G and B from the admittance matrix.

    Source nodes are excluded (the slack balances by construction).
    """
    r = ResolvedNetwork(net)
    y = assemble_ybus(net, r).toarray()
    g_mat, b_mat = y.real, y.imag

    volt = {g: np.zeros(3, complex) for g in r.groups}
    for b in net.buses:
        for p in b.phases:
            volt[r.leader[b.id]][PHASE_INDEX[p]] = sol.bus_voltage[(b.id, p)]

    vm = np.zeros(r.n_nodes)
    va = np.zeros(r.n_nodes)
    for (g, p), i in r.node_index.items():
        vm[i] = abs(volt[g][p])
        va[i] = cmath.phase(volt[g][p])

    # scheduled net injection at each node from the connected loads/caps
    consumed = r.consumed_current(volt, loads_override=loads)
    # shunts are part of Y, not of the schedule
    for g, ysh in r.group_shunt.items():
        if np.any(ysh):
            consumed[g] = consumed[g] - ysh @ volt[g]
    s_spec = np.zeros(r.n_nodes, complex)
    for (g, p), i in r.node_index.items():
        s_spec[i] = -volt[g][p] * np.conj(consumed[g][p])

    out = {}
    src = set(r.source_nodes)
    for (g, p), i in r.node_index.items():
        if i in src:
            continue
        dth = va[i] - va
        p_calc = vm[i] * np.sum(vm * (g_mat[i] * np.cos(dth) + b_mat[i] * np.sin(dth)))
        q_calc = vm[i] * np.sum(vm * (g_mat[i] * np.sin(dth) - b_mat[i] * np.cos(dth)))
        out[(g, PHASES[p])] = s_spec[i] - complex(p_calc, q_calc)
    return out


def max_mismatch(net: NetworkModel, sol: PFSolution, loads=None) -> float:
    res = power_mismatch(net, sol, loads=loads)
    return max((abs(v) for v in res.values()), default=0.0)


def compute_losses(net: NetworkModel, sol: PFSolution) -> dict[str, complex]:
    """Per-branch complex series losses (already carried on the solution)."""
    return dict(sol.branch_loss)


def source_power(net: NetworkModel, sol: PFSolution) -> complex:
    return sum(sol.bus_voltage[(net.source_bus, p)]
               * np.conj(sol.bus_current[(net.source_bus, p)])
               for p in net.bus(net.source_bus).phases)


def consumed_power(net: NetworkModel, sol: PFSolution, loads=None) -> complex:
    """Total complex power drawn by loads and capacitors."""
    total = 0j
    for b in net.buses:
        if b.id == net.source_bus:
            continue
        for p in b.phases:
            total += sol.bus_voltage[(b.id, p)] * np.conj(sol.bus_current[(b.id, p)])
    # source-bus-attached loads are folded into the supply current; desk
    # feeders never attach load at the source, enforced here
    return total


# ---------------------------------------------------------------------------
# CSV export

def solution_to_csv(net: NetworkModel, sol: PFSolution, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "phase", "v_pu", "theta_v_deg", "i_pu", "theta_i_deg"])
        for b in net.buses:
            for p in b.phases:
                v = sol.bus_voltage[(b.id, p)]
                i = sol.bus_current[(b.id, p)]
                w.writerow([b.id, p, abs(v), math.degrees(cmath.phase(v)),
                            abs(i), math.degrees(cmath.phase(i)) if i != 0 else 0.0])


def losses_to_csv(net: NetworkModel, sol: PFSolution, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["branch", "p_loss_pu", "q_loss_pu"])
        for br in net.branches:
            loss = sol.branch_loss[br.id]
            w.writerow([br.id, loss.real, loss.imag])
