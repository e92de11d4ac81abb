"""Time-series scenario generation, sample assembly and normalization.

A scenario is one operating point: the network loads scaled by a loadshape
plus noise, optional PV injections (negative constant-PQ with a daylight
bell profile) and EV charging loads (constant-PQ during seeded plug-in
windows).  Every scenario is solved with the current-injection solver and
turned into one (feature, target) sample with a fixed, documented slot
layout recorded in the dataset header.
"""

from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .circuit import parse_loadshape_file
from .network import Load, NetworkModel, PHASES, PhaseSet
from .solver import CurrentInjectionSolver, PFSolution, SolverError

UPPER_TRIANGLE = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


class SchemaMismatch(Exception):
    pass


class Unconverged(Exception):
    pass


# ---------------------------------------------------------------------------
# normalization

@dataclass
class Normalizer:
    """Per-slot min-max scaling fitted on the training split.

    Constant slots (max == min) map to 0 and invert back to the min.
    """

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, float)
        self.maxs = np.asarray(self.maxs, float)
        if np.any(self.maxs < self.mins):
            raise ValueError("normalizer max < min")

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, float)
        if values.shape[0] < 1:
            raise ValueError("need at least one sample to fit")
        return cls(values.min(axis=0), values.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        return self.maxs - self.mins

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, float)
        span = self.span
        out = np.zeros_like(v)
        nz = span > 0
        out[..., nz] = (v[..., nz] - self.mins[nz]) / span[nz]
        return out

    def invert(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, float)
        span = self.span
        out = np.broadcast_to(self.mins, v.shape).copy()
        nz = span > 0
        out[..., nz] = v[..., nz] * span[nz] + self.mins[nz]
        return out


def split_dataset(n: int, train_fraction: float, seed: int):
    """Seeded uniform shuffle into disjoint, exhaustive train/test indices."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# ---------------------------------------------------------------------------
# dataset container

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    x_slots: list[str]
    y_slots: list[str]
    x_norm: Normalizer | None = None
    y_norm: Normalizer | None = None
    train_idx: np.ndarray = field(default_factory=lambda: np.array([], int))
    test_idx: np.ndarray = field(default_factory=lambda: np.array([], int))
    dropped: int = 0

    def __post_init__(self):
        if self.x.shape[1] != len(self.x_slots) or self.y.shape[1] != len(self.y_slots):
            raise SchemaMismatch("matrix width does not match slot names")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def finalize(self, train_fraction: float, seed: int) -> "Dataset":
        """Split and fit the normalizers on the training split only."""
        tr, te = split_dataset(self.n, train_fraction, seed)
        return replace(self, train_idx=tr, test_idx=te,
                       x_norm=Normalizer.fit(self.x[tr]),
                       y_norm=Normalizer.fit(self.y[tr]))

    def normalized(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.x_norm.apply(self.x[idx]), self.y_norm.apply(self.y[idx])


def mix_topology_datasets(datasets, train_fraction: float, seed: int) -> Dataset:
    """Concatenate datasets that share a slot layout, then refit and resplit."""
    first = datasets[0]
    for ds in datasets[1:]:
        if ds.x_slots != first.x_slots or ds.y_slots != first.y_slots:
            raise SchemaMismatch("datasets have different slot layouts")
    merged = Dataset(x=np.concatenate([ds.x for ds in datasets]),
                     y=np.concatenate([ds.y for ds in datasets]),
                     x_slots=list(first.x_slots), y_slots=list(first.y_slots),
                     dropped=sum(ds.dropped for ds in datasets))
    return merged.finalize(train_fraction, seed)


# ---------------------------------------------------------------------------
# slot layouts

def feature_slots(net: NetworkModel, extra_load_ids=()) -> list[str]:
    slots = []
    src = net.bus(net.source_bus)
    for p in src.phases:
        slots.append(f"src|V|{p}")
    for p in src.phases:
        slots.append(f"src|th|{p}")
    for br in net.branches:
        if br.kind == "switch":
            slots.append(f"z|{br.id}|state")
        else:
            for i, j in UPPER_TRIANGLE:
                slots.append(f"z|{br.id}|{i}{j}|re")
                slots.append(f"z|{br.id}|{i}{j}|im")
    for ld in net.loads:
        for p in PHASES:
            slots.append(f"load|{ld.id}|P|{p}")
        for p in PHASES:
            slots.append(f"load|{ld.id}|Q|{p}")
    for lid in extra_load_ids:
        for p in PHASES:
            slots.append(f"load|{lid}|P|{p}")
        for p in PHASES:
            slots.append(f"load|{lid}|Q|{p}")
    return slots


def target_slots(net: NetworkModel) -> list[str]:
    slots = []
    for group in ("V", "I", "thV", "thI"):
        for b in net.buses:
            for p in b.phases:
                slots.append(f"{group}|{b.id}|{p}")
    for br in net.branches:
        slots.append(f"loss|{br.id}")
    return slots


def _wrap_deg(rad: float) -> float:
    d = math.degrees(rad) % 360.0
    if d > 180.0:
        d -= 360.0
    return d


def build_features(net: NetworkModel, eff_loads) -> np.ndarray:
    """Feature vector per the documented layout: source voltage, branch
    impedance entries (switch state as a closed/open flag), load P and Q."""
    vals = []
    src = net.bus(net.source_bus)
    for p in src.phases:
        vals.append(abs(net.source_voltage[{"a": 0, "b": 1, "c": 2}[p]]))
    for p in src.phases:
        vals.append(_wrap_deg(cmath.phase(net.source_voltage[{"a": 0, "b": 1, "c": 2}[p]])))
    for br in net.branches:
        if br.kind == "switch":
            vals.append(1.0 if br.switch_state == "closed" else 0.0)
        else:
            for i, j in UPPER_TRIANGLE:
                vals.append(br.z_matrix[i, j].real)
                vals.append(br.z_matrix[i, j].imag)
    for ld in eff_loads:
        vals.extend(s.real for s in ld.s_rated)
        vals.extend(s.imag for s in ld.s_rated)
    return np.array(vals, float)


def build_targets(net: NetworkModel, sol: PFSolution) -> np.ndarray:
    if not sol.converged:
        raise Unconverged("cannot build a sample from an unconverged solution")
    vals = []
    for b in net.buses:
        for p in b.phases:
            vals.append(abs(sol.bus_voltage[(b.id, p)]))
    for b in net.buses:
        for p in b.phases:
            vals.append(abs(sol.bus_current[(b.id, p)]))
    for b in net.buses:
        for p in b.phases:
            vals.append(_wrap_deg(cmath.phase(sol.bus_voltage[(b.id, p)])))
    for b in net.buses:
        for p in b.phases:
            i = sol.bus_current[(b.id, p)]
            vals.append(_wrap_deg(cmath.phase(i)) if i != 0 else 0.0)
    for br in net.branches:
        vals.append(sol.branch_loss[br.id].real)
    return np.array(vals, float)


# ---------------------------------------------------------------------------
# scenario configuration

@dataclass(frozen=True)
class PVProfile:
    id: str
    bus: str
    phases: str
    peak_kw: float
    variability: float = 0.2


@dataclass(frozen=True)
class EVProfile:
    id: str
    bus: str
    phases: str
    charger_kw: float
    charge_prob: float = 0.9


@dataclass(frozen=True)
class ScenarioConfig:
    horizon: int = 24
    noise: float = 0.0
    shape: str = "synthetic"  # "synthetic", "flat" or a CSV path
    load_model: str | None = None  # override every load's model
    zip_weights: tuple = (0.3, 0.3, 0.4)
    pv: tuple = ()
    ev: tuple = ()
    switch_states: dict = field(default_factory=dict)
    train_fraction: float = 21000.0 / 26280.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def parse_scenario_config(text: str) -> ScenarioConfig:
    kw = {}
    pv, ev = [], []
    switch_states = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key = key.strip().lower()
        val = val.strip()
        if key in ("horizon",):
            kw["horizon"] = int(val)
        elif key == "noise":
            kw["noise"] = float(val)
        elif key == "shape":
            kw["shape"] = val
        elif key == "load_model":
            kw["load_model"] = val
        elif key == "zip_weights":
            kw["zip_weights"] = tuple(float(x) for x in val.split(","))
        elif key == "train_fraction":
            kw["train_fraction"] = float(val)
        elif key in ("pv", "ev"):
            props = dict(item.split(":", 1) for item in val.split(","))
            if key == "pv":
                pv.append(PVProfile(id=props["id"], bus=props["bus"],
                                    phases=props.get("phases", "abc"),
                                    peak_kw=float(props["peak_kw"]),
                                    variability=float(props.get("variability", 0.2))))
            else:
                ev.append(EVProfile(id=props["id"], bus=props["bus"],
                                    phases=props.get("phases", "abc"),
                                    charger_kw=float(props["charger_kw"]),
                                    charge_prob=float(props.get("charge_prob", 0.9))))
        elif key == "open":
            switch_states[val] = "open"
        elif key == "close":
            switch_states[val] = "closed"
        else:
            raise ValueError(f"unknown scenario config key {key!r}")
    return ScenarioConfig(pv=tuple(pv), ev=tuple(ev), switch_states=switch_states, **kw)


def parse_scenario_config_file(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario_config(fh.read())


# ---------------------------------------------------------------------------
# loadshape + stochastic streams

def synthetic_loadshape(hours: int, seed: int) -> np.ndarray:
    """Deterministic daily/weekly/seasonal profile with small seeded jitter,
    normalized so the peak multiplier is 1."""
    rng = np.random.default_rng([seed, 17])
    t = np.arange(hours)
    hod = t % 24
    day = t // 24
    daily = 0.55 + 0.30 * np.exp(-((hod - 18.5) ** 2) / 18.0) \
        + 0.18 * np.exp(-((hod - 8.0) ** 2) / 10.0)
    weekly = np.where((day % 7) >= 5, 0.88, 1.0)
    seasonal = 1.0 + 0.14 * np.cos(2.0 * np.pi * (day - 200.0) / 365.0)
    jitter = 1.0 + 0.05 * rng.standard_normal(hours)
    shape = daily * weekly * seasonal * np.clip(jitter, 0.8, 1.2)
    return shape / shape.max()


def _pv_series(profile: PVProfile, horizon: int, seed: int, stream: int,
               s_base_kva: float) -> np.ndarray:
    rng = np.random.default_rng([seed, 1000 + stream])
    n_days = horizon // 24 + 1
    day_factor = np.clip(1.0 - profile.variability * rng.random(n_days), 0.05, 1.0)
    t = np.arange(horizon)
    hod = t % 24
    bell = np.clip(np.sin(np.pi * (hod - 6.0) / 12.0), 0.0, None)
    return profile.peak_kw / s_base_kva * bell * day_factor[t // 24]


def _ev_series(profile: EVProfile, horizon: int, seed: int, stream: int,
               s_base_kva: float) -> np.ndarray:
    rng = np.random.default_rng([seed, 2000 + stream])
    n_days = horizon // 24 + 1
    out = np.zeros(horizon)
    for d in range(n_days):
        if rng.random() >= profile.charge_prob:
            continue
        start = int(rng.integers(17, 22))
        dur = int(rng.integers(2, 6))
        lo = d * 24 + start
        hi = min(lo + dur, horizon)
        out[lo:hi] = profile.charger_kw / s_base_kva
    return out[:horizon]


# ---------------------------------------------------------------------------
# generation pipeline

def _apply_load_model(ld: Load, cfg: ScenarioConfig) -> Load:
    if cfg.load_model is None:
        return ld
    model = {"pq": "constant_pq", "z": "constant_z", "i": "constant_i",
             "zip": "zip"}[cfg.load_model]
    if model == "zip":
        return replace(ld, model=model, zip_weights=cfg.zip_weights)
    return replace(ld, model=model)


def generate_scenarios(net: NetworkModel, cfg: ScenarioConfig, seed: int,
                       base_dir=None):
    """Yield (t, effective_loads) in time order; deterministic under seed."""
    if cfg.shape == "synthetic":
        shape = synthetic_loadshape(cfg.horizon, seed)
    elif cfg.shape == "flat":
        shape = np.ones(cfg.horizon)
    else:
        path = cfg.shape
        if base_dir is not None:
            import os
            path = os.path.join(base_dir, cfg.shape)
        mult = parse_loadshape_file(path)
        shape = np.resize(np.asarray(mult, float), cfg.horizon)

    base_loads = [_apply_load_model(ld, cfg) for ld in net.loads]
    rng = np.random.default_rng([seed, 3])
    noise = cfg.noise * (2.0 * rng.random((cfg.horizon, len(base_loads))) - 1.0)

    pv_series = [_pv_series(p, cfg.horizon, seed, k, net.s_base_kva)
                 for k, p in enumerate(cfg.pv)]
    ev_series = [_ev_series(p, cfg.horizon, seed, k, net.s_base_kva)
                 for k, p in enumerate(cfg.ev)]

    for t in range(cfg.horizon):
        eff = [ld.scaled(shape[t] * (1.0 + noise[t, j]))
               for j, ld in enumerate(base_loads)]
        for prof, series in zip(cfg.pv, pv_series):
            phases = PhaseSet.from_string(prof.phases)
            per_ph = -series[t] / len(phases)
            s = tuple(complex(per_ph, 0.0) if p in phases else 0j for p in PHASES)
            eff.append(Load(prof.id, prof.bus, phases, model="constant_pq", s_rated=s))
        for prof, series in zip(cfg.ev, ev_series):
            phases = PhaseSet.from_string(prof.phases)
            per_ph = series[t] / len(phases)
            # chargers draw at ~0.98 lagging power factor
            s = tuple(complex(per_ph, per_ph * 0.2) if p in phases else 0j
                      for p in PHASES)
            eff.append(Load(prof.id, prof.bus, phases, model="constant_pq", s_rated=s))
        yield t, eff


def _solve_chunk(args):
    """Worker: solve a list of scenarios and return (features, targets) or
    None per scenario, preserving order."""
    net, effs = args
    solver = CurrentInjectionSolver(net)
    out = []
    for eff in effs:
        try:
            sol = solver.solve(loads=eff)
        except SolverError:
            out.append(None)
            continue
        if not sol.converged:
            out.append(None)
            continue
        out.append((build_features(net, eff), build_targets(net, sol)))
    return out


def generate_dataset(net: NetworkModel, cfg: ScenarioConfig, seed: int,
                     base_dir=None, finalize: bool = True,
                     jobs: int = 1) -> Dataset:
    """Generate, solve and assemble the full dataset for one topology.

    Unconverged scenarios are dropped and counted, never imputed.  With
    ``jobs > 1`` the solves run in a process pool; results are reassembled
    in time order so the output is byte-identical to the serial path.
    """
    net = net.with_switch_states(cfg.switch_states) if cfg.switch_states else net
    extra_ids = [p.id for p in cfg.pv] + [p.id for p in cfg.ev]
    x_slots = feature_slots(net, extra_ids)
    y_slots = target_slots(net)

    xs, ys = [], []
    dropped = 0
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        effs = [eff for _, eff in generate_scenarios(net, cfg, seed,
                                                     base_dir=base_dir)]
        n_chunks = min(jobs * 4, max(1, len(effs)))
        bounds = np.linspace(0, len(effs), n_chunks + 1).astype(int)
        tasks = [(net, effs[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
                 if b > a]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for chunk in pool.map(_solve_chunk, tasks):
                for item in chunk:
                    if item is None:
                        dropped += 1
                    else:
                        xs.append(item[0])
                        ys.append(item[1])
        ds = Dataset(x=np.array(xs, float).reshape(len(xs), len(x_slots)),
                     y=np.array(ys, float).reshape(len(ys), len(y_slots)),
                     x_slots=x_slots, y_slots=y_slots, dropped=dropped)
        if finalize and ds.n >= 2:
            ds = ds.finalize(cfg.train_fraction, seed)
        return ds

    solver = CurrentInjectionSolver(net)
    for t, eff in generate_scenarios(net, cfg, seed, base_dir=base_dir):
        try:
            sol = solver.solve(loads=eff)
        except SolverError:
            dropped += 1
            continue
        if not sol.converged:
            dropped += 1
            continue
        xs.append(build_features(net, eff))
        ys.append(build_targets(net, sol))
    ds = Dataset(x=np.array(xs, float).reshape(len(xs), len(x_slots)),
                 y=np.array(ys, float).reshape(len(ys), len(y_slots)),
                 x_slots=x_slots, y_slots=y_slots, dropped=dropped)
    if finalize and ds.n >= 2:
        ds = ds.finalize(cfg.train_fraction, seed)
    return ds


def write_generation_report(ds: Dataset, path):
    """Summary CSV: dropped count plus per-slot statistics of the targets."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["samples", ds.n])
        w.writerow(["dropped", ds.dropped])
        w.writerow(["train", len(ds.train_idx)])
        w.writerow(["test", len(ds.test_idx)])
        w.writerow([])
        w.writerow(["slot", "min", "max", "mean"])
        for name, col in zip(ds.y_slots, ds.y.T):
            w.writerow([name, col.min(), col.max(), col.mean()])
