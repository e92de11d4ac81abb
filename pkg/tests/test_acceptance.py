"""End-to-end acceptance suite.

Each criterion is one test; run with ``pytest -v`` to get one pass/fail
line per criterion.  The reproduction criteria (4-7) train real models
and together take on the order of an hour on a single core; deselect
them with ``-m "not slow"`` during development.
"""

import dataclasses
import time

import numpy as np
import pytest

from gridflow import asset_path, nn, repro
from gridflow.circuit import parse_circuit
from gridflow.solver import (CurrentInjectionSolver, consumed_power,
                             fbs_solve, max_mismatch, source_power)

SEED = 42


def report(criterion, detail):
    print(f"[criterion {criterion}] {detail}")


@pytest.fixture(scope="session")
def feeders():
    return {name: parse_circuit(asset_path(f"{name}.ckt").read_text())
            for name in ("ieee4", "synth13")}


def random_loads(net, rng):
    """Independent per-load multipliers in (0.3, 1.0]; the bundled feeders
    are heavily loaded at rating, so upscaling risks voltage collapse."""
    return [ld.scaled(0.3 + 0.7 * rng.random()) for ld in net.loads]


# ---------------------------------------------------------------------------
# criteria 1-3, 8: solver and gradient oracles


def test_criterion_1_solver_oracle_equivalence(feeders):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst_dv = worst_di = worst_mm = 0.0
    for name, net in feeders.items():
        ci = CurrentInjectionSolver(net)
        for _ in range(50):
            loads = random_loads(net, rng)
            a = fbs_solve(net.with_loads(loads))
            b = ci.solve(loads=loads)
            assert a.converged and b.converged
            dv = max(abs(a.bus_voltage[k] - b.bus_voltage[k])
                     for k in a.bus_voltage)
            di = max(abs(a.bus_current[k] - b.bus_current[k])
                     for k in a.bus_current)
            mm = max(max_mismatch(net, a, loads=loads),
                     max_mismatch(net, b, loads=loads))
            worst_dv, worst_di = max(worst_dv, dv), max(worst_di, di)
            worst_mm = max(worst_mm, mm)
    elapsed = time.perf_counter() - t0
    report(1, f"50 scenarios x 2 feeders: max |dV| {worst_dv:.2e}, "
              f"max |dI| {worst_di:.2e}, max mismatch {worst_mm:.2e}, "
              f"{elapsed:.1f}s")
    assert worst_dv < 1e-6 and worst_di < 1e-6
    assert worst_mm < 1e-7
    assert elapsed < 10.0


def test_criterion_2_energy_balance(feeders):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED + 1)
    worst = 0.0
    for name, net in feeders.items():
        for _ in range(25):
            scen = net.with_loads(random_loads(net, rng))
            sol = fbs_solve(scen)
            assert sol.converged
            gap = abs(source_power(scen, sol)
                      - consumed_power(scen, sol)
                      - sum(sol.branch_loss.values()))
            worst = max(worst, gap)
    elapsed = time.perf_counter() - t0
    report(2, f"worst source-vs-loads+losses gap {worst:.2e} pu, "
              f"{elapsed:.1f}s")
    assert worst < 1e-8
    assert elapsed < 5.0


def _fd_worst(net, x, y, train=False, eps=1e-6):
    pred = net.forward(x, train=train)
    err = pred - y
    net.backward(2.0 * err / err.size)
    grads = [g.copy() for g in net.grads()]
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat, gflat = p.ravel(), g.ravel()
        idx = np.linspace(0, flat.size - 1, min(flat.size, 10)).astype(int)
        for j in idx:
            old = flat[j]
            flat[j] = old + eps
            lp = nn.mse(net.forward(x, train=train), y)
            flat[j] = old - eps
            lm = nn.mse(net.forward(x, train=train), y)
            flat[j] = old
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(fd), abs(gflat[j]), 1e-8)
            worst = max(worst, abs(fd - gflat[j]) / denom)
    return worst


def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for i in range(20):
        rng = np.random.default_rng(1000 + i)

        def check(kind, layers, shape, out):
            net = nn.Network(layers)
            x = rng.normal(size=shape)
            y = rng.normal(size=(shape[0], out))
            worst[kind] = max(worst.get(kind, 0.0), _fd_worst(net, x, y))

        check("dense", [nn.Dense(6, 5, rng), nn.Dense(5, 3, rng)], (4, 6), 3)
        check("relu", [nn.Dense(6, 8, rng), nn.ReLU(), nn.Dense(8, 3, rng)],
              (4, 6), 3)
        check("conv", [nn.Conv2D(2, 3, 2, 2, rng), nn.Flatten(),
                       nn.Dense(3 * 4 * 4, 2, rng)], (3, 2, 5, 5), 2)
        check("pool", [nn.Conv2D(1, 2, 2, 2, rng), nn.Pool2D(2, 2, "max"),
                       nn.Flatten(), nn.Dense(2 * 2 * 2, 2, rng)],
              (3, 1, 5, 5), 2)
        check("rbf", [nn.Dense(4, 3, rng),
                      nn.RBFLayer(rng.normal(size=(5, 3)), np.full(5, 0.8)),
                      nn.Dense(5, 2, rng)], (4, 4), 2)
        # dropout in eval mode is the identity map
        check("dropout", [nn.Dense(6, 8, rng), nn.Dropout(0.4, seed=i),
                          nn.Dense(8, 3, rng)], (4, 6), 3)
    elapsed = time.perf_counter() - t0
    overall = max(worst.values())
    report(3, "worst relative FD error per layer kind: "
              + ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
              + f", {elapsed:.1f}s")
    assert overall < 1e-4
    assert elapsed < 30.0


def test_criterion_8_kmeans():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    means = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0]])
    pts = np.concatenate([m + 0.3 * rng.normal(size=(250, 2)) for m in means])
    centers, sigmas = nn.kmeans(pts, 4, seed=3)
    got = np.array(sorted(map(tuple, centers)))
    want = np.array(sorted(map(tuple, means)))
    off = np.abs(got - want).max()
    # the 1e-6 movement threshold stops at the same centers as running the
    # iteration (effectively) to exhaustion, while a huge threshold stops
    # after a single sloppy update
    tight, _ = nn.kmeans(pts, 4, tol=1e-12, seed=3)
    loose, _ = nn.kmeans(pts, 4, tol=100.0, seed=3)
    drift = np.abs(centers - tight).max()
    elapsed = time.perf_counter() - t0
    report(8, f"blob center offset {off:.4f}, 1e-6-vs-exhaustive drift "
              f"{drift:.2e}, {elapsed:.1f}s")
    assert off < 0.05
    assert drift < 1e-4
    assert np.abs(loose - tight).max() > 1e-3
    assert (sigmas > 0).all()
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# criteria 4-7: reproduction cases (slow)


@pytest.fixture(scope="session")
def case_4node_twice():
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        result = repro.run_case("4node", seed=SEED)
        runs.append((result, time.perf_counter() - t0))
    return runs


@pytest.fixture(scope="session")
def case_13node():
    t0 = time.perf_counter()
    result = repro.run_case("13node", seed=SEED)
    elapsed = time.perf_counter() - t0
    # the 13-node CNN doubles as the no-variation reference of criterion 6;
    # seeding the shared cache avoids retraining the identical model
    cnn = next(r for r in result.rows if r.family == "cnn")
    repro._BASELINE_CACHE.setdefault(
        SEED, dataclasses.replace(cnn, label="base-ref"))
    return result, elapsed


@pytest.fixture(scope="session", params=["topology", "pv", "ev"])
def variation_cases(request, case_13node):
    t0 = time.perf_counter()
    result = repro.run_case(request.param, seed=SEED)
    return result, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_4_table_reproduction_4node(case_4node_twice):
    result, elapsed = case_4node_twice[0]
    report(4, "\n" + result.table() + f"\nwall time {elapsed/60:.1f} min")
    assert len(result.rows) == 9  # 3 load models x 3 families
    for row in result.rows:
        assert row.mse_pct <= 0.5, f"{row.label}/{row.family} MSE {row.mse_pct}"
        assert row.mae_pct <= 1.5, f"{row.label}/{row.family} MAE {row.mae_pct}"
    assert elapsed < 30 * 60


@pytest.mark.slow
def test_criterion_5_13node_standin(case_13node):
    result, elapsed = case_13node
    report(5, "\n" + result.table() + f"\nwall time {elapsed/60:.1f} min")
    assert len(result.rows) == 3
    for row in result.rows:
        assert row.mse_pct <= 1.0, f"{row.family} MSE {row.mse_pct}"
        assert row.mae_pct <= 1.5, f"{row.family} MAE {row.mae_pct}"
    assert elapsed < 45 * 60


@pytest.mark.slow
def test_criterion_6_variation_cases(variation_cases):
    result, elapsed = variation_cases
    report(6, "\n" + result.table() + f"\nwall time {elapsed/60:.1f} min")
    assert result.baseline is not None
    for row in result.rows:
        assert row.mse_pct <= 2.5, f"{result.case} MSE {row.mse_pct}"
        assert row.mae_pct <= 3.5, f"{result.case} MAE {row.mae_pct}"
        # directional consistency: variation cases are strictly harder
        # than the no-variation reference
        assert row.mse_pct > result.baseline.mse_pct
        assert row.mae_pct > result.baseline.mae_pct
    assert elapsed < 45 * 60


@pytest.mark.slow
def test_criterion_7_determinism(case_4node_twice):
    (r1, _), (r2, _) = case_4node_twice
    match = r1.fingerprint() == r2.fingerprint()
    report(7, f"4-node case re-run fingerprints "
              f"{'identical' if match else 'DIFFER'}")
    assert match, f"{r1.fingerprint()} != {r2.fingerprint()}"
