import csv

from gridflow import plots
from gridflow.solver import fbs_solve, solution_to_csv
from gridflow.surrogate import TrainConfig, build_mlp, train


def test_daily_profile_panels(tiny_dataset, tmp_path):
    written = plots.plot_daily_profiles(tiny_dataset, tmp_path, hours=24)
    names = {p.split("/")[-1] for p in map(str, written)}
    assert names == {"profile_V.svg", "profile_I.svg",
                     "profile_thV.svg", "profile_thI.svg"}
    # the companion CSV carries one row per hour and one column per slot
    rows = list(csv.reader(open(tmp_path / "profile_V.csv")))
    assert len(rows) == 25
    assert rows[0][0] == "hour"
    header_slots = rows[0][1:]
    assert all(s.startswith("V|") for s in header_slots)


def test_prediction_overlay(tiny_dataset, tmp_path):
    model = build_mlp(len(tiny_dataset.x_slots), len(tiny_dataset.y_slots),
                      hidden=(8,), seed=1)
    train(model, tiny_dataset, TrainConfig(epochs=1, seed=1))
    svg = plots.plot_prediction_overlay(model, tiny_dataset, tmp_path,
                                        group="I", hours=24)
    assert str(svg).endswith("overlay_I.svg")
    rows = list(csv.reader(open(tmp_path / "overlay_I.csv")))
    assert len(rows) == 25
    # paired ground-truth / prediction columns
    assert rows[0][1].startswith("gt:I|") and rows[0][2].startswith("pred:I|")


def test_loss_curve(tmp_path):
    svg = plots.plot_loss_curve([0.5, 0.2, 0.1], tmp_path)
    assert str(svg).endswith("loss.svg")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[1:] == [["1", "0.5"], ["2", "0.2"], ["3", "0.1"]]


def test_solution_plot(ieee4, tmp_path):
    sol = fbs_solve(ieee4)
    sol_csv = tmp_path / "sol.csv"
    solution_to_csv(ieee4, sol, sol_csv)
    svg = plots.plot_solution_csv(sol_csv, tmp_path)
    assert (tmp_path / "solution.svg").exists()
    assert "<svg" in open(svg).read(500)


def test_figures_are_deterministic(tiny_dataset, tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    plots.plot_daily_profiles(tiny_dataset, d1, hours=12)
    plots.plot_daily_profiles(tiny_dataset, d2, hours=12)
    assert (d1 / "profile_V.svg").read_bytes() == \
        (d2 / "profile_V.svg").read_bytes()
