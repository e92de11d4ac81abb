"""Figure rendering for solutions, dataset profiles and model predictions.

Every plot is written as a static SVG with a CSV of the plotted values next
to it, so reports stay diff-able and scriptable.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .scenarios import Dataset  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "svg.hashsalt": "gridflow",  # deterministic SVG ids
})


def _save_svg(fig, path):
    # drop the creation date so identical inputs give identical bytes
    fig.savefig(path, metadata={"Date": None})

PROFILE_GROUPS = ("V", "I", "thV", "thI")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _group_columns(ds: Dataset, group: str):
    return [(j, name) for j, name in enumerate(ds.y_slots)
            if name.split("|", 1)[0] == group]


def plot_daily_profiles(ds: Dataset, out_dir, hours: int = 24, prefix: str = "profile"):
    """Four panels of normalized target profiles (V, I, theta_V, theta_I)
    over the first ``hours`` samples in time order."""
    os.makedirs(out_dir, exist_ok=True)
    hours = min(hours, ds.n)
    yn = ds.y_norm.apply(ds.y[:hours]) if ds.y_norm is not None else ds.y[:hours]
    written = []
    titles = {"V": "Normalized voltage magnitude", "I": "Normalized current magnitude",
              "thV": "Normalized voltage angle", "thI": "Normalized current angle"}
    for group in PROFILE_GROUPS:
        cols = _group_columns(ds, group)
        if not cols:
            continue
        fig, ax = plt.subplots(figsize=(5.2, 3.2))
        t = range(hours)
        for j, name in cols:
            ax.plot(t, yn[:, j], lw=0.9, label=name.split("|", 1)[1])
        ax.set_xlabel("hour")
        ax.set_ylabel("normalized value")
        ax.set_title(titles[group])
        if len(cols) <= 12:
            ax.legend(fontsize=6, ncol=3)
        fig.tight_layout()
        svg = os.path.join(out_dir, f"{prefix}_{group}.svg")
        _save_svg(fig, svg)
        plt.close(fig)
        _write_csv(os.path.join(out_dir, f"{prefix}_{group}.csv"),
                   ["hour"] + [name for _, name in cols],
                   [[h] + [yn[h, j] for j, _ in cols] for h in range(hours)])
        written.append(svg)
    return written


def plot_prediction_overlay(model, ds: Dataset, out_dir, group: str = "I",
                            hours: int = 168, prefix: str = "overlay"):
    """Ground truth vs model prediction for one target group over time."""
    os.makedirs(out_dir, exist_ok=True)
    hours = min(hours, ds.n)
    xn = ds.x_norm.apply(ds.x[:hours])
    yn = ds.y_norm.apply(ds.y[:hours])
    pred = model.predict_normalized(xn)
    cols = _group_columns(ds, group)
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    t = range(hours)
    for j, name in cols:
        (line,) = ax.plot(t, yn[:, j], lw=1.0, label=f"GT {name.split('|', 1)[1]}")
        ax.plot(t, pred[:, j], lw=0.9, ls="--", color=line.get_color())
    ax.set_xlabel("hour")
    ax.set_ylabel("normalized value")
    ax.set_title(f"Ground truth (solid) vs prediction (dashed): {group}")
    if len(cols) <= 8:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    svg = os.path.join(out_dir, f"{prefix}_{group}.svg")
    _save_svg(fig, svg)
    plt.close(fig)
    header = ["hour"]
    rows = []
    for _, name in cols:
        header += [f"gt:{name}", f"pred:{name}"]
    for h in range(hours):
        row = [h]
        for j, _ in cols:
            row += [yn[h, j], pred[h, j]]
        rows.append(row)
    _write_csv(os.path.join(out_dir, f"{prefix}_{group}.csv"), header, rows)
    return svg


def plot_loss_curve(history, out_dir, prefix: str = "loss"):
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.6, 3.0))
    ax.semilogy(range(1, len(history) + 1), history, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training MSE")
    fig.tight_layout()
    svg = os.path.join(out_dir, f"{prefix}.svg")
    _save_svg(fig, svg)
    plt.close(fig)
    _write_csv(os.path.join(out_dir, f"{prefix}.csv"), ["epoch", "train_mse"],
               [[i + 1, v] for i, v in enumerate(history)])
    return svg


def plot_solution_csv(solution_csv, out_dir, prefix: str = "solution"):
    """Bar panels of |V| and voltage angle per bus-phase from a solve CSV."""
    os.makedirs(out_dir, exist_ok=True)
    with open(solution_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    labels = [f"{r['bus']}.{r['phase']}" for r in rows]
    vmag = [float(r["v_pu"]) for r in rows]
    vang = [float(r["theta_v_deg"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.0, 4.6), sharex=True)
    ax1.bar(labels, vmag, color="tab:blue")
    ax1.set_ylabel("|V| (pu)")
    ax1.set_ylim(min(vmag) * 0.98, max(vmag) * 1.02)
    ax2.bar(labels, vang, color="tab:orange")
    ax2.set_ylabel("angle (deg)")
    ax2.tick_params(axis="x", rotation=60)
    fig.tight_layout()
    svg = os.path.join(out_dir, f"{prefix}.svg")
    _save_svg(fig, svg)
    plt.close(fig)
    return svg
