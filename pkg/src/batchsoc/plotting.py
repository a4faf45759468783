"""Figures rendered to files from the CSV outputs of the evaluation stage."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from batchsoc.experiments import read_stamped_csv  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_average_losses(table_csv, path):
    """Grouped bars: one group per test set, one bar per design."""
    header, rows = read_stamped_csv(table_csv)
    labels = header[1:]
    sets = [r[0] for r in rows]
    vals = np.array([[float(v) for v in r[1:]] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(labels)
    x = np.arange(len(sets))
    for j, lab in enumerate(labels):
        ax.bar(x + (j - (len(labels) - 1) / 2) * width, vals[:, j], width, label=lab)
    ax.set_xticks(x, sets)
    ax.set_xlabel("test set")
    ax.set_ylabel("average loss")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_trajectories(traj_dir, path):
    """Input and product/byproduct trajectories for each extreme scenario."""
    traj_dir = Path(traj_dir)
    with open(traj_dir / "index.json") as fh:
        runs = json.load(fh)["runs"]
    ids = sorted({r["scenario_id"] for r in runs})
    if not ids:
        return None
    fig, axes = plt.subplots(2, len(ids), figsize=(5 * len(ids), 6), squeeze=False)
    for c, sid in enumerate(ids):
        for r in (r for r in runs if r["scenario_id"] == sid):
            header, rows = read_stamped_csv(traj_dir / r["file"])
            data = np.array(rows, dtype=float)
            col = {h: i for i, h in enumerate(header)}
            style = "k--" if r["label"] == "optimal" else "-"
            axes[0, c].step(data[:-1, col["t"]], data[:-1, col["u"]], style, where="post", label=r["label"])
            axes[1, c].plot(data[:, col["t"]], data[:, col["c_C"]] - data[:, col["c_D"]], style, label=r["label"])
        sign = "+" if runs[[r["scenario_id"] for r in runs].index(sid)]["offset_sign"] > 0 else "-"
        axes[0, c].set_title(f"scenario {sid} ({sign} disturbance)")
        axes[0, c].set_ylabel("u")
        axes[1, c].set_ylabel("c_C - c_D")
        axes[1, c].set_xlabel("t")
        axes[0, c].legend(fontsize=8)
    return _save(fig, path)


def plot_approximation_errors(csv_path, path):
    """Simulated loss against the quadratic approximations, per scenario."""
    header, rows = read_stamped_csv(csv_path)
    data = np.array(rows, dtype=float)
    col = {h: i for i, h in enumerate(header)}
    sim = data[:, col["simulated"]]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    ax = axes[0]
    for name in ("quad_exact", "quad_gentle", "quad_frozen"):
        ax.plot(np.abs(data[:, col[name]] - sim), label=name.replace("quad_", ""))
    ax.set_xlabel("scenario")
    ax.set_ylabel("|approximate - simulated|")
    ax.legend(fontsize=8)
    ax = axes[1]
    errs = [h for h in header if h.startswith("abs_err_")]
    base = data[:, col[errs[0]]]
    for h in errs[1:]:
        ax.plot(data[:, col[h]] - base, label=f"{h[8:]} - {errs[0][8:]}")
    ax.axhline(0.0, color="k", lw=0.5)
    ax.set_xlabel("scenario")
    ax.set_ylabel("error difference")
    ax.legend(fontsize=8)
    return _save(fig, path)


def render_all(out_dir):
    out_dir = Path(out_dir)
    figs = out_dir / "figures"
    made = []
    table = out_dir / "tables" / "average_loss.csv"
    if table.exists():
        made.append(plot_average_losses(table, figs / "average_loss.png"))
    if (out_dir / "trajectories" / "index.json").exists():
        p = plot_trajectories(out_dir / "trajectories", figs / "trajectories.png")
        if p:
            made.append(p)
    approx = out_dir / "tables" / "approximation_error.csv"
    if approx.exists():
        made.append(plot_approximation_errors(approx, figs / "approximation_error.png"))
    return made
