"""Render metrics-CSV line charts to self-contained SVG files.

Four charts: accuracy, loss, cumulative energy, and uplink/downlink bytes
per round.  Output is deterministic (fixed hash salt, no timestamp
metadata) and each figure embeds its axis limits in the SVG description so
the files are auditable without re-running matplotlib.
"""

from __future__ import annotations

import csv
import os
import sys

import matplotlib

matplotlib.use("svg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MARGIN = 0.05


def axis_limits(lo: float, hi: float, margin: float = MARGIN) -> tuple[float, float]:
    """Data extent padded by the margin; a flat series gets a half-unit pad."""
    span = hi - lo
    pad = margin * span if span > 0.0 else 0.5
    return lo - pad, hi + pad


def read_metrics(path: str) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {key: np.array([float(r[key]) for r in rows])
            for key in rows[0].keys()}


def _render(path: str, title: str, ylabel: str, rounds: np.ndarray,
            series: dict[str, np.ndarray]) -> None:
    plt.rcParams["svg.hashsalt"] = "satfedsim"
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, values in series.items():
        line, = ax.plot(rounds, values, label=name)
        line.set_gid(f"series-{name}")
    xlim = axis_limits(float(rounds.min()), float(rounds.max()))
    all_values = np.concatenate(list(series.values()))
    ylim = axis_limits(float(all_values.min()), float(all_values.max()))
    ax.set_xlim(*xlim)
    ax.set_ylim(*ylim)
    ax.set_xlabel("round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    description = (f"xlim={xlim[0]!r},{xlim[1]!r} "
                   f"ylim={ylim[0]!r},{ylim[1]!r}")
    fig.savefig(path, format="svg",
                metadata={"Date": None, "Title": title,
                          "Description": description})
    plt.close(fig)


def emit_plots(metrics_csv: str, out_dir: str) -> list[str]:
    """Write the four charts next to the metrics; returns the written paths.

    A header-only CSV produces no files and a warning on stderr.
    """
    data = read_metrics(metrics_csv)
    if not data:
        print(f"warning: no data rows in {metrics_csv}; no plots written",
              file=sys.stderr)
        return []
    os.makedirs(out_dir, exist_ok=True)
    rounds = data["round"]
    charts = [
        ("accuracy_vs_round.svg", "Evaluation accuracy", "accuracy",
         {"accuracy": data["accuracy"]}),
        ("loss_vs_round.svg", "Evaluation loss", "cross-entropy",
         {"loss": data["loss"]}),
        ("cumulative_energy_vs_round.svg", "Cumulative energy", "joules",
         {"e_tx": np.cumsum(data["e_tx_j"]),
          "e_cmp": np.cumsum(data["e_cmp_j"])}),
        ("bytes_vs_round.svg", "Link traffic", "bytes",
         {"bytes_up": data["bytes_up"], "bytes_down": data["bytes_down"]}),
    ]
    written = []
    for filename, title, ylabel, series in charts:
        path = os.path.join(out_dir, filename)
        tmp = path + ".tmp"
        _render(tmp, title, ylabel, rounds, series)
        os.replace(tmp, path)
        written.append(path)
    return written
