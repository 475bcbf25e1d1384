"""Post-processing: delimited-table aggregation and matplotlib figures.

Everything here is a pure function of files already on disk, so re-running
any summary is idempotent.  Figures are rendered headlessly to PNG next to
the tables they summarise.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from scipy import stats  # noqa: E402


def t_interval(values, confidence: float = 0.95) -> tuple[float, float]:
    """(mean, half-width) of the Student-t confidence interval."""
    values = list(values)
    n = len(values)
    if n == 0:
        raise ValueError("need at least one value")
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    half = stats.t.ppf(0.5 + confidence / 2.0, n - 1) * math.sqrt(var / n)
    return mean, half


def read_table(path) -> list[dict]:
    """CSV rows with numeric fields converted; missing cells become None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, raw in row.items():
                if raw == "" or raw is None:
                    parsed[key] = None
                    continue
                try:
                    parsed[key] = float(raw)
                except ValueError:
                    parsed[key] = raw
            out.append(parsed)
    return out


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if c is None else c for c in row])


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Per-run figures


def render_run_figures(run_dir) -> list[str]:
    """Render the standard figures for one run directory; returns filenames."""
    run_dir = Path(run_dir)
    made = []

    vehicles = read_table(run_dir / "vehicles.csv") \
        if (run_dir / "vehicles.csv").exists() else []
    delays = [(r["bid"], r["delay_s"]) for r in vehicles
              if r["delay_s"] is not None and r["bid"] is not None]
    if delays:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.scatter([b for b, _ in delays], [d for _, d in delays], s=6, alpha=0.4)
        ax.set_xlabel("bid (cents)")
        ax.set_ylabel("delay (s)")
        if min(b for b, _ in delays) > 0:
            ax.set_xscale("log")
        ax.set_title("delay vs bid")
        _finish(fig, run_dir / "bid_delay.png")
        made.append("bid_delay.png")

    ma = read_table(run_dir / "moving_average.csv") \
        if (run_dir / "moving_average.csv").exists() else []
    if ma:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["n"] for r in ma], [r["avg_travel_s"] for r in ma])
        ax.set_xlabel("completed trips")
        ax.set_ylabel("moving average travel time (s)")
        _finish(fig, run_dir / "moving_average.png")
        made.append("moving_average.png")

    dens = read_table(run_dir / "density.csv") \
        if (run_dir / "density.csv").exists() else []
    if dens:
        by_link: dict[str, list] = {}
        for r in dens:
            by_link.setdefault(r["link"], []).append((r["t_s"], r["density_veh_km"]))
        top = sorted(by_link, key=lambda l: -max(m for _, m in by_link[l]))[:6]
        fig, ax = plt.subplots(figsize=(7, 4))
        for link in top:
            series = by_link[link]
            ax.plot([t for t, _ in series], [m for _, m in series], label=link)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("density (veh/km/lane)")
        ax.legend(fontsize=7)
        _finish(fig, run_dir / "density.png")
        made.append("density.png")

    dseries = read_table(run_dir / "reservation_distance.csv") \
        if (run_dir / "reservation_distance.csv").exists() else []
    if dseries:
        by_t: dict[float, list] = {}
        for r in dseries:
            by_t.setdefault(r["t_s"], []).append(r["d_i_m"])
        ts = sorted(by_t)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(ts, [sum(by_t[t]) / len(by_t[t]) for t in ts])
        ax.set_xlabel("time (s)")
        ax.set_ylabel("mean reservation distance d_i (m)")
        _finish(fig, run_dir / "reservation_distance.png")
        made.append("reservation_distance.png")

    prices = read_table(run_dir / "prices.csv") \
        if (run_dir / "prices.csv").exists() else []
    if prices:
        by_link = {}
        for r in prices:
            by_link.setdefault(r["link"], []).append((r["t_s"], r["price"]))
        top = sorted(by_link, key=lambda l: -max(p for _, p in by_link[l]))[:6]
        fig, ax = plt.subplots(figsize=(7, 4))
        for link in top:
            series = by_link[link]
            ax.plot([t for t, _ in series], [p for _, p in series], label=link)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("price (cents)")
        ax.legend(fontsize=7)
        _finish(fig, run_dir / "prices.png")
        made.append("prices.png")

    return made


# ---------------------------------------------------------------------------
# Experiment aggregation (pure folds over stored run directories)


def run_dirs(out_dir) -> list[Path]:
    root = Path(out_dir) / "runs"
    if not root.exists():
        return []
    return sorted(p for p in root.iterdir() if (p / "manifest.json").exists())


def load_manifest(run_dir) -> dict:
    with open(Path(run_dir) / "manifest.json") as fh:
        return json.load(fh)


def mean_delay_by_bid(run_dir) -> dict[float, list[float]]:
    out: dict[float, list[float]] = {}
    for r in read_table(Path(run_dir) / "vehicles.csv"):
        if r["delay_s"] is not None:
            out.setdefault(r["bid"], []).append(r["delay_s"])
    return out


def steady_state_d(run_dir, tail_fraction: float = 0.5) -> float:
    """Mean published reservation distance over the trailing window."""
    rows = read_table(Path(run_dir) / "reservation_distance.csv")
    if not rows:
        return float("nan")
    t_max = max(r["t_s"] for r in rows)
    cut = t_max * (1.0 - tail_fraction)
    tail = [r["d_i_m"] for r in rows if r["t_s"] >= cut]
    return sum(tail) / len(tail)


def bucket_normalized_delay(run_dir, edges=(0, 50, 100, 150, 200)) -> dict[str, list[float]]:
    """Completed-vehicle normalized delays grouped by bid bucket."""
    out: dict[str, list[float]] = {}
    for r in read_table(Path(run_dir) / "vehicles.csv"):
        if r["normalized_delay"] is None or r["bid"] is None:
            continue
        for lo, hi in zip(edges, edges[1:]):
            if lo <= r["bid"] < hi:
                out.setdefault(f"{lo}-{hi}", []).append(r["normalized_delay"])
                break
    return out


def final_moving_average(run_dir) -> float | None:
    rows = read_table(Path(run_dir) / "moving_average.csv")
    return rows[-1]["avg_travel_s"] if rows else None


def density_series(run_dir, link: str) -> list[tuple[float, float]]:
    return [(r["t_s"], r["density_veh_km"])
            for r in read_table(Path(run_dir) / "density.csv") if r["link"] == link]


def busiest_link(run_dir, node: str | None = None) -> str:
    """Link with the highest peak density (optionally restricted to ids
    containing the node name, i.e. that junction's approaches)."""
    peak: dict[str, float] = {}
    for r in read_table(Path(run_dir) / "density.csv"):
        lid = r["link"]
        if node is not None and not lid.endswith(f">{node}"):
            continue
        peak[lid] = max(peak.get(lid, 0.0), r["density_veh_km"])
    return max(sorted(peak), key=lambda l: peak[l])


def completed_mean_delay(run_dir) -> float:
    delays = [r["delay_s"] for r in read_table(Path(run_dir) / "vehicles.csv")
              if r["delay_s"] is not None]
    return sum(delays) / len(delays) if delays else float("nan")


def rejected_total(run_dir) -> int:
    return int(sum(r["rejected"] for r in
                   read_table(Path(run_dir) / "intersections.csv")))
