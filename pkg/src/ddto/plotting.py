"""PNG figures from a run's ``plotdata/`` series and SCP traces.

Only the CLI's ``--report`` path imports this module, so matplotlib is not
loaded for ordinary solves.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_long(path: Path) -> dict[str, dict[str, list[float]]]:
    """target label -> column -> values."""
    out: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    if not path.exists():
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            lab = row.pop("target")
            for k, v in row.items():
                out[lab][k].append(float(v) if v != "" else float("nan"))
    return out


def _series_plot(ax, data, col, label_fmt="target {}"):
    for lab in sorted(data, key=int):
        ax.plot(data[lab]["t"], data[lab][col], marker=".", ms=3, lw=1, label=label_fmt.format(lab))


def _bound(ax, value, text):
    if value is not None:
        ax.axhline(value, color="k", ls="--", lw=0.8)
        ax.annotate(text, (0, value), textcoords="offset points", xytext=(2, 2), fontsize=7,
                    xycoords=("axes fraction", "data"))


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(out_dir) -> list[Path]:
    """Render every figure that the available data supports; returns written paths."""
    out = Path(out_dir)
    pd = out / "plotdata"
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    bounds = json.loads((pd / "bounds.json").read_text()) if (pd / "bounds.json").exists() else {}
    written = []

    pos = _read_long(pd / "position.csv")
    if pos:
        fig = plt.figure(figsize=(6, 5))
        ax = fig.add_subplot(projection="3d")
        for lab in sorted(pos, key=int):
            ax.plot(pos[lab]["rx"], pos[lab]["ry"], pos[lab]["rz"], marker=".", ms=3, lw=1, label=f"target {lab}")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.legend(fontsize=7)
        written.append(_save(fig, rep / "trajectories_3d.png"))
        fig, ax = plt.subplots(figsize=(6, 4))
        for lab in sorted(pos, key=int):
            ax.plot(pos[lab]["rx"], pos[lab]["ry"], marker=".", ms=3, lw=1, label=f"target {lab}")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(fontsize=7)
        written.append(_save(fig, rep / "trajectories_xy.png"))

    panels = [("speed.csv", "speed", "speed [m/s]", "v_max"), ("thrust.csv", "thrust", "thrust [m/s^2]", "u_max"),
              ("pointing.csv", "angle_deg", "pointing angle [deg]", "delta_max_deg"),
              ("cost.csv", "cost", "cumulative cost", "l_max")]
    for fname, col, ylabel, bkey in panels:
        data = _read_long(pd / fname)
        if not data:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        _series_plot(ax, data, col)
        _bound(ax, bounds.get(bkey), bkey)
        if col == "thrust":
            _bound(ax, bounds.get("u_min"), "u_min")
        ax.set_xlabel("t [s]")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        written.append(_save(fig, rep / f"{Path(fname).stem}.png"))

    for trace in sorted(out.glob("scp_trace_round*.csv")):
        with open(trace, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            continue
        it = [int(r["iteration"]) for r in rows]
        fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
        for key in ("defect", "step", "penalty"):
            if key in rows[0]:
                vals = [max(float(r[key]), 1e-16) if r[key] not in ("", "nan") else float("nan") for r in rows]
                axes[0].semilogy(it, vals, label=key, lw=1)
        axes[0].legend(fontsize=7)
        axes[1].plot(it, [float(r["trunk_time"]) for r in rows], lw=1)
        axes[1].set_ylabel("trunk time [s]")
        axes[1].set_xlabel("iteration")
        written.append(_save(fig, rep / f"{trace.stem}.png"))
    return written
