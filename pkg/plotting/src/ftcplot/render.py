"""Render simulation-log figures from ftc-sim CSV files.

Six figure kinds mirror the run analysis: trajectory vs the reference
circle, speed innovations against their 2-sigma band, wheel-radius estimates
vs truth, commanded wheel rates, mode probabilities, and a multi-run radius
error comparison.  Signals are drawn in blue, uncertainty bounds in red.

Rendering is read-only over its inputs and deterministic for a fixed input
and library version.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("trajectory", "innovations", "radii", "rates", "mode_probs", "filter_compare")

# Columns every run log carries, in schema order.
BASE_COLUMNS = [
    "t", "x", "y", "psi", "rR_true", "rL_true", "wR_cmd", "wL_cmd", "z",
    "xhat", "yhat", "psihat", "rRhat", "rLhat",
    "P11", "P22", "P33", "P44", "P55", "nu", "S",
]

_REQUIRED = {
    "trajectory": ["t", "x", "y"],
    "innovations": ["t", "nu", "S"],
    "radii": ["t", "rR_true", "rL_true", "rRhat", "rLhat"],
    "rates": ["t", "wR_cmd", "wL_cmd"],
    "mode_probs": ["t", "mu1"],
    "filter_compare": ["t", "rL_true", "rLhat"],
}

SIGNAL_COLOR = "tab:blue"
BOUND_COLOR = "tab:red"
TRUTH_COLOR = "black"


class SchemaError(ValueError):
    """The input file does not carry the run-log column schema."""


@dataclass(frozen=True)
class PlotSpec:
    """One figure request."""

    kind: str
    inputs: tuple[str, ...]
    output: str
    title: str | None = None
    circle_radius: float = 50.0
    circle_center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}; choose from {KINDS}")
        if not self.inputs:
            raise ValueError("at least one input file is required")


def load_log(path: str | Path, required: list[str]) -> dict[str, np.ndarray]:
    """Read a run log, validating that the required columns are present."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    for name in required:
        if name not in header:
            raise SchemaError(f"{path}: missing column {name!r}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    data: dict[str, np.ndarray] = {}
    for name in header:
        idx = header.index(name)
        if name == "solver_status":
            continue
        try:
            data[name] = np.array([float(row[idx]) for row in rows])
        except (ValueError, IndexError) as exc:
            raise SchemaError(f"{path}: column {name!r} is not numeric: {exc}") from exc
    data["_mode_columns"] = np.array(
        [int(c[2:]) for c in header if c.startswith("mu") and c[2:].isdigit()]
    )
    return data


def render(spec: PlotSpec) -> Path:
    """Render one figure and return its output path."""
    logs = [load_log(p, _REQUIRED[spec.kind]) for p in spec.inputs]
    fig, ax = plt.subplots(figsize=(7.5, 5.0), dpi=130)
    draw = {
        "trajectory": _draw_trajectory,
        "innovations": _draw_innovations,
        "radii": _draw_radii,
        "rates": _draw_rates,
        "mode_probs": _draw_mode_probs,
        "filter_compare": _draw_filter_compare,
    }[spec.kind]
    draw(ax, spec, logs)
    if spec.title:
        ax.set_title(spec.title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = Path(spec.output)
    try:
        fig.savefig(out)
    except OSError as exc:
        raise OSError(f"cannot write figure to {out}: {exc}") from exc
    finally:
        plt.close(fig)
    return out


def _label_for(path: str) -> str:
    return Path(path).stem


def _draw_trajectory(ax, spec: PlotSpec, logs) -> None:
    log = logs[0]
    ang = np.linspace(0, 2 * np.pi, 720)
    cx, cy = spec.circle_center
    ax.plot(
        cx + spec.circle_radius * np.cos(ang),
        cy + spec.circle_radius * np.sin(ang),
        color=BOUND_COLOR,
        linestyle="--",
        linewidth=1.0,
        label="reference path",
    )
    ax.plot(log["x"], log["y"], color=SIGNAL_COLOR, linewidth=1.2, label="robot")
    ax.plot(log["x"][0], log["y"][0], "o", color=TRUTH_COLOR, markersize=4)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")


def _draw_innovations(ax, spec: PlotSpec, logs) -> None:
    log = logs[0]
    t, nu, s = log["t"], log["nu"], log["S"]
    ok = np.isfinite(nu) & np.isfinite(s)
    bound = 2.0 * np.sqrt(s[ok])
    ax.plot(t[ok], nu[ok], color=SIGNAL_COLOR, linewidth=0.7, label="speed innovation")
    ax.plot(t[ok], bound, color=BOUND_COLOR, linewidth=1.2, label="2-sigma bound")
    ax.plot(t[ok], -bound, color=BOUND_COLOR, linewidth=1.2)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("innovation [m/s]")
    ax.legend(loc="best")


def _draw_radii(ax, spec: PlotSpec, logs) -> None:
    log = logs[0]
    t = log["t"]
    ax.plot(t, log["rR_true"], color=TRUTH_COLOR, linewidth=1.0, label="right truth")
    ax.plot(t, log["rRhat"], color=SIGNAL_COLOR, linewidth=1.0, label="right estimate")
    ax.plot(t, log["rL_true"], color=TRUTH_COLOR, linestyle="--", linewidth=1.0, label="left truth")
    ax.plot(t, log["rLhat"], color=BOUND_COLOR, linewidth=1.0, label="left estimate")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("wheel radius [m]")
    ax.legend(loc="best")


def _draw_rates(ax, spec: PlotSpec, logs) -> None:
    log = logs[0]
    ax.plot(log["t"], log["wR_cmd"], color=SIGNAL_COLOR, linewidth=0.9, label="right wheel")
    ax.plot(log["t"], log["wL_cmd"], color=BOUND_COLOR, linewidth=0.9, label="left wheel")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("commanded rate [rad/s]")
    ax.legend(loc="best")


def _draw_mode_probs(ax, spec: PlotSpec, logs) -> None:
    log = logs[0]
    modes = log["_mode_columns"]
    if modes.size == 0:
        raise SchemaError("mode_probs needs an IMM log with mu columns")
    for j in sorted(modes):
        ax.plot(log["t"], log[f"mu{j}"], linewidth=1.1, label=f"mode {j}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("mode probability")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(loc="best")


def _draw_filter_compare(ax, spec: PlotSpec, logs) -> None:
    for path, log in zip(spec.inputs, logs):
        # floor keeps exact-zero errors drawable on the log axis
        err = np.maximum(np.abs(log["rLhat"] - log["rL_true"]), 1e-9)
        ax.plot(log["t"], err, linewidth=1.0, label=_label_for(path))
    ax.set_xlabel("t [s]")
    ax.set_ylabel("|left-radius error| [m]")
    ax.set_yscale("log")
    ax.legend(loc="best")
