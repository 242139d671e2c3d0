"""Command-line front end.

    ftc-sim run     --scenario 2 --filter ukf --feedback on --out run.csv
    ftc-sim compare --scenario 2 --seed 0 --out results/
    ftc-sim sweep   --out results/

Flags may also come from a flat key=value config file (--config FILE);
explicit flags win over file entries.  Exit codes: 0 success (logged filter
breakdowns included), 1 usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    FILTER_KINDS,
    ScenarioConfig,
    compare_runs,
    export_csv,
    format_comparison,
    run_scenario,
)

USAGE_ERROR = 1
IO_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 1 instead of argparse's 2
        raise _UsageError(message)


def _norm_filter(name: str) -> str:
    name = name.replace("-", "_").lower()
    if name not in FILTER_KINDS:
        raise _UsageError(f"unknown filter {name!r}; choose from {FILTER_KINDS}")
    return name


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise _UsageError(f"expected on/off, got {value!r}")


_CONFIG_KEYS = {
    "scenario": int,
    "filter": str,
    "modes": int,
    "feedback": str,
    "controller": str,
    "duration": float,
    "seed": int,
    "nodes": int,
    "horizon": float,
    "circle_radius": float,
    "circle_speed": float,
    "out": str,
}


def load_config_file(path: str | Path) -> dict:
    """Flat key=value lines; '#' starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise _UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise _UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _CONFIG_KEYS[key](value)
    return values


def _build_parser() -> _Parser:
    parser = _Parser(prog="ftc-sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: _Parser) -> None:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--scenario", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--duration", type=float)
        p.add_argument("--nodes", type=int)
        p.add_argument("--horizon", type=float)
        p.add_argument("--circle-radius", dest="circle_radius", type=float)
        p.add_argument("--circle-speed", dest="circle_speed", type=float)

    run = sub.add_parser("run", help="run one scenario and write its CSV log")
    add_common(run)
    run.add_argument("--filter", dest="filter_kind")
    run.add_argument("--modes", type=int)
    run.add_argument("--feedback")
    run.add_argument("--controller")
    run.add_argument("--out")

    comp = sub.add_parser("compare", help="run every filter on one scenario")
    add_common(comp)
    comp.add_argument("--feedback")
    comp.add_argument("--out", help="output directory")

    sweep = sub.add_parser("sweep", help="run the full scenario/filter grid")
    add_common(sweep)
    sweep.add_argument("--out", help="output directory")
    return parser


def _merge(args: argparse.Namespace) -> dict:
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(load_config_file(args.config))
    for key in _CONFIG_KEYS:
        attr = "filter_kind" if key == "filter" else key
        val = getattr(args, attr, None)
        if val is not None:
            merged[key] = val
    return merged


def _config_from(merged: dict) -> ScenarioConfig:
    kwargs = {}
    if "scenario" in merged:
        kwargs["scenario"] = int(merged["scenario"])
    if "filter" in merged:
        kwargs["filter_kind"] = _norm_filter(str(merged["filter"]))
    if "modes" in merged:
        kwargs["imm_modes"] = int(merged["modes"])
    if "feedback" in merged:
        fb = merged["feedback"]
        kwargs["feedback"] = fb if isinstance(fb, bool) else _parse_bool(str(fb))
    if "controller" in merged:
        kwargs["controller"] = str(merged["controller"]).lower()
    if "duration" in merged and merged["duration"] is not None:
        kwargs["duration"] = float(merged["duration"])
    if "seed" in merged:
        kwargs["seed"] = int(merged["seed"])
    if "nodes" in merged:
        kwargs["n_nodes"] = int(merged["nodes"])
    if "horizon" in merged:
        kwargs["horizon"] = float(merged["horizon"])
    if "circle_radius" in merged:
        kwargs["circle_radius"] = float(merged["circle_radius"])
    if "circle_speed" in merged:
        kwargs["circle_speed"] = float(merged["circle_speed"])
    try:
        return ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _cmd_run(args: argparse.Namespace) -> int:
    merged = _merge(args)
    cfg = _config_from(merged)
    out = merged.get("out")
    if not out:
        raise _UsageError("run requires --out FILE.csv")
    log = run_scenario(cfg)
    export_csv(log, out)
    print(f"wrote {log.n_rows} rows to {out}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    merged = _merge(args)
    out = merged.get("out")
    if not out:
        raise _UsageError("compare requires --out DIR")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    logs = []
    for kind in FILTER_KINDS:
        cfg = _config_from({**merged, "filter": kind})
        log = run_scenario(cfg)
        export_csv(log, out_dir / f"scenario{cfg.scenario}_{kind}.csv")
        logs.append(log)
        print(f"ran {kind}")
    table = format_comparison(compare_runs(logs))
    (out_dir / "comparison.txt").write_text(table + "\n")
    print(table)
    return 0


def _sweep_grid() -> list[dict]:
    grid: list[dict] = []
    for scenario in (1, 2, 3, 4):
        for kind in FILTER_KINDS:
            for feedback in (True, False):
                grid.append(
                    {"scenario": scenario, "filter": kind, "feedback": feedback}
                )
        if scenario == 4:
            for kind in ("imm_ekf", "imm_ukf"):
                for feedback in (True, False):
                    grid.append(
                        {
                            "scenario": scenario,
                            "filter": kind,
                            "modes": 5,
                            "feedback": feedback,
                        }
                    )
    for scenario in (2, 4):
        grid.append(
            {
                "scenario": scenario,
                "filter": "ukf",
                "feedback": True,
                "controller": "lmpc",
            }
        )
    return grid


def _cmd_sweep(args: argparse.Namespace) -> int:
    merged = _merge(args)
    out = merged.get("out")
    if not out:
        raise _UsageError("sweep requires --out DIR")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in _sweep_grid():
        cfg = _config_from({**merged, **spec})
        tag = "_".join(
            [
                f"s{cfg.scenario}",
                cfg.filter_kind + (f"{cfg.imm_modes}m" if "imm" in cfg.filter_kind else ""),
                "fb" if cfg.feedback else "nofb",
                cfg.controller,
            ]
        )
        log = run_scenario(cfg)
        export_csv(log, out_dir / f"{tag}.csv")
        print(f"ran {tag}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_sweep(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
