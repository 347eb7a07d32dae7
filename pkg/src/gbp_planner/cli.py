"""Command-line entry point: run scenario sweeps and tabulate their summaries.

    gbp-planner run --scenario circle --seeds 1..5 --set circle.n_robots=5,10 --out runs/
    gbp-planner table table3 runs/summary.json
    gbp-planner flow --rates 1,2,3 --seeds 0 --out flow/

``--scenario`` takes a config file or a built-in scenario kind.  A ``--set`` value
with commas becomes a sweep axis; the run grid is the product of all axes and seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import (
    KINDS,
    ConfigError,
    ScenarioConfig,
    apply_override,
    builtin_config,
    config_to_text,
    load_config,
    parse_config,
)
from .simulator import run, write_run

OUT_ENV = "GBP_PLANNER_OUT"
ABSENT = "absent"
TABLE_KEYS = {"table1": "comm.r_c", "table3": "comm.gamma", "flow": "junction.q_in"}
DEFAULT_GRIDS = {"table1": "20,40,60,80", "table3": "0,0.2,0.5,0.8"}


def parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        seeds = list(range(int(lo), int(hi) + 1))
    else:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    if not seeds:
        raise ValueError(f"empty seed list {text!r}")
    return seeds


def expand_overrides(items: list[str]) -> list[list[str]]:
    """Cartesian product of comma-separated ``--set`` values; custom-section lists stay whole."""
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        if key.strip().startswith("custom.") or "," not in raw:
            axes.append([item])
        else:
            axes.append([f"{key}={v.strip()}" for v in raw.split(",")])
    return [list(combo) for combo in itertools.product(*axes)]


def base_config(scenario: str) -> ScenarioConfig:
    if scenario in KINDS and not Path(scenario).exists():
        return builtin_config(scenario)
    return load_config(scenario)


def _stem(overrides: list[str], seed: int) -> str:
    """File-safe run name; long or exotic override values collapse to a short digest."""
    parts = []
    for item in overrides:
        part = item.replace("=", "-")
        if len(part) > 40 or re.search(r"[^\w.+-]", part):
            key = item.split("=", 1)[0]
            part = f"{key}-{hashlib.sha1(item.encode()).hexdigest()[:8]}"
        parts.append(part)
    return "_".join(parts + [f"seed{seed}"])


def _aggregate(rows: list[dict]) -> dict:
    out = {"runs": len(rows), "incomplete": sum(r["status"] != "complete" for r in rows)}
    for key in ("makespan", "mean_distance", "mean_ldj", "collisions"):
        vals = [r[key] for r in rows if isinstance(r.get(key), (int, float))]
        out[key] = float(np.mean(vals)) if vals else None
        out[key + "_std"] = float(np.std(vals)) if len(vals) > 1 else (0.0 if vals else None)
    flows = [r["flow"] for r in rows if "flow" in r]
    if flows:
        out["q_out"] = float(np.mean([f["q_out"] for f in flows]))
        out["q_in_measured"] = float(np.mean([f["q_in"] for f in flows]))
        out["violations"] = int(sum(f["correctness_violations"] for f in flows))
    return out


def summarize_runs(rows: list[dict]) -> dict:
    """Group per-run rows by override combination; a pure function of the rows."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(json.dumps(row["overrides"], sort_keys=True), []).append(row)
    return {
        "runs": rows,
        "groups": [{"overrides": json.loads(key), **_aggregate(members)} for key, members in groups.items()],
    }


def run_command(scenario: str, seeds: list[int], sets: list[str], out: Path,
                max_ticks: int | None = None, log=print) -> int:
    base = base_config(scenario)
    rows = []
    for combo in expand_overrides(sets):
        for seed in seeds:
            cfg = parse_config(config_to_text(base), combo + [f"scenario.seed={seed}"])
            if max_ticks is not None:
                apply_override(cfg, f"scenario.max_ticks={max_ticks}")
            result = run(cfg)
            stem = _stem(combo, seed)
            write_run(result, out, stem)
            summary = metrics.summarize(result)
            (out / f"{stem}.metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            (out / f"{stem}.metrics.csv").write_text(metrics.metrics_csv(metrics.robot_metrics(result)))
            overrides = dict(o.split("=", 1) for o in combo)
            rows.append({"overrides": overrides, "stem": stem, **summary})
            log(f"{stem}: {result.status} ticks={result.ticks} makespan={summary['makespan']} "
                f"collisions={summary['collisions']}")
    doc = summarize_runs(rows)
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0 if all(r["status"] == "complete" for r in rows) else 2


def _fmt(value, digits: int = 2) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}" if math.isfinite(value) else str(value)
    return str(value)


TABLE_COLUMNS = {
    "table1": [("r_C", None), ("makespan", "makespan"), ("distance", "mean_distance"),
               ("LDJ", "mean_ldj"), ("collisions", "collisions")],
    "table3": [("gamma", None), ("makespan", "makespan"), ("collisions", "collisions")],
    "flow": [("Q_in", None), ("Q_out", "q_out"), ("violations", "violations")],
}


def table_command(kind: str, inputs: list[Path], grid: list[float] | None = None) -> str:
    key = TABLE_KEYS[kind]
    groups = []
    for path in inputs:
        path = Path(path)
        if path.is_dir():
            path = path / "summary.json"
        groups += json.loads(path.read_text())["groups"]
    cells: dict = {}
    for g in groups:
        if key in g["overrides"]:
            cells[float(g["overrides"][key])] = g
    values = grid if grid is not None else sorted(cells)
    columns = TABLE_COLUMNS[kind]
    lines = ["\t".join(name for name, _ in columns + [("runs", None)])]
    for v in values:
        g = cells.get(float(v))
        if g is None:
            lines.append("\t".join([_fmt(float(v), 3)] + [ABSENT] * len(columns)))
            continue
        row = [_fmt(float(v), 3)] + [_fmt(g.get(field)) for _, field in columns[1:]]
        flag = f"{g['runs']}" + (f" ({g['incomplete']} incomplete)" if g["incomplete"] else "")
        lines.append("\t".join(row + [flag]))
    return "\n".join(lines)


def _floats(text: str | None) -> list[float] | None:
    return None if text is None else [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbp-planner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seeds", default="0", help="a..b or comma list")
        p.add_argument("--set", action="append", default=[], dest="sets", metavar="KEY=VALUE")
        p.add_argument("--out", default=os.environ.get(OUT_ENV, "runs"))
        p.add_argument("--max-ticks", type=int, default=None)

    p_run = sub.add_parser("run", help="run a scenario sweep")
    p_run.add_argument("--scenario", required=True, help="config file or built-in kind")
    common(p_run)

    p_table = sub.add_parser("table", help="tabulate sweep summaries")
    p_table.add_argument("kind", choices=sorted(TABLE_KEYS))
    p_table.add_argument("inputs", nargs="+", type=Path)
    p_table.add_argument("--grid", default=None, help="comma list of expected sweep values")

    p_flow = sub.add_parser("flow", help="junction Q_in sweep followed by the flow table")
    p_flow.add_argument("--scenario", default="junction")
    p_flow.add_argument("--rates", default="1,2")
    common(p_flow)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "table":
            grid = _floats(args.grid if args.grid is not None else DEFAULT_GRIDS.get(args.kind))
            print(table_command(args.kind, args.inputs, grid))
            return 0
        out = Path(args.out)
        seeds = parse_seeds(args.seeds)
        if args.command == "run":
            return run_command(args.scenario, seeds, args.sets, out, args.max_ticks)
        sets = args.sets + [f"junction.q_in={args.rates}"]
        status = run_command(args.scenario, seeds, sets, out, args.max_ticks)
        print(table_command("flow", [out / "summary.json"], _floats(args.rates)))
        return status
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
