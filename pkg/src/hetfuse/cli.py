"""Command-line entry point: ``hetfuse {run,account,validate}``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .cf2 import FusionMethod
from .errors import ConfigError, HetfuseError, NumericalError
from .metrics import (TABLE2_SIZES, global_min_eig, nees_fraction_in_bounds, rmse_per_agent,
                      scenario_accounting, table2_topology)
from .simnet import PRESET_NAMES, WINDOWS, ScenarioConfig, load_config, monte_carlo, preset
from .varset import validate_topology

CSV_COLUMNS = ("run", "step", "agent", "nees", "rmse_contrib", "min_eig_vs_cent", "bytes_sent")
ACCOUNT_METHODS = ("cf", "bdf", "abdf", "hscf")


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, NaN to null."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(x, np.integer):
        return int(x)
    return x


def _scenario(args) -> ScenarioConfig:
    if args.config:
        return load_config(args.config)
    return preset(args.scenario)


def _methods(text: str | None, default: str) -> list[str]:
    names = [m for m in (text or default).split(",") if m.strip()]
    if not names:
        raise ConfigError("no fusion methods given")
    try:
        return [FusionMethod.parse(m.strip()).value for m in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_metrics_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in sorted(records, key=lambda r: r.run):
            for k in range(rec.steps):
                for c, agent in enumerate(rec.agents):
                    w.writerow((rec.run, k + 1, agent, repr(float(rec.nees[k, c])),
                                repr(float(rec.sq_err[k, c])), repr(float(rec.min_eig[k, c])),
                                int(rec.bytes_sent[k, c])))


def accounting_table(topology, methods=ACCOUNT_METHODS) -> dict:
    acc = scenario_accounting(topology, methods)
    cf = acc["cf"]
    out = {}
    for name, a in acc.items():
        out[name] = {
            "bytes": a.total_bytes,
            "kilobytes": a.total_bytes / 1000.0,
            "pct_cf": a.pct_cf,
            "comm_saving_pct": 100.0 - a.pct_cf,
            "max_local_states": a.max_local_states,
            "compute_cost": a.compute_cost,
            "compute_saving_pct": 100.0 * (1.0 - a.compute_cost / cf.compute_cost),
        }
    return out


def summarize(config: ScenarioConfig, results: dict, runs: int, seed: int, window: str) -> dict:
    out = {"scenario": config.name, "runs": runs, "seed": seed, "window": window,
           "steps": config.steps, "config": config.to_dict(), "methods": {}}
    for m, recs in results.items():
        good = [r for r in recs if r.ok]
        entry = {
            "failures": [{"run": r.run, "error": r.error} for r in recs if not r.ok],
            "nees_in_bounds": nees_fraction_in_bounds(recs),
            "min_eig_vs_cent": None if m == "central" else global_min_eig(recs),
        }
        if good:
            entry["rmse"] = rmse_per_agent(recs)
            if all(r.smooth_sq_err is not None for r in good):
                entry["rmse_smoothed"] = rmse_per_agent(recs, smoothed=True)
        out["methods"][m] = entry
    out["accounting"] = accounting_table(config.topology)
    return _clean(out)


def cmd_run(args) -> int:
    config = _scenario(args)
    if args.steps is not None:
        config = config.with_(steps=args.steps)
    methods = _methods(args.methods, config.method)
    window = args.window or config.window
    seed = config.seed if args.seed is None else args.seed
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = monte_carlo(config, args.runs, seed, methods, window)
    for m, recs in results.items():
        write_metrics_csv(out / f"metrics_{m}.csv", recs)
    summary = summarize(config, results, args.runs, seed, window)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    failed = sum(len(e["failures"]) for e in summary["methods"].values())
    if failed:
        print(f"hetfuse: {failed} method-run(s) failed numerically; see summary.json",
              file=sys.stderr)
        return 3
    print(f"wrote {len(results)} metric files and summary.json to {out}")
    return 0


def cmd_account(args) -> int:
    name = args.scenario
    if args.config:
        topo = load_config(args.config).topology
        name = args.config
    elif name.startswith("table2-"):
        size = name.split("-", 1)[1]
        if size not in TABLE2_SIZES:
            raise ConfigError(f"unknown accounting scenario {name!r}")
        topo = table2_topology(size)
    else:
        topo = preset(name).topology
    table = accounting_table(topo)
    if args.json:
        print(json.dumps(_clean({"scenario": name, "methods": table}), indent=2, sort_keys=True))
        return 0
    print(f"{name}: {topo.n_agents} agents, {len(topo.full_set())} variables "
          f"({topo.full_set().dim} states)")
    print(f"{'method':<8}{'bytes':>12}{'KB':>12}{'%CF':>10}{'states':>8}{'n^3':>12}")
    for m, r in table.items():
        print(f"{m:<8}{r['bytes']:>12d}{r['kilobytes']:>12.1f}{r['pct_cf']:>10.4f}"
              f"{r['max_local_states']:>8d}{r['compute_cost']:>12d}")
    return 0


def cmd_validate(args) -> int:
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from exc
        config = ScenarioConfig.from_dict(doc, check=False)
    else:
        config = preset(args.scenario)
    topo = config.topology
    problems = validate_topology(topo)
    for p in problems:
        print(f"{p.kind}: {p.message}", file=sys.stderr)
    if problems:
        return 2
    config.validate()
    print(f"ok: {config.name}, {topo.n_agents} agents, {len(topo.edges)} edges, "
          f"{len(topo.full_set())} variables")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp, choices=None):
        sp.add_argument("--scenario", default="static-5x6",
                        help=f"preset name ({', '.join(choices or PRESET_NAMES)})")
        sp.add_argument("--config", help="scenario JSON file (overrides --scenario)")

    r = sub.add_parser("run", help="Monte Carlo simulation of one or more fusion methods")
    scenario_args(r)
    r.add_argument("--methods", help="comma-separated: cf,fcf,bdf,abdf,hscf")
    r.add_argument("--runs", type=int, default=1)
    r.add_argument("--seed", type=int)
    r.add_argument("--window", choices=WINDOWS)
    r.add_argument("--steps", type=int, help="override the scenario step count")
    r.add_argument("--out", default="hetfuse-out")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("account", help="analytic communication and computation table")
    scenario_args(a, [*PRESET_NAMES, *(f"table2-{s}" for s in TABLE2_SIZES)])
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_account)

    v = sub.add_parser("validate", help="check topology and task-set assumptions")
    scenario_args(v)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hetfuse: configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"hetfuse: numerical failure: {exc}", file=sys.stderr)
        return 3
    except HetfuseError as exc:
        print(f"hetfuse: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
