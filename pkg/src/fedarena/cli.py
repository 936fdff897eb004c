"""Command line entry points: run one cell, sweep ratios, render reports.

    fedarena run <config> [--seed N] [--override sec.key=val ...]
    fedarena sweep <config> --ratios 0.1 0.3 ... [--workers N] [...]
    fedarena report <results-dir>

Output lands under --output, else the config's run.output, resolved
against the FEDARENA_OUTPUT environment variable (or the working
directory) when relative.  Sweeps skip cells whose manifest hash already
matches, so interrupted grids resume where they stopped.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

from .config import OUTPUT_ENV_VAR, Config, ConfigError, parse_config, serialize_config
from .results import (
    SUMMARY_COLUMNS,
    ResultStore,
    config_hash,
    find_cells,
    read_summary_csv,
    summary_csv_text,
)
from .scenarios import ImpactReport, run


def _load_config(path: str, overrides, seed) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from None
    cfg = parse_config(text, overrides)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg, spec=dataclasses.replace(cfg.spec, seed=seed), seeds=(seed,)
        )
    return cfg


def _output_dir(cfg: Config, flag_value) -> str:
    out = flag_value if flag_value else cfg.output
    if os.path.isabs(out):
        return out
    root = os.environ.get(OUTPUT_ENV_VAR, ".")
    return os.path.join(root, out)


def _reports_for(cfg: Config) -> list:
    """Execute every seed of the cell; s1 yields one report per attack."""
    reports = []
    for seed in cfg.seeds:
        spec = dataclasses.replace(cfg.spec, seed=seed)
        outcome = run(spec)
        if isinstance(outcome, ImpactReport):
            reports.append(outcome)
        else:
            reports.extend(outcome.reports)
    return reports


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.override, args.seed)
    out_dir = _output_dir(cfg, args.output)
    reports = _reports_for(cfg)
    store = ResultStore(out_dir)
    store.write(serialize_config(cfg), reports)
    for r in reports:
        print(
            f"seed {r.seed} attack {r.attack} defense {r.defense}: "
            f"psi_clean {r.psi_clean:.4f} psi_attacked {r.psi_attacked:.4f} impact {r.impact:.4f}"
        )
    print(f"wrote {store.path('manifest.json')}")
    return 0


def _sweep_cell(cfg: Config, ratio: float, seed: int):
    spec = dataclasses.replace(cfg.spec, ratio=ratio, seed=seed)
    cell_cfg = Config(spec=spec, seeds=(seed,), output=cfg.output)
    return cell_cfg, serialize_config(cell_cfg)


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.override, args.seed)
    out_dir = _output_dir(cfg, args.output)
    for ratio in args.ratios:
        if (ratio < 0.0 or ratio > 0.5) and not cfg.spec.allow_attacker_majority:
            raise ConfigError(
                f"sweep ratio {ratio} outside [0, 0.5]; set "
                "scenario.allow_attacker_majority=true to go further"
            )

    cells = []
    for ratio in args.ratios:
        for seed in cfg.seeds:
            cell_cfg, text = _sweep_cell(cfg, ratio, seed)
            digest = config_hash(text)
            store = ResultStore(os.path.join(out_dir, "cells", digest[:16]))
            cells.append((ratio, seed, cell_cfg, text, digest, store))

    def execute(cell):
        ratio, seed, cell_cfg, text, digest, store = cell
        if store.is_complete(digest):
            return ratio, seed, "cached"
        store.write(text, _reports_for(cell_cfg))
        return ratio, seed, "done"

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        for ratio, seed, status in pool.map(execute, cells):
            print(f"ratio {ratio} seed {seed}: {status}")

    rows = []
    for _, _, _, _, _, store in cells:
        rows.extend(store.read_rows())
    rows.sort(key=lambda r: (r["ratio"], r["attack"], r["defense"], r["seed"]))
    master = os.path.join(out_dir, "summary.csv")
    with open(master, "w", encoding="utf-8", newline="") as f:
        f.write(summary_csv_text(rows))
    print(f"wrote {master} ({len(rows)} rows)")
    return 0


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]+", "-", name.replace(" ", "")) or "none"


def cmd_report(args) -> int:
    cell_dirs = find_cells(args.results)
    rows = []
    for d in cell_dirs:
        rows.extend(read_summary_csv(os.path.join(d, "summary.csv")))
    if not rows:
        print(f"no results under {args.results}", file=sys.stderr)
        return 1
    rows.sort(key=lambda r: (r["attack"], r["defense"], r["ratio"], r["seed"]))

    widths = {c: max(len(c), *(len(_cell(r[c])) for r in rows)) for c in SUMMARY_COLUMNS}
    header = "  ".join(c.ljust(widths[c]) for c in SUMMARY_COLUMNS)
    print(header)
    print("-" * len(header))
    for r in rows:
        print("  ".join(_cell(r[c]).ljust(widths[c]) for c in SUMMARY_COLUMNS))

    plot_dir = os.path.join(args.results, "plot")
    os.makedirs(plot_dir, exist_ok=True)
    by_pair = {}
    for r in rows:
        by_pair.setdefault((r["attack"], r["defense"]), []).append(r)
    for (attack, defense), members in sorted(by_pair.items()):
        path = os.path.join(plot_dir, f"{_slug(attack)}__{_slug(defense)}.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write("ratio,seed,impact\n")
            for r in sorted(members, key=lambda r: (r["ratio"], r["seed"])):
                f.write(f"{r['ratio']!r},{r['seed']},{r['impact']!r}\n")
    master = os.path.join(plot_dir, "master.csv")
    with open(master, "w", encoding="utf-8", newline="") as f:
        f.write(summary_csv_text(rows))
    print(f"wrote {len(by_pair)} plot files + master under {plot_dir}")
    return 0


def _cell(value) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedarena",
        description="Deterministic federated learning attack/defense experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="path to an INI experiment config")
        p.add_argument("--seed", type=int, default=None, help="replace the config's seed list")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="SEC.KEY=VAL",
            help="override a config value (repeatable)",
        )
        p.add_argument("--output", default=None, help="output directory (else run.output)")

    p_run = sub.add_parser("run", help="execute one experiment cell")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a poisoning-ratio grid")
    common(p_sweep)
    p_sweep.add_argument("--ratios", type=float, nargs="+", required=True)
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="tabulate results and emit plot data")
    p_report.add_argument("results", help="directory holding completed cells")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
