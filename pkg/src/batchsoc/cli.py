"""Command-line front end.

    batchsoc optimize CONFIG    scenario sets and the optimal-trajectory archive
    batchsoc design CONFIG      combination matrices per (method, structure)
    batchsoc evaluate CONFIG    closed-loop losses, tables and trajectory data
    batchsoc report CONFIG      figures and a markdown summary of the tables
    batchsoc run CONFIG         all of the above

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from batchsoc import experiments as ex
from batchsoc.structure import InfeasibleStructure
from batchsoc.trajectory_opt import NominalFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def cmd_optimize(cfg):
    state = ex.run_optimize(cfg)
    n = len(state.trajectories)
    bad = sum(not t.converged for t in state.trajectories.values())
    print(f"optimized {n} trajectories ({bad} not converged) -> {cfg.out / 'archive'}")
    return state


def cmd_design(cfg, state=None):
    state = state or ex.load_state(cfg)
    results = ex.run_design(state)
    for (m, s), res in results.items():
        print(f"{cfg.label(m, s)}: objective {res.objective:.6g}, residual {res.constraint_residual:.2e}")
    return results


def cmd_evaluate(cfg, state=None, designs=None):
    state = state or ex.load_state(cfg)
    reports = ex.run_evaluate(state, designs)
    header, rows = ex.loss_table(cfg, reports)
    print(format_table(header, rows))
    return reports


def cmd_report(cfg):
    from batchsoc.plotting import render_all

    made = render_all(cfg.out)
    header, rows = ex.read_stamped_csv(cfg.out / "tables" / "average_loss.csv")
    lines = [f"config hash `{cfg.hash()}`, seed {cfg.seed}", "", "## Average closed-loop loss", ""]
    lines += markdown_table(header, rows)
    stats = cfg.out / "tables" / "approximation_error_stats.csv"
    if stats.exists():
        h, r = ex.read_stamped_csv(stats)
        lines += ["", "## Absolute quadratic approximation error", ""] + markdown_table(h, r)
    lines += ["", "## Figures", ""] + [f"![{p.stem}](figures/{p.name})" for p in made]
    path = cfg.out / "report.md"
    path.write_text("\n".join(lines) + "\n")
    print(f"report -> {path}")
    return path


def format_table(header, rows):
    cells = [header] + [[r[0]] + [f"{float(v):.6f}" for v in r[1:]] for r in rows]
    widths = [max(len(str(row[j])) for row in cells) for j in range(len(header))]
    return "\n".join("  ".join(str(v).rjust(w) for v, w in zip(row, widths)) for row in cells)


def markdown_table(header, rows):
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        out.append("| " + " | ".join([r[0]] + [f"{float(v):.6f}" for v in r[1:]]) + " |")
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="batchsoc", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("optimize", "design", "evaluate", "report", "run"):
        sp = sub.add_parser(name)
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("-o", "--output-dir", help="override output_dir")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ex.ExperimentConfig.load(args.config)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        if args.command == "optimize":
            cmd_optimize(cfg)
        elif args.command == "design":
            cmd_design(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "report":
            cmd_report(cfg)
        else:
            state = cmd_optimize(cfg)
            designs = cmd_design(cfg, state)
            cmd_evaluate(cfg, state, designs)
            cmd_report(cfg)
    except (ex.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NominalFailure, InfeasibleStructure, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
