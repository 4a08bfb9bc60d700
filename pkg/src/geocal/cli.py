"""Experiment runner: ``geocal run | report | validate``.

Output layout of ``run`` (under the config's ``output_dir``)::

    config.yaml                    canonical form of the config that produced the run
    INCOMPLETE | COMPLETE          exactly one of the two markers
    summary.csv, summary.json      one row per run id, mean and std over seeds
    <run_id>/seed_<s>/rounds.csv   one row per round
    <run_id>/seed_<s>/final.json   final metrics of that session
    <run_id>/seed_<s>/...          session files (prompt tables, shapes, projection.csv)

``rounds.csv`` columns: round, accuracy, domain_std, center_distance,
bytes_sent, then acc_domain_<d> for every domain. ``summary.csv`` columns are
listed in ``SUMMARY_COLUMNS``. Standard deviations over seeds are population
(ddof=0) values. Floats are printed with 9 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from geocal import federation, promptmodel
from geocal.config import ConfigError, ExperimentConfig, RunSpec, load_config

log = logging.getLogger("geocal")

OUTPUT_ROOT_ENV = "GEOCAL_OUTPUT_ROOT"
ROUND_COLUMNS = ["round", "accuracy", "domain_std", "center_distance", "bytes_sent"]
METRICS = ["accuracy", "domain_std", "center_distance"]
SUMMARY_COLUMNS = ["run_id", "cell", "beta", "calibration", "sampler", "prototypes", "seeds"] + [
    f"{m}_{s}" for m in METRICS for s in ("mean", "std")
]
REPORT_FILES = ["config.yaml", "summary.csv", "summary.json", "COMPLETE"]


def _g(x: float) -> str:
    return f"{x:.9g}"


def output_dir(cfg: ExperimentConfig) -> Path:
    """``output_dir`` from the config, re-rooted under ``$GEOCAL_OUTPUT_ROOT`` if set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(cfg.output_dir)
    return Path(root) / out.name if root else out


def seed_dir(out: Path, run: RunSpec, seed: int) -> Path:
    return out / run.run_id / f"seed_{seed}"


def write_round_csv(path: Path, records: list[federation.RoundRecord], num_domains: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS + [f"acc_domain_{d}" for d in range(num_domains)])
        for r in records:
            per_domain = [_g(r.per_domain.get(d, float("nan"))) for d in range(num_domains)]
            w.writerow(
                [r.round_index, _g(r.accuracy), _g(r.domain_std), _g(r.center_distance), r.bytes_sent] + per_domain
            )


def run_one(cfg: ExperimentConfig, run: RunSpec, seed: int, out: Path) -> dict:
    session_cfg = cfg.session_config(run, seed)
    target = seed_dir(out, run, seed)
    result = federation.run_session(session_cfg, target)
    test = result.state.test
    metrics = promptmodel.evaluate(
        result.table, test.embeddings, test.labels, test.domains, session_cfg.world.num_domains > 1
    )
    final = {
        "seed": seed,
        "rounds": len(result.records),
        "accuracy": metrics["accuracy"],
        "domain_std": metrics["domain_std"],
        "center_distance": result.report["mean_distance"],
    }
    # rounds.csv is written last; its presence with T rows marks the cell done
    (target / "final.json").write_text(json.dumps(final, sort_keys=True) + "\n")
    write_round_csv(target / "rounds.csv", result.records, session_cfg.world.num_domains)
    return final


def _is_done(path: Path, rounds: int) -> bool:
    rc = path / "rounds.csv"
    if not rc.is_file() or not (path / "final.json").is_file():
        return False
    with open(rc) as fh:
        return sum(1 for _ in fh) == rounds + 1


def summarize(cfg: ExperimentConfig, out: Path) -> tuple[list[dict], bool]:
    """Summary rows for every run id whose seeds are all done, plus a completeness flag."""
    rows, complete = [], True
    for run in cfg.runs():
        dirs = [seed_dir(out, run, s) for s in cfg.seeds]
        if not all(_is_done(d, cfg.session.rounds) for d in dirs):
            complete = False
            continue
        finals = [json.loads((d / "final.json").read_text()) for d in dirs]
        row = {
            "run_id": run.run_id,
            "cell": run.cell.name,
            "beta": run.beta,
            "calibration": run.cell.calibration,
            "sampler": run.cell.sampler,
            "prototypes": run.cell.prototypes,
            "seeds": len(finals),
        }
        for m in METRICS:
            vals = np.array([f[m] for f in finals], dtype=float)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        rows.append(row)
    return rows, complete


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _g(v)
    return str(v)


def write_summary(out: Path, rows: list[dict]) -> None:
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_cell(row[c]) for c in SUMMARY_COLUMNS])
    (out / "summary.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


def _mark(out: Path, complete: bool) -> None:
    (out / ("INCOMPLETE" if complete else "COMPLETE")).unlink(missing_ok=True)
    (out / ("COMPLETE" if complete else "INCOMPLETE")).write_text("")


def run_experiment(cfg: ExperimentConfig, out: Path, only: str | None = None) -> bool:
    runs = cfg.runs()
    if only is not None:
        runs = [r for r in runs if only in (r.run_id, r.cell.name)]
        if not runs:
            raise ConfigError(f"no cell named {only!r}; known: {', '.join(r.run_id for r in cfg.runs())}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump_yaml())
    _mark(out, False)
    for run in runs:
        for seed in cfg.seeds:
            final = run_one(cfg, run, seed, out)
            log.info("%s seed=%d acc=%.4f dist=%.4f", run.run_id, seed, final["accuracy"], final["center_distance"])
    rows, complete = summarize(cfg, out)
    write_summary(out, rows)
    _mark(out, complete)
    return complete


def format_table(rows: list[dict]) -> str:
    head = ["run_id", "beta", "seeds", "accuracy", "domain_std", "center_distance"]
    body = [
        [
            r["run_id"],
            f"{r['beta']:g}",
            str(r["seeds"]),
            *(f"{r[m + '_mean']:.4f} ± {r[m + '_std']:.4f}" for m in METRICS),
        ]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip() for line in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report(summary_dir: Path) -> str:
    """Check a finished run directory, copy projection files, return the table."""
    if not summary_dir.is_dir():
        raise FileNotFoundError(f"{summary_dir}: not a directory")
    missing = [f for f in REPORT_FILES if not (summary_dir / f).exists()]
    if (summary_dir / "INCOMPLETE").exists() or missing:
        raise FileNotFoundError(
            f"{summary_dir}: incomplete run directory; missing {', '.join(missing) or 'nothing'}"
            f" (expected {', '.join(REPORT_FILES)})"
        )
    cfg = ExperimentConfig.model_validate(yaml.safe_load((summary_dir / "config.yaml").read_text()))
    rows = json.loads((summary_dir / "summary.json").read_text())
    proj = summary_dir / "projection"
    proj.mkdir(exist_ok=True)
    for run in cfg.runs():
        for seed in cfg.seeds:
            src = seed_dir(summary_dir, run, seed) / "projection.csv"
            if not src.is_file():
                raise FileNotFoundError(f"missing projection data: {src}")
            shutil.copyfile(src, proj / f"{run.run_id}_seed{seed}.csv")
    table = format_table(rows)
    (summary_dir / "report.txt").write_text(table + "\n")
    return table


def _load(path: str, seed_override: int | None) -> ExperimentConfig:
    cfg = load_config(path)
    if seed_override is not None:
        try:
            cfg = ExperimentConfig.model_validate({**cfg.canonical(), "seeds": [seed_override]})
        except ValueError as exc:
            raise ConfigError(f"--seed-override: {exc}") from exc
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geocal", description="Federated prompt calibration experiments")
    p.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every seed x cell of a config")
    r.add_argument("config")
    r.add_argument("--seed-override", type=int, help="replace the seed list with this one seed")
    r.add_argument("--cell", help="run only this cell (name or run id)")
    r.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    rep = sub.add_parser("report", help="print the summary table and export projections")
    rep.add_argument("dir")
    rep.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    v = sub.add_parser("validate", help="check a config and print its canonical form")
    v.add_argument("config")
    v.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            if not args.quiet:
                print(cfg.dump_yaml(), end="")
            return 0
        if args.command == "run":
            cfg = _load(args.config, args.seed_override)
            out = output_dir(cfg)
            complete = run_experiment(cfg, out, args.cell)
            log.info("wrote %s (%s)", out, "complete" if complete else "incomplete")
            return 0
        if args.command == "report":
            table = report(Path(args.dir))
            if not args.quiet:
                print(table)
            return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure; partial outputs keep their INCOMPLETE marker
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
