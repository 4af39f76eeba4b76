"""Batch runner: seeded simulations over a grid of policies, p, pv_mean and T.

Writes ``results.csv`` (one row per run), ``summary.csv`` (mean and standard
deviation over seeds per cell) and a plain-text ``summary.txt``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, config_from_mapping, load_document, sweep_section
from .simkit.metrics import MetricsReport
from .simkit.scenario import ScenarioConfig
from .simkit.world import simulate

SCHEMA = "mecsched-sweep/1"
OUTPUT_ENV = "MECSCHED_OUTPUT_DIR"
CELL_COLUMNS = ("policy", "p", "pv_mean", "T")
METRIC_COLUMNS = tuple(f.name for f in dataclasses.fields(MetricsReport) if f.name != "series")

log = logging.getLogger("mecsched")


@dataclass
class RunManifest:
    base: ScenarioConfig
    output_dir: Path
    policies: list[str] = field(default_factory=lambda: ["ease"])
    p_values: list[float] = field(default_factory=lambda: [0.25])
    pv_values: list[float] = field(default_factory=lambda: [370.0])
    T_values: list[int] = field(default_factory=lambda: [5])
    seeds: list[int] = field(default_factory=lambda: [0])
    config_path: Optional[Path] = None

    def __post_init__(self):
        for name in ("policies", "p_values", "pv_values", "T_values", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"sweep axis {name} needs at least one value")

    def cells(self):
        return itertools.product(self.policies, self.p_values, self.pv_values, self.T_values)

    def configs(self):
        """Every (cell, seed, config) in output order; invalid cells raise ConfigError."""
        for policy, p, pv, T in self.cells():
            for seed in self.seeds:
                try:
                    cfg = dataclasses.replace(self.base, policy=policy, p=float(p), pv_mean=float(pv),
                                              T=int(T), seed=int(seed))
                except Exception as exc:
                    raise ConfigError(f"cell policy={policy} p={p} pv_mean={pv} T={T}: {exc}") from None
                yield (policy, p, pv, T), seed, cfg


def fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def _cell_key(cell) -> list[str]:
    policy, p, pv, T = cell
    return [policy, fmt(float(p)), fmt(float(pv)), fmt(int(T))]


def run_sweep(manifest: RunManifest, runner=simulate) -> int:
    """Execute every run of the manifest; returns the process exit code."""
    out = manifest.output_dir
    out.mkdir(parents=True, exist_ok=True)
    runs = list(manifest.configs())
    results: dict[tuple, list[MetricsReport]] = {}
    failures = 0
    with open(out / "results.csv", "w", newline="") as fh:
        fh.write(f"# schema: {SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CELL_COLUMNS) + ["seed", "status"] + list(METRIC_COLUMNS))
        for k, (cell, seed, cfg) in enumerate(runs, 1):
            start = time.perf_counter()
            try:
                report = runner(cfg)
            except Exception as exc:  # keep going, record the failure
                failures += 1
                log.error("run %d/%d %s seed=%d failed: %s", k, len(runs), cell, seed, exc)
                writer.writerow(_cell_key(cell) + [str(seed), f"failed:{type(exc).__name__}"]
                                + [""] * len(METRIC_COLUMNS))
                fh.flush()
                continue
            results.setdefault(cell, []).append(report)
            scalars = report.scalars()
            writer.writerow(_cell_key(cell) + [str(seed), "ok"] + [fmt(scalars[c]) for c in METRIC_COLUMNS])
            fh.flush()
            log.info("run %d/%d %s seed=%d eta=%.4f (%.1fs)", k, len(runs), cell, seed,
                     report.efficiency, time.perf_counter() - start)
    _write_summary(manifest, results)
    return 1 if failures else 0


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def summarize(results: dict[tuple, list[MetricsReport]], cells) -> list[list[str]]:
    rows = []
    for cell in cells:
        reports = results.get(cell)
        if not reports:
            continue
        row = _cell_key(cell) + [str(len(reports))]
        for col in METRIC_COLUMNS:
            mean, std = _mean_std([float(r.scalars()[col]) for r in reports])
            row += [fmt(mean), fmt(std)]
        rows.append(row)
    return rows


def _write_summary(manifest: RunManifest, results) -> None:
    header = list(CELL_COLUMNS) + ["runs"]
    for col in METRIC_COLUMNS:
        header += [f"{col}_mean", f"{col}_std"]
    rows = summarize(results, manifest.cells())
    with open(manifest.output_dir / "summary.csv", "w", newline="") as fh:
        fh.write(f"# schema: {SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    (manifest.output_dir / "summary.txt").write_text(render_summary(header, rows))


def render_summary(header: list[str], rows: list[list[str]]) -> str:
    shown = ["efficiency", "drop_rate", "avg_processing_power", "avg_migration_power",
             "min_latency_fraction", "migrations"]
    buf = io.StringIO()
    cols = ["policy", "p", "pv_mean", "T", "runs"] + shown
    buf.write("  ".join(f"{c:>12}" for c in cols) + "\n")
    for row in rows:
        rec = dict(zip(header, row))
        cells = [rec[c] for c in ("policy", "p", "pv_mean", "T", "runs")]
        for c in shown:
            mean, std = float(rec[f"{c}_mean"]), float(rec[f"{c}_std"])
            cells.append(f"{mean:.4g}±{std:.2g}")
        buf.write("  ".join(f"{c:>12}" for c in cells) + "\n")
    return buf.getvalue()


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mecsched", description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", help="YAML scenario file (defaults when omitted)")
    ap.add_argument("-o", "--output-dir", default=os.environ.get(OUTPUT_ENV, "results"),
                    help=f"output directory (default: ${OUTPUT_ENV} or ./results)")
    ap.add_argument("--policy", type=lambda s: [v for v in s.split(",") if v], help="comma-separated policies")
    ap.add_argument("--p", type=_float_list, help="comma-separated job generation probabilities")
    ap.add_argument("--pv-mean", type=_float_list, help="comma-separated mean PV powers (W)")
    ap.add_argument("--T", type=_int_list, help="comma-separated horizon lengths")
    ap.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    ap.add_argument("--duration", type=int, help="slots per run")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("-q", "--quiet", action="store_true")
    ap.add_argument("--validate-only", action="store_true", help="check the configuration and exit")
    return ap


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    data = load_document(args.config) if args.config else {}
    base = config_from_mapping(data)
    if args.duration is not None:
        base = config_from_mapping({**{k: v for k, v in data.items() if k != "sweep"}, "duration": args.duration})
    sweep = sweep_section(data)
    pick = lambda cli, key, default: cli if cli else sweep.get(key, default)
    return RunManifest(
        base=base,
        output_dir=Path(args.output_dir),
        policies=[str(v) for v in pick(args.policy, "policy", [base.policy])],
        p_values=[float(v) for v in pick(args.p, "p", [base.p])],
        pv_values=[float(v) for v in pick(args.pv_mean, "pv_mean", [base.pv_mean])],
        T_values=[int(v) for v in pick(args.T, "T", [base.T])],
        seeds=[int(v) for v in pick(args.seeds, "seeds", [base.seed])],
        config_path=Path(args.config) if args.config else None,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        manifest = manifest_from_args(args)
        runs = list(manifest.configs())
    except ConfigError as exc:
        print(f"mecsched: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.validate_only:
        print(f"ok: {len(runs)} runs")
        return 0
    code = run_sweep(manifest)
    if not args.quiet:
        sys.stdout.write((manifest.output_dir / "summary.txt").read_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
