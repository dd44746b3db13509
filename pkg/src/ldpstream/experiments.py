"""Canned utility experiments and their CSV output.

Each experiment is a sweep over one axis of :class:`FleetConfig` against a
binary yes/no query. Two CSV files are written: the summary table (one row
per configuration) and a per-window detail file carrying the raw counts
every relative error was computed from.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .fleet import FleetConfig, SweepRow, sweep
from .query import Bucket, Query

OUT_DIR_ENV = "LDPSTREAM_OUT_DIR"

SUMMARY_HEADER = (
    "n_devices", "fraction", "p", "q", "window_s",
    "median_eta", "mean_eta", "std_eta", "n_windows", "interval_s",
)
DETAIL_HEADER = (
    "n_devices", "fraction", "p", "q", "window_s", "interval_s",
    "rep", "window_index", "n_answers", "y_true", "y_est", "eta",
)

OVERRIDABLE = {
    "n_devices", "sensitive_fraction", "answer_interval_seconds",
    "window_seconds", "churn_rate", "duration_seconds",
}


@dataclass(frozen=True)
class Experiment:
    base: FleetConfig
    axis: str
    values: tuple
    p: float
    q: float
    repetitions: int
    # also varied jointly with the main axis (error_vs_fraction)
    second_axis: str | None = None
    second_values: tuple = ()


def _one_window(n: int, fraction: float) -> FleetConfig:
    # every device answers exactly once inside a single window
    return FleetConfig(n, fraction, answer_interval_seconds=1, window_seconds=1, duration_seconds=1)


EXPERIMENTS: dict[str, Experiment] = {
    "error_vs_samplesize": Experiment(
        _one_window(100, 0.8), "n_devices", (100, 1_000, 10_000, 100_000), 0.5, 0.5, 50,
    ),
    "error_vs_fraction": Experiment(
        _one_window(100, 0.8), "n_devices", (100, 250, 500, 1_000), 0.5, 0.5, 50,
        second_axis="sensitive_fraction", second_values=(0.2, 0.4, 0.6, 0.8),
    ),
    "error_vs_frequency": Experiment(
        FleetConfig(1_000_000, 0.8, answer_interval_seconds=10, window_seconds=1, duration_seconds=10),
        "answer_interval_seconds", (1, 2, 5, 10, 20, 30), 0.75, 0.5, 1,
    ),
    "endtoend_million": Experiment(
        FleetConfig(1_000_000, 0.8, answer_interval_seconds=10, window_seconds=1, duration_seconds=100),
        "n_devices", (1_000_000,), 0.75, 0.5, 1,
    ),
}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    overrides: dict = field(default_factory=dict)
    repetitions: int | None = None
    master_seed: int = 0
    p: float | None = None
    q: float | None = None

    def violations(self) -> list[str]:
        out = []
        if self.name not in EXPERIMENTS:
            out.append(f"unknown experiment {self.name!r}; choose from {sorted(EXPERIMENTS)}")
        if self.repetitions is not None and self.repetitions < 1:
            out.append("repetitions must be >= 1")
        unknown = set(self.overrides) - OVERRIDABLE
        if unknown:
            out.append(f"cannot override {sorted(unknown)}")
        return out


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    axis: str
    rows: list[SweepRow]
    summary_csv: str
    detail_csv: str

    @property
    def summary_line(self) -> str:
        values = [getattr(r.config, self.axis) for r in self.rows]
        medians = [r.median_eta for r in self.rows]
        means = [r.mean_eta for r in self.rows]
        first, last = self.rows[0], self.rows[-1]
        return (
            f"{self.spec.name}: {self.axis} {min(values)}..{max(values)} "
            f"(p={first.p}, q={first.q}, rows={len(self.rows)}); "
            f"median eta {medians[0]:.5f} -> {medians[-1]:.5f}, "
            f"mean eta (last row) {means[-1]:.5f} over {last.n_windows} windows"
        )


def binary_query(query_id: str, p: float, q: float, epoch_seconds: float = 1.0) -> Query:
    """Yes/no query: bucket 0 holds "no" (value 0), bucket 1 holds "yes"."""
    return Query(
        query_id=query_id,
        analyst_id="bench",
        sensor="attribute",
        buckets=(Bucket(0, 1), Bucket(1, None)),
        p=p,
        q=q,
        epoch_seconds=epoch_seconds,
        t_start=0,
        t_end=1,
    )


def configs_for(spec: ExperimentSpec) -> tuple[Experiment, list[FleetConfig]]:
    exp = EXPERIMENTS[spec.name]
    base = exp.base.replace(**spec.overrides)
    axis_values = (spec.overrides[exp.axis],) if exp.axis in spec.overrides else exp.values
    if exp.second_axis is None:
        seconds = (None,)
    elif exp.second_axis in spec.overrides:
        seconds = (spec.overrides[exp.second_axis],)
    else:
        seconds = exp.second_values
    configs = []
    for s in seconds:
        for v in axis_values:
            cfg = base.replace(**{exp.axis: v})
            if s is not None:
                cfg = cfg.replace(**{exp.second_axis: s})
            configs.append(cfg)
    return exp, configs


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def summary_rows(rows: list[SweepRow]):
    for r in rows:
        c = r.config
        yield (
            c.n_devices, float(c.sensitive_fraction), float(r.p), float(r.q), float(c.window_seconds),
            r.median_eta, r.mean_eta, r.std_eta, r.n_windows, float(c.answer_interval_seconds),
        )


def detail_rows(rows: list[SweepRow]):
    for r in rows:
        c = r.config
        for d in r.details:
            yield (
                c.n_devices, float(c.sensitive_fraction), float(r.p), float(r.q),
                float(c.window_seconds), float(c.answer_interval_seconds),
                d["rep"], d["window_index"], d["n_answers"], d["y_true"], float(d["y_est"]), float(d["eta"]),
            )


def run_experiment(spec: ExperimentSpec, engine: str = "vectorized") -> ExperimentResult:
    problems = spec.violations()
    if problems:
        raise ValueError("; ".join(problems))
    exp, configs = configs_for(spec)
    for cfg in configs:
        cfg.check()
    p = exp.p if spec.p is None else spec.p
    q = exp.q if spec.q is None else spec.q
    query = binary_query(spec.name, p, q)
    query.params  # raises on an invalid (p, q)
    reps = exp.repetitions if spec.repetitions is None else spec.repetitions
    rows = sweep(configs, query, repetitions=reps, master_seed=spec.master_seed, engine=engine)
    return ExperimentResult(
        spec, exp.axis, rows, _csv(SUMMARY_HEADER, summary_rows(rows)), _csv(DETAIL_HEADER, detail_rows(rows)),
    )


def default_out_path(name: str) -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / f"{name}.csv"


def detail_path_for(out: Path) -> Path:
    return out.with_name(out.stem + ".windows.csv")


def write_result(result: ExperimentResult, out: str | Path | None = None) -> tuple[Path, Path]:
    out = Path(out) if out is not None else default_out_path(result.spec.name)
    out.parent.mkdir(parents=True, exist_ok=True)
    detail = detail_path_for(out)
    out.write_text(result.summary_csv, encoding="utf-8")
    detail.write_text(result.detail_csv, encoding="utf-8")
    return out, detail
