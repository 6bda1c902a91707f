"""CSV / JSON exports of evaluation reports, ablation grids and plot data."""

from __future__ import annotations

import csv
import json
from typing import Iterable, Sequence

from .paths import PATHS
from .routing import EvaluationReport

UNDEFINED = "undefined"
OVERALL = "overall"


def fmt(value) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _scopes(report: EvaluationReport):
    yield OVERALL, report
    yield from report.by_dataset.items()


REPORT_COLUMNS = (
    ["policy", "dataset", "n", "accuracy", "avg_tokens"]
    + [f"count_{p.value}" for p in PATHS]
    + [f"cond_acc_{p.value}" for p in PATHS]
)


def report_rows(report: EvaluationReport) -> list[dict]:
    rows = []
    for scope, r in _scopes(report):
        row = {"policy": r.policy, "dataset": scope, "n": r.n,
               "accuracy": r.accuracy, "avg_tokens": r.avg_tokens}
        for p, c, a in zip(PATHS, r.counts, r.cond_accuracy):
            row[f"count_{p.value}"] = c
            row[f"cond_acc_{p.value}"] = a
        rows.append(row)
    return rows


def write_report(report: EvaluationReport, path, format: str = "csv") -> None:
    if format == "csv":
        write_csv(path, REPORT_COLUMNS, report_rows(report))
    elif format == "json":
        write_json(path, report.to_json())
    else:
        raise ValueError(f"unknown export format {format!r}")


def read_report_csv(path) -> list[dict]:
    """Parse a report CSV back into typed rows (undefined entries become None)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            typed = {}
            for k, v in row.items():
                if v == UNDEFINED:
                    typed[k] = None
                elif k in ("policy", "dataset"):
                    typed[k] = v
                elif k == "n" or k.startswith("count_"):
                    typed[k] = int(v)
                else:
                    typed[k] = float(v)
            out.append(typed)
    return out


def _datasets(reports: Sequence[EvaluationReport]) -> list[str]:
    return sorted({d for r in reports for d in r.by_dataset})


def ablation_grid(reports: Sequence[EvaluationReport]) -> tuple[list[str], list[dict]]:
    """Accuracy grid: one row per policy, one column per dataset plus overall."""
    columns = ["policy", *_datasets(reports), OVERALL]
    rows = []
    for r in reports:
        row = {"policy": r.policy, OVERALL: r.accuracy}
        for d, sub in r.by_dataset.items():
            row[d] = sub.accuracy
        rows.append(row)
    return columns, rows


def distribution_table(report: EvaluationReport) -> tuple[list[str], list[dict]]:
    """Selected-path counts per dataset (rows sum to the dataset's record count)."""
    columns = ["policy", "dataset", "n", *[p.value for p in PATHS]]
    rows = []
    for scope, r in _scopes(report):
        row = {"policy": r.policy, "dataset": scope, "n": r.n}
        row.update({p.value: c for p, c in zip(PATHS, r.counts)})
        rows.append(row)
    return columns, rows


def conditional_table(report: EvaluationReport) -> tuple[list[str], list[dict]]:
    """Accuracy among records routed to each path; never-selected paths are undefined."""
    columns = ["policy", "dataset", *[p.value for p in PATHS]]
    rows = []
    for scope, r in _scopes(report):
        row = {"policy": r.policy, "dataset": scope}
        row.update({p.value: a for p, a in zip(PATHS, r.cond_accuracy)})
        rows.append(row)
    return columns, rows


SCATTER_COLUMNS = ["policy", "dataset", "avg_tokens", "accuracy"]


def scatter_points(reports: Sequence[EvaluationReport]) -> list[dict]:
    """Token/accuracy points, one per (policy, dataset) and one per policy overall."""
    rows = []
    for r in reports:
        for scope, sub in _scopes(r):
            rows.append({"policy": r.policy, "dataset": scope,
                         "avg_tokens": sub.avg_tokens, "accuracy": sub.accuracy})
    return rows
