"""CSV emission and Table-style summaries."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..errors import ConfigError

SIM_COLUMNS = ("method", "m", "rep", "client", "sq_error")
OPTIMIZE_COLUMNS = ("iter", "dist_sq", "objective", "between_rounds", "within_rounds_json")
LOGISTIC_COLUMNS = ("method", "rep", "client", "cross_entropy", "accuracy")
SCHEMAS = {SIM_COLUMNS: "sim", OPTIMIZE_COLUMNS: "optimize", LOGISTIC_COLUMNS: "logistic"}

_TYPES = {
    SIM_COLUMNS: (str, int, int, int, float),
    OPTIMIZE_COLUMNS: (int, float, float, int, str),
    LOGISTIC_COLUMNS: (str, int, int, float, float),
}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip form: byte-stable across runs
    return str(v)


def validate_row(columns, row) -> None:
    types = _TYPES[tuple(columns)]
    if len(row) != len(types):
        raise ConfigError(f"row {row!r} does not match schema {columns}")
    for val, typ, name in zip(row, types, columns):
        if typ is float and not isinstance(val, (float, int, np.floating, np.integer)):
            raise ConfigError(f"column {name} expects a number, got {val!r}")
        if typ is int and not isinstance(val, (int, np.integer)):
            raise ConfigError(f"column {name} expects an integer, got {val!r}")
        if typ is str and not isinstance(val, str):
            raise ConfigError(f"column {name} expects text, got {val!r}")


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                validate_row(columns, row)
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_csv(path):
    """Rows of a harness CSV, converted to the schema's column types."""
    path = Path(path)
    try:
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header not in _TYPES:
                raise ConfigError(f"{path}: unrecognized header {header}")
            types = _TYPES[header]
            return header, [tuple(t(v) for t, v in zip(types, row)) for row in reader]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except (StopIteration, ValueError) as exc:
        raise ConfigError(f"{path}: malformed CSV ({exc})") from exc


METRICS = ("sq_error", "distance")


def summarize_sim_rows(rows, metric: str = "sq_error") -> dict:
    """``{(method, m): (avg, sd, max)}``: per replication the mean, SD and max over
    clients, then each averaged over replications.

    ``metric="distance"`` summarizes the unsquared distances ``||theta_hat_i - theta_i*||``.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")
    per = defaultdict(lambda: defaultdict(list))
    for method, m, rep, _client, err in rows:
        err = float(err)
        per[(method, int(m))][int(rep)].append(err if metric == "sq_error" else math.sqrt(err))
    out = {}
    for key, reps in per.items():
        stats = np.array([[np.mean(v), np.std(v, ddof=1) if len(v) > 1 else 0.0, np.max(v)]
                          for _, v in sorted(reps.items())])
        out[key] = tuple(float(x) for x in stats.mean(axis=0))
    return out


def method_means(rows, metric: str = "sq_error") -> dict:
    """``{(method, m): mean over replications of the client-averaged error}``."""
    return {k: v[0] for k, v in summarize_sim_rows(rows, metric).items()}


def format_sim_report(rows, methods=None, m_grid=None) -> str:
    """Squared-error table followed by the same summary of unsquared distances."""
    return ("squared error ||theta_hat - theta*||^2\n"
            + format_sim_table(summarize_sim_rows(rows), methods, m_grid)
            + "\ndistance ||theta_hat - theta*||\n"
            + format_sim_table(summarize_sim_rows(rows, "distance"), methods, m_grid))


def format_sim_table(summary: dict, methods=None, m_grid=None) -> str:
    methods = methods or sorted({k[0] for k in summary})
    m_grid = m_grid or sorted({k[1] for k in summary})
    head = ["method"]
    for m in m_grid:
        head += [f"m={m} Avg (SD)", f"m={m} Max"]
    lines = [head]
    for method in methods:
        line = [method]
        for m in m_grid:
            if (method, m) in summary:
                avg, sd, mx = summary[(method, m)]
                line += [f"{avg:.3f} (±{sd:.3f})", f"{mx:.3f}"]
            else:
                line += ["-", "-"]
        lines.append(line)
    widths = [max(len(r[c]) for r in lines) for c in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in lines) + "\n"


def format_logistic_table(rows) -> str:
    by = defaultdict(list)
    for method, _rep, _client, ce, acc in rows:
        by[method].append((ce, acc))
    lines = ["method  mean_ce  mean_acc  clipped"]
    for method, vals in sorted(by.items()):
        arr = np.array(vals)
        clipped = int(np.sum(arr[:, 0] >= 100.0))
        lines.append(f"{method:<6}  {arr[:, 0].mean():.4f}  {arr[:, 1].mean():.4f}  {clipped}")
    return "\n".join(lines) + "\n"


def format_optimize_table(path, rows) -> str:
    last = rows[-1]
    dist = last[1]
    return (f"{path}: {len(rows)} checkpoints, final iter {last[0]}, dist_sq "
            f"{dist:.6g}{'' if math.isfinite(dist) else ' (no reference)'}, between-cluster rounds {last[3]}, "
            f"within-cluster rounds {last[4]}\n")


def report_files(paths) -> str:
    """Aggregate harness CSVs into text tables (all files of one kind are pooled)."""
    groups = defaultdict(list)
    parts = []
    for p in paths:
        header, rows = read_csv(p)
        kind = SCHEMAS[header]
        if kind == "optimize":
            parts.append(format_optimize_table(p, rows))
        else:
            groups[kind].extend(rows)
    if groups.get("sim"):
        parts.insert(0, format_sim_report(groups["sim"]))
    if groups.get("logistic"):
        parts.append(format_logistic_table(groups["logistic"]))
    return "\n".join(parts)
