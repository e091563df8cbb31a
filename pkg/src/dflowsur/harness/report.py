"""Report emission: CSV tables plus one JSON document with the same content."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .. import diagnostics as diag
from ..geometry import COLUMNS
from .experiment import ROW_FIELDS

REPORT_SCHEMA = "dflowsur.report"
REPORT_VERSION = 1
FORMATS = ("csv", "json")


def fmt(value):
    """Six significant digits; integers verbatim, missing values empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return f"{value:.6g}"


def _json_value(text):
    """The JSON twin of a formatted CSV cell."""
    if text == "":
        return None
    if text == "nan":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def report_table(report):
    """Header and formatted rows of the main table."""
    rows = []
    for r in report.rows:
        rec = r.record()
        rows.append([rec["strategy"]] + [fmt(rec[k]) for k in ROW_FIELDS[1:]])
    return list(ROW_FIELDS), rows


def emit_report(report, out_dir, formats=FORMATS):
    """Write ``report.csv`` / ``report.json`` and the diagnostics tables.

    Diagnostics tables are always written, header-only when empty, so the
    set of files does not depend on the configuration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in formats:
        if f not in FORMATS:
            raise ValueError(f"unknown report format {f!r}")
    header, rows = report_table(report)
    written = {}
    if "csv" in formats:
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written["report_csv"] = out / "report.csv"
    if "json" in formats:
        doc = {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "seed": report.seed,
            "target": _json_value(fmt(report.target)),
            "evaluator": report.evaluator,
            "columns": header,
            "rows": [dict(zip(header, [row[0]] + [_json_value(c) for c in row[1:]])) for row in rows],
        }
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
        written["report_json"] = out / "report.json"

    written["designs"] = _write_designs(report, out / "designs.csv")
    written["alignment"] = _write_alignment(report, out / "alignment.csv")
    written["uq"] = diag.write_uq_table(report.uq.get("uncond"), out / "uq.csv")
    written["gap"] = diag.write_gap_table(report.gaps, out / "gap.csv")
    written["trace"] = _write_traces(report, out / "trace.csv")
    written["history"] = _write_histories(report, out / "history.csv")
    report.tables = {k: str(v) for k, v in written.items()}
    return written


def _write_designs(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "sample_id", "failed"] + COLUMNS)
        for k, r in enumerate(report.rows):
            if r.designs is None:
                continue
            for j, x in enumerate(r.designs):
                w.writerow([k, j, int(r.failed[j])] + [fmt(v) for v in x])
    return path


def _write_alignment(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "step", "t", "score", "defined"])
        for label, series in report.alignment.items():
            for run, step, t, s, ok in series.rows(label):
                w.writerow([run, step, fmt(t), fmt(s) if ok else "", int(ok)])
    return path


def _write_traces(report, path):
    """Energy rows, one line per step: median loss over live samples, mean guidance norm."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "step", "t", "loss", "grad_norm", "active"])
        for label, tr in report.traces.items():
            for i, t in enumerate(tr["t"]):
                w.writerow([label, i, fmt(t), fmt(tr["loss"][i]), fmt(tr["grad_norm"][i]), int(tr["active"][i])])
    return path


def _write_histories(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "sample_id", "iteration", "loss"])
        for label, runs in report.histories.items():
            for j, hist in enumerate(runs):
                for k, L in enumerate(hist):
                    w.writerow([label, j, k, fmt(L)])
    return path


def load_report(path):
    """Read a JSON report back as ``(header, rows)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a report document")
    return doc["columns"], doc["rows"]


def format_text(header, rows):
    """Fixed-width text rendering of a report table."""
    cells = [header] + [[_cell(r.get(h) if isinstance(r, dict) else r[i]) for i, h in enumerate(header)] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def _cell(v):
    if v is None:
        return "-"
    return v if isinstance(v, str) else fmt(v)
