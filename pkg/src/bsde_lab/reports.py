"""Byte-stable CSV and JSON report writers.

Floats are written with 17 significant digits ('.17g'), which round-trips
every double exactly; non-finite floats become empty CSV cells and JSON null.
Lines end with '\\n' regardless of platform.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


@dataclass(frozen=True)
class Table:
    """What gets written: fixed columns, rows, a summary block and the resolved config."""

    name: str
    columns: tuple[str, ...]
    rows: tuple[dict[str, Any], ...]
    verdict: str
    summary: dict[str, Any] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)


def as_table(name: str, report: Any, summary: dict[str, Any] | None = None,
             config: dict[str, Any] | None = None) -> Table:
    """Adapt any module report exposing ``columns``, ``csv_rows()`` and ``verdict``."""
    cfg = dict(getattr(report, "config", {}) or {})
    if config:
        cfg = {**config, "resolved": cfg} if cfg else dict(config)
    return Table(name, tuple(report.columns), tuple(report.csv_rows()), report.verdict,
                 summary or {}, cfg)


def format_float(v: float) -> str:
    return format(v, ".17g") if math.isfinite(v) else ""


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_cell(x) for x in np.asarray(v).ravel().tolist())
    return str(v)


def to_csv(columns: Sequence[str], rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def _json(v: Any, indent: int) -> str:
    pad, inner = " " * indent, " " * (indent + 2)
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "null"
        s = format(v, ".17g")
        # keep floats recognisable as floats after a round trip
        return s if any(c in s for c in ".en") else s + ".0"
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {_json(x, indent + 2)}"
                 for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(v, (list, tuple, np.ndarray)):
        seq = v.tolist() if isinstance(v, np.ndarray) else list(v)
        if not seq:
            return "[]"
        if all(not isinstance(x, (dict, list, tuple, np.ndarray)) for x in seq):
            return "[" + ", ".join(_json(x, indent) for x in seq) + "]"
        return "[\n" + ",\n".join(inner + _json(x, indent + 2) for x in seq) + "\n" + pad + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def to_json(obj: Any) -> str:
    return _json(obj, 0) + "\n"


def table_document(table: Table) -> dict[str, Any]:
    return {"report": table.name, "verdict": table.verdict, "summary": table.summary,
            "columns": list(table.columns), "rows": [dict(r) for r in table.rows],
            "config": table.config}


def emit_report(table: Table, fmt: str, path: str | Path) -> Path:
    """Write ``table`` as csv or json; identical tables give identical bytes."""
    if fmt == "csv":
        text = to_csv(table.columns, table.rows)
    elif fmt == "json":
        text = to_json(table_document(table))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


DIAGNOSTIC_COLUMNS = ("preset", "n_paths", "dt", "y0", "stderr", "picard_iterations",
                      "clipped_fraction")


def diagnostics_row(preset: str, sol) -> dict[str, Any]:
    """One row of the per-solve diagnostics summary."""
    y0, se = sol.y0_estimate()
    return {"preset": preset, "n_paths": sol.Y.shape[0], "dt": sol.grid.dt, "y0": y0,
            "stderr": se, "picard_iterations": sol.diagnostics.picard_iterations,
            "clipped_fraction": sol.diagnostics.clipped_fraction}
