from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsde_lab import presets
from bsde_lab.bsde_engine import solve_bsde
from bsde_lab.core import TimeGrid
from bsde_lab.reports import (DIAGNOSTIC_COLUMNS, Table, diagnostics_row, emit_report,
                              format_float, to_csv, to_json)
from bsde_lab.sde_engine import simulate_brownian


def test_format_float():
    assert format_float(0.1) == "0.10000000000000001"
    assert float(format_float(1 / 3)) == 1 / 3
    assert format_float(math.nan) == "" and format_float(math.inf) == ""


def test_csv_cells():
    text = to_csv(("a", "b", "c", "d"), [{"a": 1, "b": True, "c": math.nan, "d": [1.0, 2.5]}])
    assert text == "a,b,c,d\n1,true,,1;2.5\n"


def test_empty_rows_give_header_only():
    assert to_csv(("eps", "value"), []) == "eps,value\n"


def test_json_nan_and_integral_floats():
    text = to_json({"x": math.nan, "y": 2.0, "n": 3, "ok": False, "s": "é"})
    doc = json.loads(text)
    assert doc == {"x": None, "y": 2.0, "n": 3, "ok": False, "s": "é"}
    assert isinstance(doc["y"], float) and isinstance(doc["n"], int)
    assert text.endswith("}\n") and "\r" not in text


def test_json_numpy_values():
    doc = json.loads(to_json({"a": np.float64(0.25), "b": np.arange(3), "c": np.bool_(True)}))
    assert doc == {"a": 0.25, "b": [0, 1, 2], "c": True}


def test_json_rejects_unknown_objects():
    with pytest.raises(TypeError):
        to_json({"f": object()})


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-10 ** 6, 10 ** 6)
    | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=8),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner,
                                                                max_size=4),
    max_leaves=20)


@settings(max_examples=200, deadline=None)
@given(obj=json_values)
def test_json_parse_emit_parse_identity(obj):
    once = json.loads(to_json(obj))
    assert once == obj
    assert to_json(once) == to_json(obj)


def test_emit_report_is_byte_stable(tmp_path):
    t = Table("demo", ("eps", "v"), ({"eps": 0.5, "v": 1 / 3}, {"eps": 0.25, "v": math.nan}),
              "pass", {"limit": 0.1}, {"seed": 1})
    a = emit_report(t, "csv", tmp_path / "a.csv").read_bytes()
    b = emit_report(t, "csv", tmp_path / "b.csv").read_bytes()
    assert a == b and b"\r\n" not in a
    ja = emit_report(t, "json", tmp_path / "a.json").read_bytes()
    assert ja == emit_report(t, "json", tmp_path / "b.json").read_bytes()
    doc = json.loads(ja)
    assert doc["verdict"] == "pass" and doc["rows"][1]["v"] is None
    with pytest.raises(ValueError):
        emit_report(t, "xml", tmp_path / "a.xml")


def test_diagnostics_row():
    b = simulate_brownian(TimeGrid(0.0, 1.0, 8), 200, 1, seed=1)
    sol = solve_bsde(presets.zero(), np.ones(200), b)
    row = diagnostics_row("zero", sol)
    assert tuple(row) == DIAGNOSTIC_COLUMNS
    assert row["n_paths"] == 200 and row["dt"] == 0.125 and row["y0"] == pytest.approx(1.0)
    assert row["clipped_fraction"] == 0.0
