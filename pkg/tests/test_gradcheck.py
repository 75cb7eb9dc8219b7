# tests/test_gradcheck.py
from __future__ import annotations

import pytest

from t3d.gradcheck import CASES, TOLERANCE, CheckRow, format_rows, run_suite


@pytest.mark.parametrize("name", sorted(CASES))
def test_case_within_tolerance(name):
    rows = run_suite([name], seeds=(0, 1), max_elements=8)
    for row in rows:
        assert row.checked > 0
        assert row.max_error < TOLERANCE, f"{name} seed {row.seed}: {row.max_error:.3e}"


def test_network_all_seeds():
    rows = run_suite(["network"], max_elements=16)
    assert [r.seed for r in rows] == [0, 1, 2, 3, 4]
    assert all(r.ok for r in rows), format_rows(rows)


@pytest.mark.slow
def test_full_suite():
    rows = run_suite(sorted(CASES))
    assert all(r.ok for r in rows), format_rows(rows)


def test_row_status():
    assert CheckRow("x", 0, 1e-7, 4, 0).ok
    assert not CheckRow("x", 0, 2e-5, 4, 0).ok
    assert not CheckRow("x", 0, float("nan"), 4, 0).ok


def test_format_rows():
    rows = [CheckRow("conv3d", 0, 1e-8, 10, 0), CheckRow("conv3d", 1, 3e-8, 10, 1), CheckRow("ttl", 0, 1e-3, 5, 0)]
    lines = format_rows(rows).splitlines()
    assert len(lines) == 3
    assert lines[1].split()[:2] == ["conv3d", "2"] and lines[1].endswith("ok")
    assert lines[2].endswith("FAIL")
