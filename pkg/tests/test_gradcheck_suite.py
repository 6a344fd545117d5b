"""Tests for :mod:`gradcheck_suite`"""

import pytest

from gradcheck_suite import END_TO_END_TOLERANCE, OP_TOLERANCE, SuiteEntry, format_suite, run_suite


@pytest.fixture(scope="module")
def quick_suite():
    return run_suite(seed=0, n_coords=10)


def test_every_check_passes(quick_suite):
    failed = [(e.name, e.max_rel_error) for e in quick_suite if not e.passed]
    assert not failed


def test_suite_covers_ops_and_model(quick_suite):
    names = [e.name for e in quick_suite]
    assert len(names) == len(set(names))
    assert names[-2:] == ["attention_fusion", "end_to_end"]
    assert {"add", "elementwise_mul"} <= set(names)
    assert quick_suite[-1].tolerance == END_TO_END_TOLERANCE
    assert all(e.tolerance == OP_TOLERANCE for e in quick_suite[:-1])


def test_suite_is_deterministic(quick_suite):
    assert run_suite(seed=0, n_coords=10) == quick_suite


def test_entry_without_checked_coordinates_fails():
    assert not SuiteEntry("conv2d", 0.0, OP_TOLERANCE, checked=0, skipped=10).passed


def test_format_suite():
    text = format_suite([SuiteEntry("add", 1.5e-9, 1e-4, 10, 0), SuiteEntry("end_to_end", 2e-3, 1e-3, 8, 2)])
    assert text.splitlines() == [
        "check       max_rel_error  tolerance  status",
        "add             1.500e-09      1e-04  ok",
        "end_to_end      2.000e-03      1e-03  FAIL",
    ]


@pytest.mark.slow
def test_full_suite_passes():
    assert all(e.passed for e in run_suite(seed=0, n_coords=100))
