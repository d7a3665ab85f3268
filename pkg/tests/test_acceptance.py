"""Acceptance suite: every criterion runs at its stated tolerance and
prints one pass/fail line (also available via ``rawcoex validate``)."""

import pytest

from rawcoex import acceptance


@pytest.fixture(scope="module")
def shared_null():
    return acceptance.NullAnalysis.build()


def _report(result):
    print(result.line())
    assert result.passed, result.line()


def test_criterion_1_special_function_certificates():
    _report(acceptance.criterion_1())


def test_criterion_2_reference_table_statistics():
    _report(acceptance.criterion_2())


def test_criterion_3_differentiation_scale_constants():
    _report(acceptance.criterion_3())


def test_criterion_4_null_pvalue_calibration(shared_null):
    _report(acceptance.criterion_4(shared_null))


def test_criterion_5_differentiation_false_positive_envelope(shared_null):
    _report(acceptance.criterion_5(shared_null))


def test_criterion_6_dispersion_fit_exactness(shared_null):
    _report(acceptance.criterion_6(shared_null))


def test_criterion_7_estimator_accuracy():
    _report(acceptance.criterion_7())


def test_criterion_8_engine_equivalence():
    _report(acceptance.criterion_8())


def test_criterion_9_variance_law():
    _report(acceptance.criterion_9())
