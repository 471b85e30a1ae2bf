"""Acceptance suite: every criterion at its stated tolerance and budget.

Each case prints its pass/fail line so a verbose run doubles as the
acceptance report.
"""
import pytest

from svolterra import acceptance as acc


@pytest.mark.parametrize("criterion", acc.ALL_CRITERIA,
                         ids=[f"criterion_{c.index:02d}_{c.name.replace(' ', '_')}"
                              for c in acc.ALL_CRITERIA])
def test_criterion(criterion, capsys):
    result = criterion()
    with capsys.disabled():
        print("\n" + result.line)
    assert result.passed, (
        f"criterion {result.index} failed "
        f"(elapsed {result.elapsed:.2f}s): {result.details}")
