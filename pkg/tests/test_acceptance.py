"""End-to-end closure suite; each case is one numbered criterion.

Run with -s (or read the captured stdout of a failure) to see the per-check
details; `twinbeam verify` prints the same lines.
"""
import pytest

from twinbeam.acceptance import ALL_CRITERIA, run_acceptance


@pytest.mark.parametrize("number", ALL_CRITERIA)
def test_criterion(number):
    res = run_acceptance([number])[0]
    print(res.line())
    for ch in res.checks:
        print(f"   {'ok  ' if ch.passed else 'FAIL'} {ch.name}: {ch.detail}")
    assert res.passed, res.line()


def test_unknown_criterion_rejected():
    from twinbeam.errors import DomainError
    with pytest.raises(DomainError):
        run_acceptance([42])
