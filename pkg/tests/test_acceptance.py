"""Acceptance criteria 1-8; each test prints one PASS/FAIL line."""

import pytest

from countprompt import acceptance


@pytest.fixture(scope="module")
def ctx():
    return acceptance.AcceptanceContext.default()


@pytest.mark.parametrize("crit", acceptance.CRITERIA, ids=lambda c: f"criterion_{c.number}")
def test_criterion(ctx, crit, capsys):
    res = crit(ctx)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
