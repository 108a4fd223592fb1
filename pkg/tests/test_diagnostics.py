import pytest

from tilesparse import diagnostics


@pytest.mark.parametrize("name", sorted(diagnostics.SWEEPS))
def test_sweeps_have_no_violations(name):
    res = diagnostics.SWEEPS[name](cases=300, seed=5)
    assert res.cases == 300
    assert res.ok, res.examples


def test_sweeps_are_deterministic():
    a = diagnostics.sweep_bhatia_davis(50, seed=1)
    b = diagnostics.sweep_bhatia_davis(50, seed=1)
    assert a.to_dict() == b.to_dict()


def test_violation_is_reported():
    res = diagnostics.SweepResult("x", 2, 0, float("-inf"))
    diagnostics._record(res, 0, -1.0)
    diagnostics._record(res, 1, 0.5)
    assert not res.ok and res.violations == 1 and res.examples == [1] and res.worst == 0.5
