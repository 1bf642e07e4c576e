"""Acceptance criteria A1-A14 at their stated tolerances, one line per criterion."""
import pytest

from abatement_game import acceptance

RESULTS = {}


@pytest.mark.parametrize("cid", acceptance.criterion_ids())
def test_criterion(cid):
    res = acceptance.run_one(cid)
    RESULTS[cid] = res
    print("\n" + res.line())
    assert res.passed, f"{cid}: {res.to_dict()}"


def test_all_criteria_enumerated():
    assert acceptance.criterion_ids() == [f"A{i}" for i in range(1, 15)]
    print()
    for cid in acceptance.criterion_ids():
        res = RESULTS.get(cid)
        print(res.line() if res else f"{cid:>4} NOT RUN")
