"""The ten acceptance criteria at their stated sizes and tolerances.

Each test prints one ``[PASS]``/``[FAIL]`` line; run with ``-s`` or ``-v``
to see them next to the pytest outcome.
"""
import json

import pytest

from exitlab import acceptance as acc

pytestmark = pytest.mark.slow

RESULTS = {}


@pytest.fixture(scope="module")
def tail_rows():
    rows, _ = acc.tail_scan(seed=0)
    return rows


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    print("\nacceptance summary")
    for cid in sorted(RESULTS):
        print(RESULTS[cid].line())


def report(res):
    RESULTS[res.id] = res
    print("\n" + res.line())
    print(json.dumps(acc._plain(res.measured), default=str)[:2000])
    assert res.passed, res.line()


def test_c1_conjugation_identity():
    report(acc.criterion_1())


def test_c2_ou_law():
    report(acc.criterion_2())


def test_c3_exit_identity_and_sign_coupling():
    report(acc.criterion_3())


def test_c4_tail_constant(tail_rows):
    report(acc.criterion_4(rows=tail_rows))


def test_c5_scaling_slope(tail_rows):
    report(acc.criterion_5(tail_rows))


def test_c6_conditional_split():
    report(acc.criterion_6())


def test_c7_small_ball():
    report(acc.criterion_7())


def test_c8_density_convergence():
    report(acc.criterion_8())


def test_c9_malliavin_limit():
    report(acc.criterion_9())


def test_c10_oracle_equivalences():
    report(acc.criterion_10())
