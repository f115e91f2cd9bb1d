from fractions import Fraction

import numpy as np
import pytest
from conftest import random_race_edu, small_layout

from homogamy.errors import LatticeTooLarge
from homogamy.gnm import GnmProblem, gnm_interval
from homogamy.nm import TargetMarginals, nm_transform
from homogamy.oracle import MAX_POINTS, enumerate_gnm, ll_direct, verify_nm
from homogamy.tables import ContingencyTable, RaceEduLayout, sehc

LAY = small_layout()


def test_ll_direct_examples():
    assert ll_direct(30, 10, 10, 50) == Fraction(7, 12)
    assert ll_direct(25, 25, 25, 25) == 0
    with pytest.raises(ZeroDivisionError):
        ll_direct(0, 0, 0, 10)


def test_verify_nm_accepts_transform():
    src = ContingencyTable([[5, 3, 1], [2, 6, 2], [1, 2, 8]])
    rows, cols = [6, 10, 14], [9, 9, 12]
    out = nm_transform(src, TargetMarginals(rows, cols)).table
    v = verify_nm(src, rows, cols, out)
    assert v.ok(1e-9)
    assert v.n_checked_cuts == 4


def test_verify_nm_flags_wrong_marginals():
    src = ContingencyTable([[5, 3, 1], [2, 6, 2], [1, 2, 8]])
    v = verify_nm(src, [6, 10, 14], [9, 9, 12], src)
    assert v.max_marginal_deviation > 0
    assert not v.ok()


def test_verify_nm_hand_table():
    src = ContingencyTable([[30, 10], [10, 50]])
    hand = [[39.583333, 10.416667], [10.416667, 39.583333]]
    v = verify_nm(src, [50, 50], [50, 50], hand)
    assert v.max_marginal_deviation <= 1e-9
    assert v.max_ll_deviation <= 1e-6


def test_lattice_limit(monkeypatch):
    import homogamy.oracle as oracle

    k = random_race_edu(np.random.default_rng(3))
    monkeypatch.setattr(oracle, "MAX_POINTS", 1)
    with pytest.raises(LatticeTooLarge):
        enumerate_gnm(GnmProblem(k, k, k, LAY))
    assert MAX_POINTS == 10**6


def test_same_time_contains_observed():
    k = random_race_edu(np.random.default_rng(4))
    for order in ("race-first", "edu-first"):
        r = enumerate_gnm(GnmProblem(k, k, k, LAY, order))
        v = sehc(k, LAY)
        assert r.min_value - 1e-12 <= v <= r.max_value + 1e-12


def test_single_point_lattice():
    # no inter-racial couples: every mixed block is empty, one allocation remains
    k = ContingencyTable([[3, 2, 0, 0], [2, 3, 0, 0], [0, 0, 3, 2], [0, 0, 2, 3]],
                         LAY.row_labels(), LAY.col_labels())
    r = enumerate_gnm(GnmProblem(k, k, k, LAY))
    assert r.n_feasible == 1
    assert r.min_value == r.max_value == pytest.approx(sehc(k, LAY))
    g = gnm_interval(GnmProblem(k, k, k, LAY))
    assert (g.min_value, g.max_value) == (r.min_value, r.max_value)
