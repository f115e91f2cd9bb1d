import math

import numpy as np
import pytest
from conftest import random_race_edu, small_layout
from hypothesis import given
from hypothesis import strategies as st

from homogamy.decomp import (
    MIXED_CORNERS,
    FactorGrid2,
    FactorGrid3,
    Interval,
    biewen2,
    biewen3,
    decompose_one_dim,
    decompose_two_dim,
)
from homogamy.errors import NoFeasiblePoint
from homogamy.gnm import MomentInterval
from homogamy.nm import TargetMarginals, nm_transform
from homogamy.oracle import enumerate_gnm
from homogamy.tables import ContingencyTable, diagonal_share

LAY = small_layout()
finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_interval_basics():
    assert Interval.point(2.0).is_point
    assert Interval(1, 3).mid == 2
    assert Interval(0, 4).contains(Interval(1, 3))
    with pytest.raises(ValueError):
        Interval(2, 1)


def test_biewen2_additive_and_multiplicative():
    add = biewen2(FactorGrid2(1 + 3, 1 + 5, 2 + 3, 2 + 5))
    assert add.effects["availability"].lo == 1
    assert add.effects["preferences"].lo == 2
    assert add.interactions["availability&preferences"].lo == 0
    mul = biewen2(FactorGrid2(1 * 3, 1 * 5, 2 * 3, 2 * 5))
    assert mul.total_change == 7
    assert [v.lo for v in mul.components().values()] == [3, 2, 2]
    still = biewen2(FactorGrid2(4, 4, 4, 4))
    assert all(v.lo == v.hi == 0 for v in still.components().values())


def test_biewen3_fixtures():
    mul = biewen3(FactorGrid3.from_function(lambda a, b, c: (1 + a) * (1 + 2 * b) * (1 + 3 * c)))
    assert mul.total_change == 23
    assert [v.lo for v in mul.effects.values()] == [1, 2, 3]
    assert [v.lo for v in mul.interactions.values()] == [2, 3, 6]
    assert mul.residuum.lo == 6
    add = biewen3(FactorGrid3.from_function(lambda a, b, c: 2 * a + 5 * b - c))
    assert all(v.lo == 0 for v in add.interactions.values())
    assert add.residuum == Interval.point(0)
    assert not add.conservative


def test_grid3_requires_point_observed_corners():
    vals = {k: 0.0 for k in [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]}
    vals[0, 0, 0] = Interval(0, 1)
    with pytest.raises(ValueError):
        FactorGrid3(vals)
    with pytest.raises(ValueError):
        FactorGrid3({(0, 0, 0): 1.0})


@given(st.lists(finite, min_size=4, max_size=4))
def test_biewen2_identity(v):
    r = biewen2(FactorGrid2(*v))
    assert abs(math.fsum(c.lo for c in r.components().values()) - r.total_change) <= 1e-12 * max(
        1.0, max(abs(x) for x in v))


@given(st.lists(finite, min_size=8, max_size=8))
def test_biewen3_path_independence(v):
    corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    g = dict(zip(corners, v))
    r = biewen3(FactorGrid3(g, labels=("x", "y", "z")))
    # swap the roles of the first two factors
    swapped = biewen3(FactorGrid3({(b, a, c): g[a, b, c] for a, b, c in corners},
                                  labels=("y", "x", "z")))
    assert swapped.effects["x"] == r.effects["x"]
    assert swapped.effects["y"] == r.effects["y"]
    assert swapped.interactions["x&y"] == r.interactions["y&x"]
    assert swapped.residuum == r.residuum


@given(st.lists(finite, min_size=8, max_size=8), st.lists(st.floats(0, 5), min_size=6, max_size=6))
def test_interval_components_are_monotone(v, widen):
    corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    g = dict(zip(corners, v))
    narrow = biewen3(FactorGrid3(g))
    wide_vals = dict(g)
    for k, w in zip(MIXED_CORNERS, widen):
        wide_vals[k] = Interval(g[k] - w, g[k] + w)
    wide = biewen3(FactorGrid3(wide_vals))
    for name, comp in narrow.components().items():
        assert wide.components()[name].lo <= comp.lo + 1e-9
        assert wide.components()[name].hi >= comp.hi - 1e-9
    assert wide.conservative == any(not Interval.of(x).is_point for x in wide_vals.values())


def test_one_dim_measure_preserving_pair():
    z0 = ContingencyTable([[30, 10], [10, 50]])
    z1 = nm_transform(z0, TargetMarginals([50, 50], [50, 50])).table
    r = decompose_one_dim(z0, z1)
    assert abs(r.effects["preferences"].lo) <= 1e-12
    assert r.effects["availability"].lo == pytest.approx(diagonal_share(z1) - diagonal_share(z0))
    assert abs(r.interactions["availability&preferences"].lo) <= 1e-12


def test_one_dim_marginal_preserving_pair():
    z0 = ContingencyTable([[30, 10], [10, 50]])
    z1 = ContingencyTable([[35, 5], [5, 55]])
    r = decompose_one_dim(z0, z1)
    assert abs(r.effects["availability"].lo) <= 1e-12
    assert r.effects["preferences"].lo == pytest.approx(0.1)


def test_two_dim_same_tables_is_zero():
    k = random_race_edu(np.random.default_rng(1))
    r = decompose_two_dim(k, k, LAY, "sehc")
    assert r.total_change == 0
    for comp in r.components().values():
        assert comp.lo <= 1e-12 and comp.hi >= -1e-12
    obs = decompose_two_dim(k, k, LAY, "sehc", mode="observed")
    for comp in obs.components().values():
        assert abs(comp.lo) <= 1e-12 and abs(comp.hi) <= 1e-12
    assert set(r.corners) == {f"{a}{b}{c}" for a, b, c in MIXED_CORNERS}


def test_two_dim_without_mixed_couples():
    def table(c):
        return ContingencyTable(np.array(c, float), LAY.row_labels(), LAY.col_labels())

    k0 = table([[3, 2, 0, 0], [2, 3, 0, 0], [0, 0, 3, 2], [0, 0, 2, 3]])
    k1 = table([[4, 1, 0, 0], [1, 2, 0, 0], [0, 0, 5, 1], [0, 0, 2, 2]])
    r = decompose_two_dim(k0, k1, LAY, "sirm", "race-first")
    assert r.effects["race_preferences"] == Interval.point(0.0)


@pytest.mark.parametrize("seed", range(3))
def test_two_dim_matches_enumerated_corners(seed):
    rng = np.random.default_rng(50 + seed)
    k0, k1 = random_race_edu(rng), random_race_edu(rng)
    for objective in ("sehc", "sirm"):
        got = decompose_two_dim(k0, k1, LAY, objective, "both")
        want = decompose_two_dim(k0, k1, LAY, objective, "both", interval_fn=enumerate_gnm)
        assert got.components() == want.components()


def test_two_dim_reports_failing_corner():
    k0 = random_race_edu(np.random.default_rng(2))

    def boom(p):
        raise NoFeasiblePoint("nothing")

    with pytest.raises(NoFeasiblePoint, match="corner 001"):
        decompose_two_dim(k0, k0, LAY, interval_fn=boom)


def test_midpoint_check_for_intervals():
    corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    vals = {k: float(sum(k)) for k in corners}
    vals[1, 0, 0] = MomentInterval(0.5, 1.5, None, None, 0, 0)
    r = biewen3(FactorGrid3(vals))
    assert r.conservative
    assert r.exact_sum_check <= 1e-12
    assert r.effects["availability"] == Interval(0.5, 1.5)
