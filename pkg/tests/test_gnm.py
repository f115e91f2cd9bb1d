import numpy as np
import pytest
from conftest import random_race_edu, small_layout

from homogamy.errors import NoFeasiblePoint
from homogamy.gnm import (
    AllocationPoint,
    GnmProblem,
    Objective,
    Order,
    assemble_counterfactual,
    education_first_step,
    enumerate_allocations,
    evaluate_allocation,
    gnm_interval,
    observed_allocation,
    racial_step,
)
from homogamy.oracle import enumerate_gnm
from homogamy.tables import ContingencyTable, RaceEduLayout, race_aggregate, sehc

LAY = small_layout()


def table(cells, layout=LAY):
    return ContingencyTable(np.array(cells, float), layout.row_labels(), layout.col_labels())


# availability with no realistic allocation under strongly disassortative preferences
ANTI = table([[1, 9, 1, 9], [9, 1, 9, 1], [1, 9, 1, 9], [9, 1, 9, 1]])
MILD = table([[3, 2, 1, 1], [2, 3, 1, 1], [1, 1, 3, 2], [1, 1, 2, 3]])
SKEWED = table([[2, 0, 1, 5], [3, 5, 0, 2], [0, 0, 3, 4], [4, 4, 3, 3]])


def test_problem_validation():
    t = random_race_edu(np.random.default_rng(0))
    with pytest.raises(ValueError):
        GnmProblem(t, t, t, LAY, epsilon=-1)
    with pytest.raises(ValueError):
        GnmProblem(t, t, t, LAY, block_source="xx")
    p = GnmProblem(t, t, t, LAY, "edu-first", "sirm")
    assert p.order is Order.EDU_FIRST and p.objective is Objective.SIRM


def test_point_key_drops_last_entries():
    a = AllocationPoint(Order.RACE_FIRST, ((1, 2), (3, 4)), ((5, 6), (7, 8)))
    assert a.key() == (1, 3, 5, 7)
    assert a.to_dict()["female"] == [[5, 6], [7, 8]]


def test_racial_step_identity_at_same_time():
    t = random_race_edu(np.random.default_rng(1))
    p = GnmProblem(t, t, t, LAY)
    assert racial_step(p) == race_aggregate(t, LAY)


@pytest.mark.parametrize("order", [Order.RACE_FIRST, Order.EDU_FIRST])
@pytest.mark.parametrize("seed", range(5))
def test_observed_allocation_reproduces_table(order, seed):
    t = random_race_edu(np.random.default_rng(seed))
    p = GnmProblem(t, t, t, LAY, order)
    a = observed_allocation(p)
    cf, negative = assemble_counterfactual(p, None, a)
    assert np.array_equal(cf.counts, t.counts)
    assert negative == []
    value, feasible = evaluate_allocation(p, a)
    assert feasible and value == sehc(t, LAY)


def test_observed_allocation_three_levels():
    rng = np.random.default_rng(7)
    lay = RaceEduLayout()
    t = ContingencyTable(rng.integers(1, 6, (6, 6)).astype(float), lay.row_labels(), lay.col_labels())
    for order in (Order.RACE_FIRST, Order.EDU_FIRST):
        p = GnmProblem(t, t, t, lay, order)
        cf, _ = assemble_counterfactual(p, None, observed_allocation(p))
        assert np.array_equal(cf.counts, t.counts)


def test_enumeration_matches_lattice_size():
    rng = np.random.default_rng(2)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    p = GnmProblem(b, a, c, LAY, objective="sehc", keep_negative=True)
    points = list(enumerate_allocations(p))
    assert len(points) == len(set(points))
    keys = [pt.key() for pt in points]
    assert keys == sorted(keys)
    r = enumerate_gnm(p)
    assert len(points) == r.n_feasible + r.n_excluded_negative


def test_education_first_step_stream():
    rng = np.random.default_rng(3)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    p = GnmProblem(b, a, c, LAY, "edu-first")
    tab, stream = education_first_step(p)
    assert tab.shape == (2, 2)
    assert abs(tab.total - a.total) < 1e-9
    first = next(iter(stream))
    assert first.order is Order.EDU_FIRST


@pytest.mark.parametrize("seed", range(8))
def test_search_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    for order in ("race-first", "edu-first", "both"):
        for objective in ("sehc", "sirm"):
            p = GnmProblem(b, a, c, LAY, order, objective)
            got, want = gnm_interval(p), enumerate_gnm(p)
            assert (got.exact_min, got.exact_max) == (want.exact_min, want.exact_max)
            assert (got.argmin, got.argmax) == (want.argmin, want.argmax)
            assert got.min_value <= got.max_value


def test_attained_values_are_reproduced():
    rng = np.random.default_rng(5)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    p = GnmProblem(b, a, c, LAY)
    r = gnm_interval(p)
    assert evaluate_allocation(p, r.argmin) == (r.min_value, True)
    assert evaluate_allocation(p, r.argmax) == (r.max_value, True)


def test_constant_moments_per_order():
    rng = np.random.default_rng(6)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    r = gnm_interval(GnmProblem(b, a, c, LAY, "race-first", "sirm"))
    z = racial_step(GnmProblem(b, a, c, LAY)).counts
    assert r.min_value == r.max_value == (z[0, 1] + z[1, 0]) / z.sum()
    r = gnm_interval(GnmProblem(b, a, c, LAY, "edu-first", "sehc"))
    assert r.min_value == r.max_value


def test_zero_interracial_availability_gives_single_point():
    sorted_race = table([[3, 2, 0, 0], [2, 3, 0, 0], [0, 0, 3, 2], [0, 0, 2, 3]])
    avail = table([[2, 1, 1, 1], [1, 2, 1, 1], [1, 1, 2, 1], [1, 1, 1, 2]])
    p = GnmProblem(sorted_race, avail, MILD, LAY, "race-first", "sirm")
    r = gnm_interval(p)
    assert r.min_value == r.max_value == 0.0
    assert r.argmin.male == ((0, 0), (0, 0))
    assert enumerate_gnm(p).n_feasible == 1


def test_no_feasible_point_and_diagnostic_mode():
    p = GnmProblem(MILD, SKEWED, ANTI, LAY, "race-first", "sehc")
    with pytest.raises(NoFeasiblePoint) as exc:
        gnm_interval(p)
    assert exc.value.exit_code == 4
    with pytest.raises(NoFeasiblePoint):
        enumerate_gnm(p)
    kept = GnmProblem(MILD, SKEWED, ANTI, LAY, "race-first", "sehc", keep_negative=True)
    got, want = gnm_interval(kept), enumerate_gnm(kept)
    assert (got.exact_min, got.exact_max) == (want.exact_min, want.exact_max)
    assert (got.argmin, got.argmax) == (want.argmin, want.argmax)


def test_negative_allocations_are_excluded():
    a = table([[1, 4, 3, 2], [2, 2, 5, 1], [1, 2, 3, 2], [2, 1, 3, 2]])
    b = table([[2, 1, 2, 2], [1, 1, 2, 2], [2, 4, 2, 1], [2, 4, 3, 1]])
    c = table([[4, 3, 3, 2], [1, 4, 3, 5], [2, 4, 1, 4], [4, 1, 1, 2]])
    p = GnmProblem(b, a, c, LAY)
    r = gnm_interval(p)
    assert r.n_excluded_negative > 0
    want = enumerate_gnm(p)
    assert (r.exact_min, r.exact_max) == (want.exact_min, want.exact_max)


def test_observed_mode_point_interval():
    t = random_race_edu(np.random.default_rng(9))
    for order in ("race-first", "edu-first", "both"):
        r = gnm_interval(GnmProblem(t, t, t, LAY, order), mode="observed")
        assert r.min_value == r.max_value == sehc(t, LAY)
    with pytest.raises(ValueError):
        gnm_interval(GnmProblem(t, t, t, LAY), mode="nope")


def test_both_orders_is_hull():
    rng = np.random.default_rng(10)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    for objective in ("sehc", "sirm"):
        both = gnm_interval(GnmProblem(b, a, c, LAY, "both", objective))
        for order in ("race-first", "edu-first"):
            one = gnm_interval(GnmProblem(b, a, c, LAY, order, objective))
            assert both.contains(one)


def test_parallel_jobs_do_not_change_result(monkeypatch):
    import homogamy.gnm as gnm

    monkeypatch.setattr(gnm, "WARMUP_NODES", 0)
    rng = np.random.default_rng(11)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    p = GnmProblem(b, a, c, LAY, "both", "sehc")
    assert gnm_interval(p, jobs=1) == gnm_interval(p, jobs=3)


def test_block_source_option():
    rng = np.random.default_rng(12)
    a, b, c = (random_race_edu(rng) for _ in range(3))
    for source in ("te", "tr"):
        p = GnmProblem(b, a, c, LAY, block_source=source)
        assert gnm_interval(p).exact_min == enumerate_gnm(p).exact_min
