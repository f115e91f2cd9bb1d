"""Path-independent decompositions of a change in a moment into factor effects.

Two factors (availability ``A``, preferences ``P``), with ``f_ab`` the moment
under availability of time ``a`` and preferences of time ``b``::

    f11 - f00 = (f10 - f00) + (f01 - f00) + (f11 - f10 - f01 + f00)

Three factors (``A``, race preferences ``PR``, education preferences ``PE``)
add three pairwise interactions and a residuum that absorbs the rest.

Mixed corners of the three-factor grid come from the allocation search and are
intervals. Each component is then bounded by choosing every corner inside its
interval independently, which over-covers the joint feasible set; reports carry
``conservative=True`` whenever this rule was applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .errors import NoFeasiblePoint
from .gnm import GnmProblem, MomentInterval, Objective, Order, gnm_interval
from .nm import TargetMarginals, nm_transform
from .tables import ContingencyTable, RaceEduLayout, diagonal_share, sehc, sirm

__all__ = [
    "Interval",
    "FactorGrid2",
    "FactorGrid3",
    "DecompositionReport",
    "biewen2",
    "biewen3",
    "decompose_one_dim",
    "decompose_two_dim",
    "MIXED_CORNERS",
]

CORNERS3 = tuple((a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1))
MIXED_CORNERS = tuple(k for k in CORNERS3 if k not in ((0, 0, 0), (1, 1, 1)))


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, x: float) -> "Interval":
        return cls(float(x), float(x))

    @classmethod
    def of(cls, x) -> "Interval":
        if isinstance(x, Interval):
            return x
        if isinstance(x, MomentInterval):
            return cls(x.min_value, x.max_value)
        return cls.point(x)

    @property
    def is_point(self) -> bool:
        return self.lo == self.hi

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, other) -> bool:
        other = Interval.of(other)
        return self.lo <= other.lo and other.hi <= self.hi


def _combine(coefs: Mapping, values: Mapping) -> Interval:
    """Range of ``sum(c * values[k])`` with each value chosen independently."""
    lo, hi = [], []
    for k, c in coefs.items():
        if c == 0:
            continue
        v = values[k]
        lo.append(c * (v.lo if c > 0 else v.hi))
        hi.append(c * (v.hi if c > 0 else v.lo))
    return Interval(math.fsum(lo), math.fsum(hi))


@dataclass(frozen=True)
class FactorGrid2:
    """Moment at the four (availability, preference) time combinations, ``f[a][p]``."""

    f00: float
    f01: float
    f10: float
    f11: float
    labels: tuple[str, str] = ("availability", "preferences")

    def as_mapping(self) -> dict:
        return {(0, 0): self.f00, (0, 1): self.f01, (1, 0): self.f10, (1, 1): self.f11}


@dataclass(frozen=True)
class FactorGrid3:
    """Moment at every (A, PR, PE) time combination, keyed ``(a, b, c)``.

    The observed corners ``(0,0,0)`` and ``(1,1,1)`` are points; mixed corners
    may be intervals.
    """

    values: Mapping[tuple[int, int, int], object]
    labels: tuple[str, str, str] = ("availability", "race_preferences", "education_preferences")

    def __post_init__(self):
        missing = [k for k in CORNERS3 if k not in self.values]
        if missing:
            raise ValueError(f"grid misses corners {missing}")
        for k in ((0, 0, 0), (1, 1, 1)):
            if not Interval.of(self.values[k]).is_point:
                raise ValueError(f"observed corner {k} must be a point value")

    @classmethod
    def from_function(cls, f: Callable[[int, int, int], float], **kw) -> "FactorGrid3":
        return cls({k: f(*k) for k in CORNERS3}, **kw)

    def intervals(self) -> dict:
        return {k: Interval.of(v) for k, v in self.values.items()}

    def is_point(self) -> bool:
        return all(v.is_point for v in self.intervals().values())


@dataclass
class DecompositionReport:
    """Components of ``f(1...) - f(0...)``.

    ``effects`` holds main effects, ``interactions`` pairwise terms, both as
    :class:`Interval` (degenerate for point inputs). ``exact_sum_check`` is
    the absolute gap between the component sum and the total at point inputs,
    or at the corner midpoints for interval inputs.
    """

    total_change: float
    effects: dict[str, Interval]
    interactions: dict[str, Interval]
    residuum: Interval | None = None
    conservative: bool = False
    exact_sum_check: float = 0.0
    corners: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def components(self) -> dict[str, Interval]:
        out = dict(self.effects)
        out.update(self.interactions)
        if self.residuum is not None:
            out["residuum"] = self.residuum
        return out

    def component_sum(self) -> float:
        """Sum of the components (lower ends; exact for point inputs)."""
        return math.fsum(v.lo for v in self.components().values())


def biewen2(g: FactorGrid2) -> DecompositionReport:
    f = {k: Interval.of(v) for k, v in g.as_mapping().items()}
    a, p = g.labels
    terms = {
        a: {(1, 0): 1, (0, 0): -1},
        p: {(0, 1): 1, (0, 0): -1},
        f"{a}&{p}": {(1, 1): 1, (1, 0): -1, (0, 1): -1, (0, 0): 1},
    }
    comps = {name: _combine(c, f) for name, c in terms.items()}
    total = f[1, 1].lo - f[0, 0].lo
    point = all(v.is_point for v in f.values())
    if point:
        check = abs(math.fsum(v.lo for v in comps.values()) - total)
    else:
        mids = {k: Interval.point(v.mid) for k, v in f.items()}
        check = abs(math.fsum(_combine(c, mids).lo for c in terms.values())
                    - (mids[1, 1].lo - mids[0, 0].lo))
    return DecompositionReport(
        total, {a: comps[a], p: comps[p]}, {f"{a}&{p}": comps[f"{a}&{p}"]},
        conservative=not point, exact_sum_check=check,
    )


def _terms3(labels):
    a, r, e = labels
    origin = (0, 0, 0)
    main = {
        a: {(1, 0, 0): 1, origin: -1},
        r: {(0, 1, 0): 1, origin: -1},
        e: {(0, 0, 1): 1, origin: -1},
    }
    pair = {
        f"{r}&{a}": {(1, 1, 0): 1, (1, 0, 0): -1, (0, 1, 0): -1, origin: 1},
        f"{e}&{a}": {(1, 0, 1): 1, (1, 0, 0): -1, (0, 0, 1): -1, origin: 1},
        f"{e}&{r}": {(0, 1, 1): 1, (0, 1, 0): -1, (0, 0, 1): -1, origin: 1},
    }
    return main, pair


def biewen3(g: FactorGrid3) -> DecompositionReport:
    """Three-factor decomposition; the residuum closes the identity."""
    f = g.intervals()
    main, pair = _terms3(g.labels)
    effects = {k: _combine(c, f) for k, c in main.items()}
    interactions = {k: _combine(c, f) for k, c in pair.items()}
    total = f[1, 1, 1].lo - f[0, 0, 0].lo
    others = list(effects.values()) + list(interactions.values())
    residuum = Interval(total - math.fsum(v.hi for v in others),
                        total - math.fsum(v.lo for v in others))
    point = g.is_point()
    if point:
        parts = [v.lo for v in others] + [residuum.lo]
    else:
        mids = {k: Interval.point(v.mid) for k, v in f.items()}
        terms = [_combine(c, mids).lo for c in list(main.values()) + list(pair.values())]
        parts = terms + [total - math.fsum(terms)]
    check = abs(math.fsum(parts) - total)
    return DecompositionReport(total, effects, interactions, residuum,
                               conservative=not point, exact_sum_check=check)


def decompose_one_dim(
    z0: ContingencyTable,
    z1: ContingencyTable,
    moment: Callable[[ContingencyTable], float] = diagonal_share,
    **nm_kwargs,
) -> DecompositionReport:
    """Availability/preference split of ``moment(z1) - moment(z0)``.

    The mixed corners are NM counterfactuals: ``f10`` keeps ``z0``'s
    preferences under ``z1``'s marginals and ``f01`` the reverse.
    """
    c10 = nm_transform(z0, TargetMarginals.of(z1), **nm_kwargs)
    c01 = nm_transform(z1, TargetMarginals.of(z0), **nm_kwargs)
    grid = FactorGrid2(moment(z0), moment(c01.table), moment(c10.table), moment(z1))
    report = biewen2(grid)
    report.corners = {"10": c10, "01": c01}
    for name, res in (("10", c10), ("01", c01)):
        report.warnings.extend(f"corner {name}: {w}" for w in res.warnings)
    return report


def _moment_fn(objective: Objective, layout: RaceEduLayout):
    if objective is Objective.SEHC:
        return lambda t: sehc(t, layout)
    return lambda t: sirm(t, layout)


def decompose_two_dim(
    k0: ContingencyTable,
    k1: ContingencyTable,
    layout: RaceEduLayout,
    objective: Objective | str = Objective.SEHC,
    order: Order | str = Order.RACE_FIRST,
    epsilon: float = 1e-9,
    *,
    jobs: int = 1,
    mode: str = "search",
    interval_fn: Callable[[GnmProblem], MomentInterval] | None = None,
    **problem_kwargs,
) -> DecompositionReport:
    """Three-factor decomposition with allocation-search intervals at mixed corners.

    Corner ``(a, b, c)`` uses availability from year ``a``, race preferences
    from year ``b`` and education preferences from year ``c``.
    ``interval_fn`` replaces the search (e.g. with a brute-force enumerator).
    """
    objective = Objective(objective)
    order = Order(order)
    years = (k0, k1)
    if interval_fn is None:
        def interval_fn(p):
            return gnm_interval(p, jobs=jobs, mode=mode)
    moment = _moment_fn(objective, layout)
    values: dict = {(0, 0, 0): moment(k0), (1, 1, 1): moment(k1)}
    corners = {}
    for a, b, c in MIXED_CORNERS:
        p = GnmProblem(years[b], years[a], years[c], layout, order, objective, epsilon,
                       **problem_kwargs)
        try:
            res = interval_fn(p)
        except NoFeasiblePoint as exc:
            raise NoFeasiblePoint(f"corner {a}{b}{c}: {exc}") from None
        corners[f"{a}{b}{c}"] = res
        values[a, b, c] = res
    report = biewen3(FactorGrid3(values))
    report.corners = corners
    return report
