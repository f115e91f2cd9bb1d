"""Generalized NM transform for two assorted traits (race and education).

Sorting is sequential. In the race-first order the 2x2 racial distribution is
NM-transformed first; then each of the four racial blocks is NM-transformed in
education. The education targets of the blocks are not observed, only the
race-and-education availability totals, so the second step is pinned down up
to an integer allocation: how many men (women) of each race and education
level sit in the inter-racial block. Any scalar moment of the counterfactual
table therefore has a range over the feasible allocations; this module finds
its exact minimum and maximum.

The education-first order swaps the roles: the education table is transformed
first and every education-pair block is split by race with a 2x2 transform.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator, Literal, Sequence

import numpy as np

from .errors import (
    DegenerateSourceCut,
    HomogamyError,
    InfeasibleBlockTotals,
    NoFeasiblePoint,
)
from .nm import exact_theta, nm_transform_exact
from .tables import (
    ContingencyTable,
    RaceEduLayout,
    block_extract,
    edu_aggregate,
    marginals,
    race_aggregate,
    sehc,
    sirm,
)

log = logging.getLogger(__name__)

__all__ = [
    "Order",
    "Objective",
    "GnmProblem",
    "AllocationPoint",
    "MomentInterval",
    "racial_step",
    "education_first_step",
    "round_preserving_margins",
    "enumerate_allocations",
    "observed_allocation",
    "assemble_counterfactual",
    "evaluate_allocation",
    "gnm_interval",
]


class Order(str, enum.Enum):
    RACE_FIRST = "race-first"
    EDU_FIRST = "edu-first"
    BOTH = "both"


class Objective(str, enum.Enum):
    SEHC = "sehc"
    SIRM = "sirm"


@dataclass(frozen=True, eq=False)
class GnmProblem:
    """Counterfactual with race preferences from ``K_tr``, availability from
    ``K_ta`` and education preferences from ``K_te``.

    ``block_source`` picks the education-preference source of the race-first
    block transforms: ``"te"`` (default) or ``"tr"``.
    """

    K_tr: ContingencyTable
    K_ta: ContingencyTable
    K_te: ContingencyTable
    layout: RaceEduLayout = field(default_factory=RaceEduLayout)
    order: Order = Order.RACE_FIRST
    objective: Objective = Objective.SEHC
    epsilon: float = 1e-9
    block_source: Literal["te", "tr"] = "te"
    keep_negative: bool = False

    def __post_init__(self):
        for t in (self.K_tr, self.K_ta, self.K_te):
            self.layout.check(t)
        object.__setattr__(self, "order", Order(self.order))
        object.__setattr__(self, "objective", Objective(self.objective))
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.block_source not in ("te", "tr"):
            raise ValueError("block_source must be 'te' or 'tr'")


@dataclass(frozen=True)
class AllocationPoint:
    """Integer allocation of availability across blocks.

    Race-first: ``male = (B men in the B-husband/W-wife block by education,
    W men in the W-husband/B-wife block)``, ``female = (B women in the
    W-husband/B-wife block, W women in the B-husband/W-wife block)``.

    Education-first: ``male[k][l]`` counts B husbands of education ``k`` in
    the ``(k, l)`` education block; ``female[l][k]`` counts B wives of
    education ``l`` in that block.
    """

    order: Order
    male: tuple[tuple[int, ...], ...]
    female: tuple[tuple[int, ...], ...]

    def key(self) -> tuple[int, ...]:
        """Free coordinates (every vector without its last entry); the tie-break order."""
        return tuple(v for vec in self.male + self.female for v in vec[:-1])

    def to_dict(self) -> dict:
        return {"order": self.order.value, "male": [list(v) for v in self.male],
                "female": [list(v) for v in self.female]}


@dataclass(frozen=True)
class MomentInterval:
    min_value: float
    max_value: float
    argmin: AllocationPoint
    argmax: AllocationPoint
    n_feasible: int
    n_excluded_negative: int
    exact_min: Fraction = field(repr=False, compare=False, default=None)
    exact_max: Fraction = field(repr=False, compare=False, default=None)
    observed_value: float | None = None

    @property
    def width(self) -> float:
        return self.max_value - self.min_value

    def contains(self, other: "MomentInterval") -> bool:
        return self.min_value <= other.min_value and other.max_value <= self.max_value


# --- step one ---------------------------------------------------------------


def _integral(values, what: str) -> list[int]:
    out = []
    for v in values:
        f = Fraction(float(v))
        if f.denominator != 1:
            raise HomogamyError(
                f"{what} must be integral for the allocation lattice, got {float(v)!r}"
            )
        out.append(int(f))
    return out


def _exact_step(source: ContingencyTable, target: ContingencyTable) -> list[list[Fraction]]:
    rows, cols = marginals(target)
    return nm_transform_exact(
        exact_theta(source),
        [Fraction(float(v)) for v in rows],
        [Fraction(float(v)) for v in cols],
        on_degenerate_target="force",
    )


def round_preserving_margins(x: Sequence[Sequence[Fraction]]) -> np.ndarray:
    """Round a matrix with integral margins to integers, keeping the margins.

    Each cell goes to its floor or ceiling. Among margin-preserving choices the
    one with the largest total of rounded-up remainders wins (the largest-
    remainder rule); remaining ties go to the lexicographically smallest
    up/down pattern in row-major order with "down" first.
    """
    x = [[Fraction(v) for v in row] for row in x]
    n, m = len(x), len(x[0])
    floors = [[math.floor(v) for v in row] for row in x]
    row_need = []
    for r in range(n):
        s = sum(x[r])
        if s.denominator != 1:
            raise HomogamyError(f"row {r} of the table to round has a non-integral sum {s}")
        row_need.append(int(s) - sum(floors[r]))
    col_need = []
    for c in range(m):
        s = sum(x[r][c] for r in range(n))
        if s.denominator != 1:
            raise HomogamyError(f"column {c} of the table to round has a non-integral sum {s}")
        col_need.append(int(s) - sum(floors[r][c] for r in range(n)))
    cells = [(r, c, x[r][c] - floors[r][c]) for r in range(n) for c in range(m)
             if x[r][c] != floors[r][c]]
    # cells left per row/column bound how many "up" choices can still be made
    row_left = [sum(1 for r2, _, _ in cells if r2 == r) for r in range(n)]
    col_left = [sum(1 for _, c2, _ in cells if c2 == c) for c in range(m)]
    best: list = [None, None]
    pattern: list[int] = []

    def dfs(k: int, score: Fraction):
        if any(v < 0 for v in row_need) or any(v < 0 for v in col_need):
            return
        if any(row_need[r] > row_left[r] for r in range(n)) or any(
            col_need[c] > col_left[c] for c in range(m)
        ):
            return
        if k == len(cells):
            if best[0] is None or score > best[0]:
                best[0], best[1] = score, list(pattern)
            return
        r, c, f = cells[k]
        row_left[r] -= 1
        col_left[c] -= 1
        for up in (0, 1):
            row_need[r] -= up
            col_need[c] -= up
            pattern.append(up)
            dfs(k + 1, score + (f if up else 0))
            pattern.pop()
            row_need[r] += up
            col_need[c] += up
        row_left[r] += 1
        col_left[c] += 1

    dfs(0, Fraction(0))
    if best[1] is None:
        raise HomogamyError("no margin-preserving rounding exists")
    out = np.array(floors, dtype=np.int64)
    for (r, c, _), up in zip(cells, best[1]):
        out[r, c] += up
    return out


def _racial_exact(p: GnmProblem) -> list[list[Fraction]]:
    return _exact_step(race_aggregate(p.K_tr, p.layout), race_aggregate(p.K_ta, p.layout))


def racial_step(p: GnmProblem) -> ContingencyTable:
    """2x2 counterfactual racial distribution (before rounding)."""
    z = _racial_exact(p)
    return ContingencyTable(
        [[float(v) for v in row] for row in z], p.layout.race_labels, p.layout.race_labels
    )


def _edu_exact(p: GnmProblem) -> list[list[Fraction]]:
    return _exact_step(edu_aggregate(p.K_te, p.layout), edu_aggregate(p.K_ta, p.layout))


def _rounded_step(z: list[list[Fraction]], what: str) -> np.ndarray:
    if any(v < 0 for row in z for v in row):
        raise NoFeasiblePoint(
            f"the step-one counterfactual {what} table has a negative cell: "
            "the counterfactual is not realistic"
        )
    return round_preserving_margins(z)


# --- lattice structure ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Group:
    total: int
    caps: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.caps)


@dataclass(frozen=True, eq=False)
class _Side:
    """Block marginal as an affine function of one group's vector."""

    group: int
    offset: np.ndarray  # (k,)
    coef: np.ndarray  # (k, L)

    def marginal(self, g):
        return self.offset + self.coef @ np.asarray(g)

    @property
    def tail_offset(self) -> np.ndarray:
        # tails for cuts 1..k-1: sum of entries i..k-1
        return np.cumsum(self.offset[::-1])[::-1][1:]

    @property
    def tail_coef(self) -> np.ndarray:
        return np.cumsum(self.coef[::-1], axis=0)[::-1][1:]


@dataclass(frozen=True, eq=False)
class _Block:
    name: str
    source: ContingencyTable
    theta: np.ndarray
    theta_exact: list
    total: int
    weights: np.ndarray
    male: _Side
    female: _Side
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def corner_weights(self) -> np.ndarray:
        """Coefficients ``W'`` with ``sum(W * cells) == sum(W' * S)``."""
        w = self.weights
        n, m = w.shape
        pad = np.zeros((n + 1, m + 1))
        pad[1:, 1:] = w
        return pad[1:, 1:] - pad[:-1, 1:] - pad[1:, :-1] + pad[:-1, :-1]


@dataclass(frozen=True, eq=False)
class _Structure:
    order: Order
    male: tuple[_Group, ...]
    female: tuple[_Group, ...]
    blocks: tuple[_Block, ...]
    total: int
    shape: tuple[int, int]
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]

    def constant_objective(self) -> bool:
        return all(np.all(b.weights == b.weights.flat[0]) for b in self.blocks)

    def point(self, male, female) -> AllocationPoint:
        return AllocationPoint(
            self.order,
            tuple(tuple(int(v) for v in g) for g in male),
            tuple(tuple(int(v) for v in g) for g in female),
        )


def _objective_weights(p: GnmProblem, n: int, m: int, kind: str, pos=None) -> np.ndarray:
    lay = p.layout
    if p.objective is Objective.SEHC:
        if kind == "race-block":
            return lay.homogamy_mask().astype(float)
        k, l = pos
        same = lay.male_edu_labels[k] == lay.female_edu_labels[l]
        return np.full((2, 2), 1.0 if same else 0.0)
    if kind == "race-block":
        i, j = pos
        return np.full((n, m), 1.0 if i != j else 0.0)
    return np.array([[0.0, 1.0], [1.0, 0.0]])


def _block(name, source, total, weights, male, female, rows, cols) -> _Block:
    n, m = source.shape
    if int(total) == 0:
        # an empty block holds no couples whatever its source says
        theta_x = [[Fraction(0)] * (m - 1) for _ in range(n - 1)]
        theta = np.zeros((n - 1, m - 1))
        return _Block(name, source, theta, theta_x, 0, weights, male, female,
                      tuple(rows), tuple(cols))
    try:
        theta_x = exact_theta(source)
    except DegenerateSourceCut as exc:
        raise DegenerateSourceCut(exc.row_high, exc.col_high, exc.total,
                                  f"{exc.cut} of block {name}") from None
    theta = np.array([[float(v) for v in row] for row in theta_x], dtype=float)
    return _Block(name, source, theta, theta_x, int(total), weights, male, female,
                  tuple(rows), tuple(cols))


def _check_group(g: _Group, what: str):
    if g.total < 0 or g.total > sum(g.caps):
        raise InfeasibleBlockTotals(
            f"{what}: block total {g.total} exceeds availability {sum(g.caps)}"
        )


def _race_first_structure(p: GnmProblem, z: np.ndarray) -> _Structure:
    lay = p.layout
    n, m = lay.n_edu_male, lay.n_edu_female
    rows, cols = marginals(p.K_ta)
    a_b, a_w = _integral(rows[:n], "availability"), _integral(rows[n:], "availability")
    f_b, f_w = _integral(cols[:m], "availability"), _integral(cols[m:], "availability")
    bw, wb = int(z[0, 1]), int(z[1, 0])
    male = (_Group(bw, tuple(a_b)), _Group(wb, tuple(a_w)))
    female = (_Group(wb, tuple(f_b)), _Group(bw, tuple(f_w)))
    for g, what in zip(male + female, ("B men", "W men", "B women", "W women")):
        _check_group(g, what)
    src = p.K_te if p.block_source == "te" else p.K_tr
    rb, rw = lay.race_labels
    eye_n, eye_m = np.eye(n, dtype=np.int64), np.eye(m, dtype=np.int64)
    zero_n, zero_m = np.zeros(n, dtype=np.int64), np.zeros(m, dtype=np.int64)

    def side(group, base, sign, eye, zero):
        return _Side(group, np.array(base, dtype=np.int64) if sign < 0 else zero, sign * eye)

    groups_def = [
        ("BB", rb, rb, side(0, a_b, -1, eye_n, zero_n), side(0, f_b, -1, eye_m, zero_m), 0, 0),
        ("BW", rb, rw, side(0, a_b, +1, eye_n, zero_n), side(1, f_w, +1, eye_m, zero_m), 0, 1),
        ("WB", rw, rb, side(1, a_w, +1, eye_n, zero_n), side(0, f_b, +1, eye_m, zero_m), 1, 0),
        ("WW", rw, rw, side(1, a_w, -1, eye_n, zero_n), side(1, f_w, -1, eye_m, zero_m), 1, 1),
    ]
    blocks = []
    for name, hr, wr, ms, fs, i, j in groups_def:
        blocks.append(_block(
            name, block_extract(src, lay, hr, wr), z[i, j],
            _objective_weights(p, n, m, "race-block", (i, j)), ms, fs,
            range(i * n, (i + 1) * n), range(j * m, (j + 1) * m),
        ))
    return _Structure(Order.RACE_FIRST, male, female, tuple(blocks), int(z.sum()),
                      lay.shape, lay.row_labels(), lay.col_labels())


def _edu_first_structure(p: GnmProblem, e: np.ndarray) -> _Structure:
    lay = p.layout
    n, m = lay.n_edu_male, lay.n_edu_female
    rows, cols = marginals(p.K_ta)
    a_b = _integral(rows[:n], "availability")
    f_b = _integral(cols[:m], "availability")
    _integral(rows[n:], "availability")
    _integral(cols[m:], "availability")
    male = tuple(_Group(a_b[k], tuple(int(v) for v in e[k, :])) for k in range(n))
    female = tuple(_Group(f_b[l], tuple(int(v) for v in e[:, l])) for l in range(m))
    for k, g in enumerate(male):
        _check_group(g, f"B men of education {lay.male_edu_labels[k]}")
    for l, g in enumerate(female):
        _check_group(g, f"B women of education {lay.female_edu_labels[l]}")
    blocks = []
    kt = p.K_tr.counts
    for k in range(n):
        for l in range(m):
            r_idx, c_idx = (k, n + k), (l, m + l)
            source = ContingencyTable(kt[np.ix_(r_idx, c_idx)], lay.race_labels, lay.race_labels)
            mc = np.zeros((2, m), dtype=np.int64)
            mc[0, l], mc[1, l] = 1, -1
            fc = np.zeros((2, n), dtype=np.int64)
            fc[0, k], fc[1, k] = 1, -1
            off = np.array([0, int(e[k, l])], dtype=np.int64)
            name = f"{lay.male_edu_labels[k]}{lay.female_edu_labels[l]}"
            blocks.append(_block(
                name, source, e[k, l], _objective_weights(p, 2, 2, "edu-block", (k, l)),
                _Side(k, off, mc), _Side(l, off.copy(), fc), r_idx, c_idx,
            ))
    return _Structure(Order.EDU_FIRST, male, female, tuple(blocks), int(e.sum()),
                      lay.shape, lay.row_labels(), lay.col_labels())


def _structure(p: GnmProblem, order: Order) -> _Structure:
    if order is Order.RACE_FIRST:
        return _race_first_structure(p, _rounded_step(_racial_exact(p), "racial"))
    return _edu_first_structure(p, _rounded_step(_edu_exact(p), "education"))


def education_first_step(p: GnmProblem) -> tuple[ContingencyTable, Iterator[AllocationPoint]]:
    """Step-one education table (before rounding) and the allocation stream."""
    z = _edu_exact(p)
    table = ContingencyTable([[float(v) for v in row] for row in z],
                             p.layout.male_edu_labels, p.layout.female_edu_labels)
    return table, enumerate_allocations(replace(p, order=Order.EDU_FIRST))


def _lattice(g: _Group, lo=None, hi=None) -> np.ndarray:
    """All integer vectors with the group's sum and caps, in lexicographic order."""
    size = g.size
    lo = [0] * size if lo is None else list(lo)
    hi = list(g.caps) if hi is None else [min(a, b) for a, b in zip(hi, g.caps)]
    suffix_hi = [sum(hi[k:]) for k in range(size)] + [0]
    suffix_lo = [sum(lo[k:]) for k in range(size)] + [0]

    def rec(k: int, remaining: int) -> list:
        if k == size - 1:
            if lo[k] <= remaining <= hi[k]:
                return [np.array([[remaining]], dtype=np.int64)]
            return []
        out = []
        start = max(lo[k], remaining - suffix_hi[k + 1])
        stop = min(hi[k], remaining - suffix_lo[k + 1])
        for v in range(start, stop + 1):
            for tail in rec(k + 1, remaining - v):
                out.append(np.column_stack([np.full(len(tail), v, dtype=np.int64), tail]))
        return out

    parts = rec(0, g.total)
    if not parts:
        return np.zeros((0, size), dtype=np.int64)
    return np.concatenate(parts, axis=0)


def enumerate_allocations(p: GnmProblem, racial: ContingencyTable | None = None
                          ) -> Iterator[AllocationPoint]:
    """Every lattice point satisfying the availability constraints, in key order.

    ``racial`` overrides the (rounded) step-one racial table in the race-first
    order. Negative-cell feasibility is not checked here.
    """
    order = Order.EDU_FIRST if p.order is Order.EDU_FIRST else Order.RACE_FIRST
    if order is Order.RACE_FIRST and racial is not None:
        z = np.asarray(racial.counts)
        if np.any(z != np.round(z)):
            z = round_preserving_margins([[Fraction(float(v)) for v in r] for r in z])
        st = _race_first_structure(p, z.astype(np.int64))
    else:
        st = _structure(p, order)
    lattices = [_lattice(g) for g in st.male + st.female]
    if any(len(lat) == 0 for lat in lattices):
        raise InfeasibleBlockTotals("no integer allocation satisfies the block totals")
    k = len(st.male)

    def gen():
        for combo in itertools.product(*lattices):
            yield st.point(combo[:k], combo[k:])

    return gen()


def observed_allocation(p: GnmProblem, order: Order | None = None) -> AllocationPoint:
    """The allocation realised in ``K_ta`` itself."""
    order = Order(order or (Order.EDU_FIRST if p.order is Order.EDU_FIRST else Order.RACE_FIRST))
    lay = p.layout
    n, m = lay.n_edu_male, lay.n_edu_female
    k = p.K_ta.counts
    if order is Order.RACE_FIRST:
        male = (k[:n, m:].sum(axis=1), k[n:, :m].sum(axis=1))
        female = (k[n:, :m].sum(axis=0), k[:n, m:].sum(axis=0))
    else:
        x = k[:n, :m] + k[:n, m:]
        y = k[:n, :m] + k[n:, :m]
        male = tuple(x[i, :] for i in range(n))
        female = tuple(y[:, j] for j in range(m))
    return AllocationPoint(
        order,
        tuple(tuple(_integral(v, "observed allocation")) for v in male),
        tuple(tuple(_integral(v, "observed allocation")) for v in female),
    )


def _check_point(st: _Structure, a: AllocationPoint) -> None:
    if a.order is not st.order:
        raise ValueError(f"allocation is for order {a.order.value}, problem uses {st.order.value}")
    for vec, g in zip(a.male + a.female, st.male + st.female):
        if len(vec) != g.size or sum(vec) != g.total or any(
            v < 0 or v > c for v, c in zip(vec, g.caps)
        ):
            raise InfeasibleBlockTotals(f"allocation vector {vec} violates the block constraints")


def _block_marginals(st: _Structure, a: AllocationPoint):
    for b in st.blocks:
        yield b, b.male.marginal(a.male[b.male.group]), b.female.marginal(a.female[b.female.group])


def assemble_counterfactual(
    p: GnmProblem, racial: ContingencyTable | None, a: AllocationPoint
) -> tuple[ContingencyTable, list[tuple[int, int, float]]]:
    """Full counterfactual table at one allocation and its cells below ``-epsilon``."""
    if a.order is Order.RACE_FIRST and racial is not None:
        z = np.asarray(racial.counts)
        if np.any(z != np.round(z)):
            z = round_preserving_margins([[Fraction(float(v)) for v in r] for r in z])
        st = _race_first_structure(p, z.astype(np.int64))
    else:
        st = _structure(p, a.order)
    _check_point(st, a)
    cells = _assemble_exact(st, a)
    table = ContingencyTable(
        [[float(v) for v in row] for row in cells], st.row_labels, st.col_labels
    )
    eps = Fraction(p.epsilon)
    negative = [(r, c, float(v)) for r, row in enumerate(cells) for c, v in enumerate(row)
                if v < -eps]
    return table, negative


def _assemble_exact(st: _Structure, a: AllocationPoint) -> list[list[Fraction]]:
    n_rows, n_cols = st.shape
    out = [[Fraction(0)] * n_cols for _ in range(n_rows)]
    for b, mm, fm in _block_marginals(st, a):
        cells = nm_transform_exact(b.theta_exact, [int(v) for v in mm], [int(v) for v in fm],
                                   on_degenerate_target="force")
        for i, r in enumerate(b.rows):
            for j, c in enumerate(b.cols):
                out[r][c] = cells[i][j]
    return out


def _exact_value(st: _Structure, a: AllocationPoint, eps: Fraction):
    """Exact weighted numerator and feasibility of one allocation."""
    total = Fraction(0)
    feasible = True
    for b, mm, fm in _block_marginals(st, a):
        cells = nm_transform_exact(b.theta_exact, [int(v) for v in mm], [int(v) for v in fm],
                                   on_degenerate_target="force")
        for i, row in enumerate(cells):
            for j, v in enumerate(row):
                if v < -eps:
                    feasible = False
                w = b.weights[i, j]
                if w:
                    total += Fraction(float(w)) * v
    return total, feasible


def evaluate_allocation(p: GnmProblem, a: AllocationPoint) -> tuple[float, bool]:
    """Objective of the counterfactual table at ``a`` and whether it is feasible.

    The value is computed in rational arithmetic and rounded once, so it is
    reproducible bit for bit.
    """
    st = _structure(p, a.order)
    _check_point(st, a)
    num, feasible = _exact_value(st, a, Fraction(p.epsilon))
    return float(num / st.total), feasible


# --- search -----------------------------------------------------------------


def _corner_sums(theta, total, r_tails, c_tails):
    """Float corner sums for exact integer tails, vectorized over points.

    ``r_tails`` has shape (P, n-1) and ``c_tails`` (P, m-1), broadcastable.
    Returns S with shape (P, n+1, m+1).
    """
    n, m = theta.shape[0] + 1, theta.shape[1] + 1
    p = max(r_tails.shape[0], c_tails.shape[0])
    s = np.zeros((p, n + 1, m + 1))
    s[:, 0, 0] = total
    s[:, 1:n, 0] = r_tails
    s[:, 0, 1:m] = c_tails
    for i in range(n - 1):
        for j in range(m - 1):
            r, c = r_tails[:, i], c_tails[:, j]
            f = (r * c) // total if total > 0 else np.zeros_like(r * c)
            s[:, i + 1, j + 1] = f + theta[i, j] * (np.minimum(r, c) - f)
    return s


def _interior_interval(a, th, total, rlo, rhi, c):
    """Bounds of (1-theta)*floor(R*C/T) + theta*min(R, C) for R in [rlo, rhi]."""
    if total > 0:
        flo, fhi = (rlo * c) // total, (rhi * c) // total
    else:
        flo = fhi = np.zeros_like(c)
    mlo, mhi = np.minimum(rlo, c), np.minimum(rhi, c)
    p1, p2 = a * flo, a * fhi
    q1, q2 = th * mlo, th * mhi
    return np.minimum(p1, p2) + np.minimum(q1, q2), np.maximum(p1, p2) + np.maximum(q1, q2)


def _cells(s):
    return s[:, :-1, :-1] - s[:, 1:, :-1] - s[:, :-1, 1:] + s[:, 1:, 1:]


@dataclass
class _Node:
    lo: list  # per male group: int arrays over all entries
    hi: list

    def key_lo(self) -> tuple:
        return tuple(int(v) for lo in self.lo for v in lo[:-1])

    def is_leaf(self) -> bool:
        return all(np.array_equal(lo, hi) for lo, hi in zip(self.lo, self.hi))


@dataclass
class _Best:
    exact: Fraction
    value: float
    key: tuple
    male: tuple
    female: tuple


def _better(a: _Best | None, b: _Best | None) -> _Best | None:
    if a is None:
        return b
    if b is None:
        return a
    if (b.exact, b.key) < (a.exact, a.key):
        return b
    return a


def _propagate(lo: np.ndarray, hi: np.ndarray, total: int) -> bool:
    """Tighten a box against ``sum(g) == total``; False if it becomes empty."""
    while True:
        s_lo, s_hi = int(lo.sum()), int(hi.sum())
        new_lo = np.maximum(lo, total - (s_hi - hi))
        new_hi = np.minimum(hi, total - (s_lo - lo))
        if np.any(new_lo > new_hi):
            return False
        if np.array_equal(new_lo, lo) and np.array_equal(new_hi, hi):
            return True
        lo[:], hi[:] = new_lo, new_hi


def _linear_range(c: np.ndarray, lo: np.ndarray, hi: np.ndarray, total: int) -> tuple[int, int]:
    """Exact min and max of ``c @ g`` over the box with ``sum(g) == total``."""
    out = []
    for order in (np.argsort(c, kind="stable"), np.argsort(-c, kind="stable")):
        g = lo.copy()
        rem = total - int(lo.sum())
        for k in order:
            step = min(rem, int(hi[k] - lo[k]))
            g[k] += step
            rem -= step
        out.append(int(c @ g))
    return out[0], out[1]


class _Search:
    """Branch and bound over the male allocation groups.

    For a fixed male allocation the female groups decouple (every block's
    female marginal depends on exactly one female group), so each female
    group is scanned exhaustively and vectorized. Boxes of male allocations
    are bounded with monotone interval bounds of the corner-sum formula and
    pruned only when provably no better (ties are pruned only for boxes that
    lie lexicographically after the incumbent).
    """

    def __init__(self, st: _Structure, sign: int, epsilon: float, keep_negative: bool):
        self.st = st
        self.sign = sign
        self.eps = epsilon
        self.eps_exact = Fraction(epsilon)
        self.keep_negative = keep_negative
        self.tol = 1e-9 * max(1.0, float(st.total))
        self.inner = [_lattice(g) for g in st.female]
        if any(len(pts) == 0 for pts in self.inner):
            raise InfeasibleBlockTotals("no integer allocation satisfies the female block totals")
        self.group_blocks = [
            [b for b in st.blocks if b.female.group == gi] for gi in range(len(st.female))
        ]
        self.c_tails = {}
        self.weights = {}
        self.corner_w = {}
        self.male_tail = {}
        for b in st.blocks:
            pts = self.inner[b.female.group]
            self.c_tails[b.name] = b.female.tail_offset[None, :] + pts @ b.female.tail_coef.T
            self.weights[b.name] = sign * b.weights
            self.corner_w[b.name] = sign * b.corner_weights()
            self.male_tail[b.name] = (b.male.tail_offset, b.male.tail_coef)
        self.constant_group = [
            all(np.all(b.weights == b.weights.flat[0]) for b in blocks)
            for blocks in self.group_blocks
        ]
        self.n_feasible = 0
        self.n_excluded = 0
        self.n_nodes = 0
        self._cache: OrderedDict = OrderedDict()

    # -- boxes

    def root(self) -> _Node | None:
        lo = [np.zeros(g.size, dtype=np.int64) for g in self.st.male]
        hi = [np.array(g.caps, dtype=np.int64) for g in self.st.male]
        for g, l, h in zip(self.st.male, lo, hi):
            if not _propagate(l, h, g.total):
                raise InfeasibleBlockTotals("no integer allocation satisfies the male block totals")
        return _Node(lo, hi)

    def split(self, node: _Node) -> list[_Node]:
        best, where = 0, None
        for gi, (lo, hi) in enumerate(zip(node.lo, node.hi)):
            for k in range(len(lo) - 1):
                w = int(hi[k] - lo[k])
                if w > best:
                    best, where = w, (gi, k)
        gi, k = where
        mid = (int(node.lo[gi][k]) + int(node.hi[gi][k])) // 2
        out = []
        for a, b in ((int(node.lo[gi][k]), mid), (mid + 1, int(node.hi[gi][k]))):
            lo = [v.copy() for v in node.lo]
            hi = [v.copy() for v in node.hi]
            lo[gi][k], hi[gi][k] = a, b
            if _propagate(lo[gi], hi[gi], self.st.male[gi].total):
                out.append(_Node(lo, hi))
        return out

    def _tail_ranges(self, b: _Block, node: _Node):
        off, coef = self.male_tail[b.name]
        gi = b.male.group
        lo, hi, total = node.lo[gi], node.hi[gi], self.st.male[gi].total
        rlo, rhi = [], []
        for i in range(len(off)):
            a, z = _linear_range(coef[i], lo, hi, total)
            rlo.append(off[i] + a)
            rhi.append(off[i] + z)
        return np.array(rlo, dtype=np.int64), np.array(rhi, dtype=np.int64)

    def bound(self, node: _Node) -> float:
        """Lower bound of the signed objective numerator over the box (inf if empty).

        For a fixed female point a block's objective splits into one term per
        male tail (the corner sum ``S(r, c)`` involves only the ``r``-th male
        tail), so each term is minimized exactly over that tail's range.
        Female groups are then minimized independently.
        """
        self.n_nodes += 1
        total_lb = 0.0
        for gi, blocks in enumerate(self.group_blocks):
            lb = np.zeros(len(self.inner[gi]))
            feasible = np.ones(len(lb), dtype=bool)
            for b in blocks:
                rlo, rhi = self._tail_ranges(b, node)
                lb += self._separable_bound(b, rlo, rhi)
                if not self.keep_negative:
                    key = ("F", b.name, tuple(rlo.tolist()), tuple(rhi.tolist()))
                    feasible &= self._cached(key, lambda: self._block_bounds(b, rlo, rhi)
                                             >= -self.eps)
            if not feasible.any():
                return math.inf
            total_lb += float(lb[feasible].min())
        return total_lb

    def _cached(self, key, compute):
        hit = self._cache.get(key)
        if hit is None:
            hit = compute()
            self._cache[key] = hit
            if len(self._cache) > CACHE_SIZE:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return hit

    def _separable_bound(self, b: _Block, rlo, rhi) -> np.ndarray:
        w = self.corner_w[b.name]
        c = self.c_tails[b.name]
        n, m = b.shape
        out = w[0, 0] * b.total + c @ w[0, 1:]
        for i in range(n - 1):
            lo, hi = int(rlo[i]), int(rhi[i])
            out = out + self._cached(("S", b.name, i, lo, hi),
                                     lambda: self._tail_term(b, i, lo, hi))
        return out

    def _tail_term(self, b: _Block, i: int, lo: int, hi: int) -> np.ndarray:
        """Minimum over ``R`` in ``[lo, hi]`` of the terms involving male tail ``i``."""
        w = self.corner_w[b.name]
        c = self.c_tails[b.name]
        r = np.arange(lo, hi + 1)[None, :]
        phi = np.broadcast_to(w[i + 1, 0] * r.astype(float), (c.shape[0], r.shape[1]))
        for j in range(b.shape[1] - 1):
            if w[i + 1, j + 1] == 0:
                continue
            cj = c[:, j][:, None]
            f = (r * cj) // b.total if b.total > 0 else np.zeros_like(r * cj)
            phi = phi + w[i + 1, j + 1] * (f + b.theta[i, j] * (np.minimum(r, cj) - f))
        return phi.min(axis=1)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = OrderedDict()
        return state

    def _block_bounds(self, b: _Block, rlo, rhi) -> np.ndarray:
        """Upper bound of the smallest cell per female point (for infeasibility)."""
        c = self.c_tails[b.name]
        n, m = b.shape
        p = c.shape[0]
        slo = np.zeros((p, n + 1, m + 1))
        shi = np.zeros((p, n + 1, m + 1))
        slo[:, 0, 0] = shi[:, 0, 0] = b.total
        slo[:, 1:n, 0], shi[:, 1:n, 0] = rlo, rhi
        slo[:, 0, 1:m] = shi[:, 0, 1:m] = c
        for i in range(n - 1):
            for j in range(m - 1):
                th = b.theta[i, j]
                slo[:, i + 1, j + 1], shi[:, i + 1, j + 1] = _interior_interval(
                    1.0 - th, th, b.total, rlo[i], rhi[i], c[:, j]
                )
        cell_hi = shi[:, :-1, :-1] - slo[:, 1:, :-1] - slo[:, :-1, 1:] + shi[:, 1:, 1:]
        return cell_hi.min(axis=(1, 2))

    # -- leaves

    def _group_values(self, gi: int, male: tuple):
        vals = np.zeros(len(self.inner[gi]))
        feasible = np.ones(len(vals), dtype=bool)
        for b in self.group_blocks[gi]:
            off, coef = self.male_tail[b.name]
            r = (off + coef @ male[b.male.group])[None, :]
            s = _corner_sums(b.theta, b.total, r, self.c_tails[b.name])
            cells = _cells(s)
            vals += np.einsum("pij,ij->p", cells, self.weights[b.name])
            if not self.keep_negative:
                feasible &= cells.min(axis=(1, 2)) >= -self.eps
        return vals, feasible

    def _exact_group(self, gi: int, male: tuple, idx: int) -> tuple[Fraction, bool]:
        point = self.inner[gi][idx]
        value, feasible = Fraction(0), True
        for b in self.group_blocks[gi]:
            mm = b.male.marginal(male[b.male.group])
            fm = b.female.marginal(point)
            cells = nm_transform_exact(b.theta_exact, [int(v) for v in mm],
                                       [int(v) for v in fm], on_degenerate_target="force")
            w = self.weights[b.name]
            for i, row in enumerate(cells):
                for j, v in enumerate(row):
                    if v < -self.eps_exact:
                        feasible = False
                    if w[i, j]:
                        value += int(w[i, j]) * v
        if self.keep_negative:
            feasible = True
        return value, feasible

    def leaf(self, node: _Node, incumbent: _Best | None) -> _Best | None:
        male = tuple(lo.copy() for lo in node.lo)
        per_group = []
        n_all, n_feas = 1, 1
        for gi in range(len(self.inner)):
            vals, feasible = self._group_values(gi, male)
            per_group.append((vals, feasible))
            n_all *= len(vals)
            n_feas *= int(feasible.sum())
        self.n_feasible += n_feas
        self.n_excluded += n_all - n_feas
        if n_feas == 0:
            return None
        approx = sum(float(v[f].min()) for v, f in per_group)
        if incumbent is not None and approx > incumbent.value + self.tol:
            return None
        exact, value, chosen = Fraction(0), 0.0, []
        for gi, (vals, feasible) in enumerate(per_group):
            found = self._resolve_group(gi, male, vals, feasible)
            if found is None:
                return None
            exact += found[0]
            value += float(vals[found[1]])
            chosen.append(self.inner[gi][found[1]])
        key = node.key_lo() + tuple(int(v) for pt in chosen for v in pt[:-1])
        return _Best(exact, value, key, male, tuple(chosen))

    def _resolve_group(self, gi, male, vals, feasible):
        idx = np.flatnonzero(feasible)
        if self.constant_group[gi]:
            first = int(idx[0])
            return self._exact_group(gi, male, first)[0], first
        order = idx[np.argsort(vals[idx], kind="stable")]
        best = None
        for k in order:
            k = int(k)
            if best is not None and vals[k] > vals[best[1]] + self.tol:
                break
            value, ok = self._exact_group(gi, male, k)
            if not ok:
                continue
            if best is None or value < best[0] or (value == best[0] and k < best[1]):
                best = (value, k)
        return best

    # -- driver

    def prune(self, lb: float, node: _Node, incumbent: _Best | None) -> bool:
        if lb == math.inf:
            return True
        if incumbent is None:
            return False
        if lb > incumbent.value + self.tol:
            return True
        k = len(node.key_lo())
        return lb >= incumbent.value and node.key_lo() > incumbent.key[:k]

    def dive(self) -> _Best | None:
        """Greedy descent to one leaf for a first incumbent."""
        node = self.root()
        while node is not None:
            if node.is_leaf():
                saved = (self.n_feasible, self.n_excluded)
                out = self.leaf(node, None)
                self.n_feasible, self.n_excluded = saved
                return out
            kids = [(self.bound(c), c.key_lo(), c) for c in self.split(node)]
            kids = [k for k in kids if k[0] < math.inf]
            if not kids:
                return None
            node = min(kids, key=lambda t: (t[0], t[1]))[2]
        return None

    def run(self, node: _Node, incumbent: _Best | None, max_nodes: int | None = None):
        """Depth-first search below ``node``.

        Returns the incumbent and whether the subtree was exhausted (False when
        ``max_nodes`` bounds ran out first).
        """
        stack = [(self.bound(node), node)]
        start = self.n_nodes
        while stack:
            if max_nodes is not None and self.n_nodes - start >= max_nodes:
                return incumbent, False
            lb, node = stack.pop()
            if self.prune(lb, node, incumbent):
                continue
            if node.is_leaf():
                incumbent = _better(incumbent, self.leaf(node, incumbent))
                continue
            kids = [(self.bound(c), c) for c in self.split(node)]
            # best child last so it is popped first
            kids.sort(key=lambda t: (t[0], t[1].key_lo()), reverse=True)
            stack.extend(kids)
        return incumbent, True

    def chunks(self, count: int) -> list[_Node]:
        nodes = [self.root()]
        while len(nodes) < count:
            splittable = [k for k, nd in enumerate(nodes) if not nd.is_leaf()]
            if not splittable:
                break
            k = max(splittable, key=lambda i: self._volume(nodes[i]))
            nodes[k:k + 1] = self.split(nodes[k])
        return nodes

    @staticmethod
    def _volume(node: _Node) -> int:
        v = 1
        for lo, hi in zip(node.lo, node.hi):
            for a, b in zip(lo[:-1], hi[:-1]):
                v *= int(b - a) + 1
        return v


N_CHUNKS = 8
CACHE_SIZE = 256
WARMUP_NODES = 2000


def _run_chunk(args):
    search, node, incumbent = args
    search.n_feasible = search.n_excluded = 0
    best, _ = search.run(node, incumbent)
    return best, search.n_feasible, search.n_excluded


def _optimize(st: _Structure, sign: int, p: GnmProblem, jobs: int, pool=None):
    """Serial warm-up from the root; if it does not finish, a fixed split into
    ``N_CHUNKS`` subtrees seeded with the warm-up incumbent. Neither step
    depends on ``jobs``, so neither do the result and the counters."""
    search = _Search(st, sign, p.epsilon, p.keep_negative)
    incumbent = search.dive()
    search.n_feasible = search.n_excluded = 0
    incumbent, finished = search.run(search.root(), incumbent, WARMUP_NODES)
    if finished:
        return incumbent, search.n_feasible, search.n_excluded
    log.debug("warm-up did not finish; splitting into %d chunks", N_CHUNKS)
    nodes = search.chunks(N_CHUNKS)
    tasks = [(search, nd, incumbent) for nd in nodes]
    if pool is not None:
        results = list(pool.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(t) for t in tasks]
    best, n_feas, n_excl = incumbent, 0, 0
    for b, f, e in results:
        best = _better(best, b)
        n_feas += f
        n_excl += e
    return best, n_feas, n_excl


def _interval_one_order(p: GnmProblem, order: Order, jobs: int, mode: str) -> MomentInterval:
    st = _structure(p, order)
    try:
        obs = observed_allocation(p, order)
        _check_point(st, obs)
        num, ok = _exact_value(st, obs, Fraction(p.epsilon))
        observed_value = float(num / st.total) if (ok or p.keep_negative) else None
    except HomogamyError:
        obs, observed_value = None, None
    if mode == "observed":
        if obs is None or observed_value is None:
            raise NoFeasiblePoint("the observed allocation is not a feasible point of this problem")
        exact = num / st.total
        return MomentInterval(observed_value, observed_value, obs, obs, 1, 0,
                              exact, exact, observed_value)
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        lo, f1, e1 = _optimize(st, +1, p, jobs, pool)
        hi, f2, e2 = _optimize(st, -1, p, jobs, pool)
    finally:
        if pool is not None:
            pool.shutdown()
    if lo is None or hi is None:
        raise NoFeasiblePoint(
            f"every {order.value} allocation yields a cell below -{p.epsilon:g}"
        )
    exact_min = lo.exact / st.total
    exact_max = -hi.exact / st.total
    return MomentInterval(
        float(exact_min), float(exact_max),
        st.point(lo.male, lo.female), st.point(hi.male, hi.female),
        f1 + f2, e1 + e2, exact_min, exact_max, observed_value,
    )


def gnm_interval(p: GnmProblem, *, jobs: int = 1, mode: str = "search") -> MomentInterval:
    """Exact range of the objective over feasible allocations.

    ``mode="observed"`` evaluates only the allocation realised in ``K_ta``.
    For ``Order.BOTH`` the result is the hull of the two single-order
    intervals. ``jobs`` spreads a fixed set of search chunks over worker
    processes; the result does not depend on it.
    """
    if mode not in ("search", "observed"):
        raise ValueError("mode must be 'search' or 'observed'")
    if p.order is not Order.BOTH:
        return _interval_one_order(p, p.order, jobs, mode)
    parts = [_interval_one_order(p, o, jobs, mode) for o in (Order.RACE_FIRST, Order.EDU_FIRST)]
    lo = min(parts, key=lambda r: r.exact_min)
    hi = max(parts, key=lambda r: r.exact_max)
    observed = [r.observed_value for r in parts if r.observed_value is not None]
    return MomentInterval(
        lo.min_value, hi.max_value, lo.argmin, hi.argmax,
        sum(r.n_feasible for r in parts), sum(r.n_excluded_negative for r in parts),
        lo.exact_min, hi.exact_max, observed[0] if observed else None,
    )
