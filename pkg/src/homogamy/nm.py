"""Closed-form NM counterfactual transform.

Given a preference-source table and target marginals, the transform returns the
unique table whose generalized Liu-Lu matrix equals the source's and whose
marginals equal the targets.

The construction works on corner (survival) sums ``S(r, c)``, the number of
couples with husband type >= r and wife type >= c. At cut ``(i, j)`` the high/high
count of the collapsed 2x2 table is ``S(i+1, j+1)``, so inverting the Liu-Lu
formula at every cut fixes every interior corner sum::

    S(i+1, j+1) = Q-(i,j) + theta(i,j) * (min(R_i, C_j) - Q-(i,j))

with ``R_i``, ``C_j`` the target tail sums and ``Q-`` the floored random-matching
count under the targets. Cells follow by double differencing. Example with
source ``diag(10, 10, 10)`` (theta = 1 everywhere) and targets ``(12, 10, 8)``
on both sides: ``S(2,2) = min(18, 18) = 18``, ``S(2,3) = S(3,2) = S(3,3) = 8``,
which differences to ``diag(12, 10, 8)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np

from .errors import DegenerateSourceCut, DegenerateTargetCut, DimensionMismatch, InvalidTargets
from .liulu import (
    CutStatus,
    DegenerateDenominator,
    LiuLuMatrix,
    cut_aggregate,
    floor_product_ratio,
    ll_generalized,
    theta_exact,
)
from .tables import ContingencyTable, marginals

__all__ = [
    "TargetMarginals",
    "NMResult",
    "source_theta",
    "nm_corner_sums",
    "nm_transform",
    "nm_transform_convenience",
    "nm_transform_exact",
    "exact_theta",
    "corner_sums_to_cells",
]

MARGIN_TOL = 1e-9

DegeneratePolicy = Literal["raise", "force"]


@dataclass(frozen=True, eq=False)
class TargetMarginals:
    row_targets: np.ndarray
    col_targets: np.ndarray

    def __post_init__(self):
        rows = np.array(self.row_targets, dtype=float)
        cols = np.array(self.col_targets, dtype=float)
        if rows.ndim != 1 or cols.ndim != 1:
            raise InvalidTargets("targets must be vectors")
        if np.any(rows < 0) or np.any(cols < 0):
            raise InvalidTargets("targets must be nonnegative")
        if abs(math.fsum(rows) - math.fsum(cols)) > MARGIN_TOL * max(1.0, math.fsum(rows)):
            raise InvalidTargets(
                f"row and column targets disagree on the grand total: "
                f"{math.fsum(rows)!r} vs {math.fsum(cols)!r}"
            )
        rows.setflags(write=False)
        cols.setflags(write=False)
        object.__setattr__(self, "row_targets", rows)
        object.__setattr__(self, "col_targets", cols)

    @classmethod
    def of(cls, t: ContingencyTable) -> "TargetMarginals":
        return cls(*marginals(t))

    @property
    def total(self) -> float:
        return math.fsum(self.row_targets)

    def merged(self, row_groups, col_groups) -> "TargetMarginals":
        return TargetMarginals(
            [math.fsum(self.row_targets[list(g)]) for g in row_groups],
            [math.fsum(self.col_targets[list(g)]) for g in col_groups],
        )


@dataclass(frozen=True, eq=False)
class NMResult:
    table: ContingencyTable
    negative_cells: list[tuple[int, int, float]]
    cut_flags: tuple[tuple[CutStatus, ...], ...]
    theta: np.ndarray
    forced_cuts: list[tuple[int, int]] = field(default_factory=list)

    @property
    def warnings(self) -> list[str]:
        out = []
        for i, row in enumerate(self.cut_flags):
            for j, f in enumerate(row):
                if f is CutStatus.NEGATIVE_ASSORTATIVITY:
                    out.append(f"source cut ({i + 1}, {j + 1}) is negatively assortative")
        for cut in self.forced_cuts:
            out.append(f"target cut {cut} is degenerate; corner sum forced")
        if self.negative_cells:
            out.append("transformed table has negative cells: counterfactual is not realistic")
        return out


def source_theta(source: ContingencyTable) -> LiuLuMatrix:
    """Generalized Liu-Lu matrix of a source table, refusing degenerate cuts."""
    llm = ll_generalized(source)
    bad = llm.degenerate_cuts()
    if bad:
        i, j = bad[0]
        z = cut_aggregate(source, i, j)
        raise DegenerateSourceCut(z.row_high, z.col_high, z.total, (i, j))
    return llm


def _tails(v: np.ndarray) -> list[float]:
    # tails[k] = sum of v[k:], computed with exact summation
    return [math.fsum(v[k:]) for k in range(len(v))] + [0.0]


def nm_corner_sums(
    source: ContingencyTable,
    targets: TargetMarginals,
    *,
    on_degenerate_target: DegeneratePolicy = "raise",
    _theta: LiuLuMatrix | None = None,
    _forced: list | None = None,
) -> np.ndarray:
    """Counterfactual corner sums.

    Returns an ``(n+1) x (m+1)`` array ``S`` with ``S[r, c]`` the count of
    couples in rows ``>= r`` and columns ``>= c`` (0-based), zero on the last
    row and column.

    With ``on_degenerate_target="force"`` a degenerate target cut (where the
    Frechet bounds collapse, e.g. an empty high category) takes its only
    admissible value ``min(R, C)`` instead of raising.
    """
    n, m = source.shape
    if targets.row_targets.shape != (n,) or targets.col_targets.shape != (m,):
        raise DimensionMismatch("targets do not match the source table shape")
    llm = _theta if _theta is not None else source_theta(source)
    total = targets.total
    rt, ct = _tails(targets.row_targets), _tails(targets.col_targets)
    s = np.zeros((n + 1, m + 1))
    s[0, 0] = total
    s[1:n, 0] = rt[1:n]
    s[0, 1:m] = ct[1:m]
    for i in range(1, n):
        for j in range(1, m):
            r, c = rt[i], ct[j]
            q_minus = floor_product_ratio(r, c, total) if total > 0 else 0
            span = min(r, c) - q_minus
            if span == 0:
                if on_degenerate_target == "raise":
                    raise DegenerateTargetCut(r, c, total, (i, j))
                if _forced is not None:
                    _forced.append((i, j))
            s[i, j] = q_minus + llm.values[i - 1, j - 1] * span
    return s


def corner_sums_to_cells(s: np.ndarray) -> np.ndarray:
    return s[:-1, :-1] - s[1:, :-1] - s[:-1, 1:] + s[1:, 1:]


def nm_transform(
    source: ContingencyTable,
    targets: TargetMarginals,
    *,
    on_degenerate_target: DegeneratePolicy = "raise",
    negative_tol: float = 0.0,
) -> NMResult:
    """Table with the source's generalized Liu-Lu matrix and the target marginals.

    Negative cells are kept and listed in ``negative_cells`` (cells below
    ``-negative_tol``); they signal an unrealistic counterfactual.
    """
    llm = source_theta(source)
    forced: list = []
    s = nm_corner_sums(
        source, targets, on_degenerate_target=on_degenerate_target, _theta=llm, _forced=forced
    )
    cells = corner_sums_to_cells(s)
    negative = [
        (int(r), int(c), float(cells[r, c]))
        for r, c in zip(*np.nonzero(cells < -negative_tol))
    ]
    table = ContingencyTable(cells, source.row_labels, source.col_labels)
    return NMResult(table, negative, llm.flags, llm.values, forced)


def nm_transform_convenience(
    source: ContingencyTable, availability_table: ContingencyTable, **kwargs
) -> NMResult:
    """NM transform with targets read off another table's marginals."""
    if availability_table.shape != source.shape:
        raise DimensionMismatch("availability table shape differs from the source")
    return nm_transform(source, TargetMarginals.of(availability_table), **kwargs)


def exact_theta(source: ContingencyTable) -> list[list[Fraction]]:
    """Per-cut Liu-Lu values of a source table as exact rationals."""
    n, m = source.shape
    out = []
    for i in range(1, n):
        row = []
        for j in range(1, m):
            try:
                row.append(theta_exact(cut_aggregate(source, i, j), (i, j)))
            except DegenerateDenominator as exc:
                raise DegenerateSourceCut(exc.row_high, exc.col_high, exc.total, (i, j)) from None
        out.append(row)
    return out


def nm_transform_exact(
    theta: Sequence[Sequence[Fraction]],
    row_targets: Sequence,
    col_targets: Sequence,
    *,
    on_degenerate_target: DegeneratePolicy = "raise",
) -> list[list[Fraction]]:
    """Rational-arithmetic transform from per-cut thetas and exact targets."""
    rows = [Fraction(v) for v in row_targets]
    cols = [Fraction(v) for v in col_targets]
    n, m = len(rows), len(cols)
    total = sum(rows)
    if sum(cols) != total:
        raise InvalidTargets("exact targets disagree on the grand total")
    rt = [sum(rows[k:]) for k in range(n)] + [Fraction(0)]
    ct = [sum(cols[k:]) for k in range(m)] + [Fraction(0)]
    s = [[Fraction(0)] * (m + 1) for _ in range(n + 1)]
    for r in range(n):
        s[r][0] = rt[r]
    for c in range(m):
        s[0][c] = ct[c]
    for i in range(1, n):
        for j in range(1, m):
            r, c = rt[i], ct[j]
            q_minus = math.floor(r * c / total) if total > 0 else 0
            span = min(r, c) - q_minus
            if span == 0 and on_degenerate_target == "raise":
                raise DegenerateTargetCut(float(r), float(c), float(total), (i, j))
            s[i][j] = q_minus + theta[i - 1][j - 1] * span
    return [
        [s[r][c] - s[r + 1][c] - s[r][c + 1] + s[r + 1][c + 1] for c in range(m)]
        for r in range(n)
    ]
