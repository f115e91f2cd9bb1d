"""Simplified (2x2) and matrix-valued generalized Liu-Lu measures.

For a 2x2 table with high/high count ``N_HH``, high row total ``N_H.``, high
column total ``N_.H`` and grand total ``N``::

    Q   = N_H. * N_.H / N          (random-matching count of H,H couples)
    Q-  = floor(Q)
    LL  = (N_HH - Q-) / (min(N_H., N_.H) - Q-)

The generalized measure evaluates ``LL`` at every cut ``(i, j)`` of the
ordered axes: rows ``1..i`` against ``i+1..n`` and columns ``1..j`` against
``j+1..m``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CutOutOfRange, DegenerateDenominator, ZeroTotal
from .tables import ContingencyTable

__all__ = [
    "CutStatus",
    "TwoByTwoDecomposed",
    "LiuLuMatrix",
    "floor_product_ratio",
    "cut_aggregate",
    "ll_simple",
    "ll_generalized",
    "theta_exact",
]


class CutStatus(str, enum.Enum):
    OK = "OK"
    NEGATIVE_ASSORTATIVITY = "NegativeAssortativity"
    DEGENERATE_DENOMINATOR = "DegenerateDenominator"


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(float(x))


FLOOR_SNAP = 1e-11


def _floor_snapped(q: Fraction) -> int:
    # a ratio within FLOOR_SNAP (relative) below an integer counts as that
    # integer: float round-off in transformed tables must not drop Q- by one
    k = round(q)
    if q < k and k - q <= FLOOR_SNAP * max(1, abs(k)):
        return int(k)
    return math.floor(q)


def floor_product_ratio(a, b, total) -> int:
    """``floor(a * b / total)`` evaluated exactly (no ``floor(35.99999999)`` slips).

    Arguments may be ints, floats or Fractions. Integral inputs are handled in
    integer arithmetic; otherwise floats are taken at their exact binary value
    and a ratio within ``FLOOR_SNAP`` (relative) below an integer is snapped
    up to it. ``total`` must be positive.
    """
    if all(isinstance(v, (int, np.integer)) or (isinstance(v, float) and v.is_integer())
           for v in (a, b, total)):
        return (int(a) * int(b)) // int(total)
    return _floor_snapped(_as_fraction(a) * _as_fraction(b) / _as_fraction(total))


@dataclass(frozen=True)
class TwoByTwoDecomposed:
    """A 2x2 table ``[[N_LL, N_LH], [N_HL, N_HH]]`` with its derived quantities."""

    n_ll: float
    n_lh: float
    n_hl: float
    n_hh: float

    @classmethod
    def from_matrix(cls, z) -> "TwoByTwoDecomposed":
        z = z.counts if isinstance(z, ContingencyTable) else np.asarray(z, dtype=float)
        if z.shape != (2, 2):
            raise ValueError(f"expected a 2x2 table, got shape {z.shape}")
        return cls(float(z[0, 0]), float(z[0, 1]), float(z[1, 0]), float(z[1, 1]))

    @property
    def row_high(self) -> float:
        return self.n_hl + self.n_hh

    @property
    def col_high(self) -> float:
        return self.n_lh + self.n_hh

    @property
    def total(self) -> float:
        return math.fsum((self.n_ll, self.n_lh, self.n_hl, self.n_hh))

    @property
    def q(self) -> float:
        return self.row_high * self.col_high / self.total

    @property
    def q_minus(self) -> int:
        total = self.total
        if not total > 0:
            raise ZeroTotal("Q undefined for a nonpositive total")
        return floor_product_ratio(self.row_high, self.col_high, total)

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.n_ll, self.n_lh], [self.n_hl, self.n_hh]])


def cut_aggregate(t, i: int, j: int) -> TwoByTwoDecomposed:
    """Collapse a table at cut ``(i, j)``: the first ``i`` rows and ``j`` columns are "low"."""
    z = t.counts if isinstance(t, ContingencyTable) else np.asarray(t, dtype=float)
    n, m = z.shape
    if not (1 <= i <= n - 1 and 1 <= j <= m - 1):
        raise CutOutOfRange(f"cut ({i}, {j}) outside 1..{n - 1} x 1..{m - 1}")
    return TwoByTwoDecomposed(
        math.fsum(z[:i, :j].ravel()),
        math.fsum(z[:i, j:].ravel()),
        math.fsum(z[i:, :j].ravel()),
        math.fsum(z[i:, j:].ravel()),
    )


def ll_simple(z, cut=None) -> tuple[float, CutStatus]:
    """Simplified Liu-Lu measure of a 2x2 table.

    Returns the value and a status. Negative assortativity (``N_HH < Q-``) is
    flagged but still evaluated with the same formula.

    Raises
    ------
    ZeroTotal
        If the grand total is not positive.
    DegenerateDenominator
        If ``min(N_H., N_.H) == Q-``.
    """
    if not isinstance(z, TwoByTwoDecomposed):
        z = TwoByTwoDecomposed.from_matrix(z)
    total = z.total
    if not total > 0:
        raise ZeroTotal("Liu-Lu measure undefined for a nonpositive total")
    q_minus = z.q_minus
    denom = min(z.row_high, z.col_high) - q_minus
    if denom == 0:
        raise DegenerateDenominator(z.row_high, z.col_high, total, cut)
    value = (z.n_hh - q_minus) / denom
    status = CutStatus.NEGATIVE_ASSORTATIVITY if z.n_hh < q_minus else CutStatus.OK
    return value, status


def theta_exact(z: TwoByTwoDecomposed, cut=None) -> Fraction:
    """The Liu-Lu value as an exact rational of the (binary-exact) cell values."""
    n_hh = _as_fraction(z.n_hh)
    rh = _as_fraction(z.n_hl) + n_hh
    ch = _as_fraction(z.n_lh) + n_hh
    total = rh + ch - n_hh + _as_fraction(z.n_ll)
    if not total > 0:
        raise ZeroTotal("Liu-Lu measure undefined for a nonpositive total")
    q_minus = floor_product_ratio(rh, ch, total)
    denom = min(rh, ch) - q_minus
    if denom == 0:
        raise DegenerateDenominator(float(rh), float(ch), float(total), cut)
    return (n_hh - q_minus) / denom


@dataclass(frozen=True, eq=False)
class LiuLuMatrix:
    """Per-cut Liu-Lu values; ``values[i-1, j-1]`` belongs to cut ``(i, j)``.

    Degenerate cuts hold ``nan``.
    """

    values: np.ndarray
    flags: tuple[tuple[CutStatus, ...], ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def ok_mask(self) -> np.ndarray:
        return np.array([[f is CutStatus.OK for f in row] for row in self.flags], dtype=bool)

    def degenerate_cuts(self) -> list[tuple[int, int]]:
        return [
            (i + 1, j + 1)
            for i, row in enumerate(self.flags)
            for j, f in enumerate(row)
            if f is CutStatus.DEGENERATE_DENOMINATOR
        ]


def ll_generalized(t) -> LiuLuMatrix:
    """Matrix-valued generalized Liu-Lu measure of an ``n x m`` table.

    Degenerate cuts are recorded in the flags rather than raised.
    """
    z = t.counts if isinstance(t, ContingencyTable) else np.asarray(t, dtype=float)
    n, m = z.shape
    if n < 2 or m < 2:
        raise CutOutOfRange("generalized Liu-Lu needs at least a 2x2 table")
    if not math.fsum(z.ravel()) > 0:
        raise ZeroTotal("Liu-Lu measure undefined for a nonpositive total")
    values = np.full((n - 1, m - 1), np.nan)
    flags = []
    for i in range(1, n):
        row = []
        for j in range(1, m):
            try:
                values[i - 1, j - 1], status = ll_simple(cut_aggregate(z, i, j), (i, j))
            except DegenerateDenominator:
                status = CutStatus.DEGENERATE_DENOMINATOR
            row.append(status)
        flags.append(tuple(row))
    values.setflags(write=False)
    return LiuLuMatrix(values, tuple(flags))
