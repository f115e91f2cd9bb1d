"""Brute-force verifiers for the transform and the allocation search.

Everything here is recomputed from scratch in rational arithmetic with plain
loops. Only the table container and the problem/result records are shared
with the engine, so an engine bug cannot confirm itself.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateSourceCut, HomogamyError, LatticeTooLarge, NoFeasiblePoint
from .gnm import AllocationPoint, GnmProblem, MomentInterval, Order
from .tables import ContingencyTable

__all__ = ["NMVerification", "verify_nm", "ll_direct", "enumerate_gnm", "MAX_POINTS"]

MAX_POINTS = 10**6


def _q(x) -> Fraction:
    return Fraction(float(x)) if not isinstance(x, (int, Fraction)) else Fraction(x)


SNAP = 1e-11


def _floor(q: Fraction) -> int:
    # floats within SNAP (relative) below an integer count as the integer
    f = math.floor(q)
    if q != f and (f + 1 - q) <= SNAP * max(1, f + 1):
        return f + 1
    return f


def ll_direct(ll, lh, hl, hh) -> Fraction:
    """The simplified Liu-Lu formula evaluated literally, as a rational."""
    ll, lh, hl, hh = (_q(v) for v in (ll, lh, hl, hh))
    total = ll + lh + hl + hh
    row_h, col_h = hl + hh, lh + hh
    q_minus = _floor(row_h * col_h / total)
    denom = min(row_h, col_h) - q_minus
    if denom == 0:
        raise ZeroDivisionError("degenerate Liu-Lu denominator")
    return (hh - q_minus) / denom


def _collapse(z, i, j):
    n, m = len(z), len(z[0])
    blocks = [[Fraction(0), Fraction(0)], [Fraction(0), Fraction(0)]]
    for r in range(n):
        for c in range(m):
            blocks[int(r >= i)][int(c >= j)] += z[r][c]
    return blocks[0][0], blocks[0][1], blocks[1][0], blocks[1][1]


def _thetas(z):
    n, m = len(z), len(z[0])
    out = {}
    for i in range(1, n):
        for j in range(1, m):
            try:
                out[i, j] = ll_direct(*_collapse(z, i, j))
            except ZeroDivisionError:
                out[i, j] = None
    return out


@dataclass(frozen=True)
class NMVerification:
    max_row_deviation: float
    max_col_deviation: float
    max_ll_deviation: float
    n_checked_cuts: int

    @property
    def max_marginal_deviation(self) -> float:
        return max(self.max_row_deviation, self.max_col_deviation)

    def ok(self, tol: float = 1e-9) -> bool:
        return self.max_marginal_deviation <= tol and self.max_ll_deviation <= tol


def verify_nm(source, row_targets, col_targets, candidate) -> NMVerification:
    """Deviation of ``candidate`` from the target marginals and from the source's
    per-cut Liu-Lu values (cuts degenerate in either table are skipped)."""
    src = _matrix(source)
    cand = _matrix(candidate)
    rows = [_q(v) for v in row_targets]
    cols = [_q(v) for v in col_targets]
    n, m = len(cand), len(cand[0])
    dev_r = max(abs(sum(cand[r]) - rows[r]) for r in range(n))
    dev_c = max(abs(sum(cand[r][c] for r in range(n)) - cols[c]) for c in range(m))
    ts, tc = _thetas(src), _thetas(cand)
    dev_ll, checked = Fraction(0), 0
    for cut, value in ts.items():
        if value is None or tc[cut] is None:
            continue
        dev_ll = max(dev_ll, abs(value - tc[cut]))
        checked += 1
    return NMVerification(float(dev_r), float(dev_c), float(dev_ll), checked)


def _matrix(t):
    if isinstance(t, ContingencyTable):
        t = t.counts
    return [[_q(v) for v in row] for row in (t.tolist() if isinstance(t, np.ndarray) else t)]


# --- allocation enumeration ---------------------------------------------------


def _source_thetas(source):
    theta = _thetas(source)
    for cut, value in theta.items():
        if value is None:
            raise DegenerateSourceCut(0.0, 0.0, 0.0, cut)
    return theta


def _transform(source, rows, cols, theta=None):
    """Rational NM transform; corner sums inverted cut by cut."""
    n, m = len(rows), len(cols)
    total = sum(rows)
    if total == 0:
        return [[Fraction(0)] * m for _ in range(n)]
    if theta is None:
        theta = _source_thetas(source)

    def corner(r, c):  # couples with row index >= r and column index >= c (0-based)
        if r >= n or c >= m:
            return Fraction(0)
        rt, ct = sum(rows[r:]), sum(cols[c:])
        if r == 0:
            return ct
        if c == 0:
            return rt
        q_minus = math.floor(rt * ct / total) if total else 0
        return q_minus + theta[r, c] * (min(rt, ct) - q_minus)

    return [[corner(r, c) - corner(r + 1, c) - corner(r, c + 1) + corner(r + 1, c + 1)
             for c in range(m)] for r in range(n)]


def _round(z):
    """Margin-preserving rounding by exhaustive search over floor/ceil patterns."""
    n, m = len(z), len(z[0])
    frac_cells = [(r, c) for r in range(n) for c in range(m) if z[r][c].denominator != 1]
    rows = [sum(z[r]) for r in range(n)]
    cols = [sum(z[r][c] for r in range(n)) for c in range(m)]
    best, best_score = None, None
    for pattern in itertools.product((0, 1), repeat=len(frac_cells)):
        out = [[math.floor(v) for v in row] for row in z]
        score = Fraction(0)
        for (r, c), up in zip(frac_cells, pattern):
            if up:
                out[r][c] += 1
                score += z[r][c] - math.floor(z[r][c])
        if any(sum(out[r]) != rows[r] for r in range(n)):
            continue
        if any(sum(out[r][c] for r in range(n)) != cols[c] for c in range(m)):
            continue
        if best_score is None or score > best_score:
            best, best_score = out, score
    if best is None:
        raise HomogamyError("no margin-preserving rounding")
    return best


def _vectors(total, caps):
    out = []
    for head in itertools.product(*(range(c + 1) for c in caps[:-1])):
        last = total - sum(head)
        if 0 <= last <= caps[-1]:
            out.append(tuple(head) + (last,))
    return out


def _ints(values):
    out = []
    for v in values:
        f = _q(v)
        if f.denominator != 1:
            raise HomogamyError("availability must be integral")
        out.append(int(f))
    return out


class _Instance:
    def __init__(self, p: GnmProblem):
        lay = p.layout
        self.p = p
        self.n, self.m = lay.n_edu_male, lay.n_edu_female
        self.tr = _matrix(p.K_tr)
        self.ta = _matrix(p.K_ta)
        self.te = _matrix(p.K_te)
        n, m = self.n, self.m
        self.rows = _ints(sum(self.ta[r]) for r in range(2 * n))
        self.cols = _ints(sum(self.ta[r][c] for r in range(2 * n)) for c in range(2 * m))
        self.homog = [[lay.male_edu_labels[k] == lay.female_edu_labels[l] for l in range(m)]
                      for k in range(n)]

    def moment(self, table) -> Fraction:
        n, m = self.n, self.m
        total = sum(sum(row) for row in table)
        if self.p.objective.value == "sehc":
            num = sum(table[r][c] for r in range(2 * n) for c in range(2 * m)
                      if self.homog[r % n][c % m])
        else:
            num = sum(table[r][c] for r in range(2 * n) for c in range(2 * m)
                      if (r < n) != (c < m))
        return num / total

    # race first

    def race_first(self):
        n, m = self.n, self.m

        def racial(t):
            return [[sum(t[r][c] for r in range(i * n, (i + 1) * n)
                         for c in range(j * m, (j + 1) * m)) for j in (0, 1)] for i in (0, 1)]

        za = racial(self.ta)
        z = _round(_transform(racial(self.tr),
                              [za[0][0] + za[0][1], za[1][0] + za[1][1]],
                              [za[0][0] + za[1][0], za[0][1] + za[1][1]]))
        if any(v < 0 for row in z for v in row):
            raise NoFeasiblePoint("negative racial table")
        a_b, a_w = self.rows[:n], self.rows[n:]
        f_b, f_w = self.cols[:m], self.cols[m:]
        groups = [_vectors(z[0][1], a_b), _vectors(z[1][0], a_w),
                  _vectors(z[1][0], f_b), _vectors(z[0][1], f_w)]
        src = self.te if self.p.block_source == "te" else self.tr

        def sub(i, j):
            return [row[j * m:(j + 1) * m] for row in src[i * n:(i + 1) * n]]

        totals = {(0, 0): sum(a_b) - z[0][1], (0, 1): z[0][1], (1, 0): z[1][0],
                  (1, 1): sum(a_w) - z[1][0]}
        thetas = {k: _source_thetas(sub(*k)) if totals[k] else None for k in totals}
        cache = {}

        def block(i, j, rows, cols):
            key = (i, j, tuple(rows), tuple(cols))
            if key not in cache:
                cache[key] = _transform(None, [Fraction(v) for v in rows],
                                        [Fraction(v) for v in cols], thetas[i, j])
            return cache[key]

        def build(mb, mw, fb, fw):
            blocks = {
                (0, 0): ([a - x for a, x in zip(a_b, mb)], [f - y for f, y in zip(f_b, fb)]),
                (0, 1): (list(mb), list(fw)),
                (1, 0): (list(mw), list(fb)),
                (1, 1): ([a - x for a, x in zip(a_w, mw)], [f - y for f, y in zip(f_w, fw)]),
            }
            table = [[Fraction(0)] * (2 * m) for _ in range(2 * n)]
            for (i, j), (rows, cols) in blocks.items():
                cells = block(i, j, rows, cols)
                for k in range(n):
                    for l in range(m):
                        table[i * n + k][j * m + l] = cells[k][l]
            return table

        return groups, 2, build

    # education first

    def edu_first(self):
        n, m = self.n, self.m

        def edu(t):
            return [[t[k][l] + t[k][m + l] + t[n + k][l] + t[n + k][m + l] for l in range(m)]
                    for k in range(n)]

        ea = edu(self.ta)
        e = _round(_transform(edu(self.te), [sum(r) for r in ea],
                              [sum(ea[k][l] for k in range(n)) for l in range(m)]))
        if any(v < 0 for row in e for v in row):
            raise NoFeasiblePoint("negative education table")
        a_b, f_b = self.rows[:n], self.cols[:m]
        groups = [_vectors(a_b[k], [e[k][l] for l in range(m)]) for k in range(n)]
        groups += [_vectors(f_b[l], [e[k][l] for k in range(n)]) for l in range(m)]

        sources = {(k, l): [[self.tr[k][l], self.tr[k][m + l]],
                            [self.tr[n + k][l], self.tr[n + k][m + l]]]
                   for k in range(n) for l in range(m)}
        thetas = {}
        cache = {}

        def block(k, l, x, y):
            key = (k, l, x, y)
            if key not in cache:
                if (k, l) not in thetas and e[k][l]:
                    thetas[k, l] = _source_thetas(sources[k, l])
                t = e[k][l]
                cache[key] = _transform(None, [Fraction(x), Fraction(t - x)],
                                        [Fraction(y), Fraction(t - y)], thetas.get((k, l)))
            return cache[key]

        def build(*vecs):
            xs, ys = vecs[:n], vecs[n:]
            table = [[Fraction(0)] * (2 * m) for _ in range(2 * n)]
            for k in range(n):
                for l in range(m):
                    cells = block(k, l, xs[k][l], ys[l][k])
                    for i, r in enumerate((k, n + k)):
                        for j, c in enumerate((l, m + l)):
                            table[r][c] = cells[i][j]
            return table

        return groups, n, build


def _scan(p: GnmProblem, order: Order):
    inst = _Instance(p)
    groups, n_male, build = inst.race_first() if order is Order.RACE_FIRST else inst.edu_first()
    size = 1
    for g in groups:
        size *= len(g)
    if size > MAX_POINTS:
        raise LatticeTooLarge(f"{size} allocations exceed the oracle limit of {MAX_POINTS}")
    eps = Fraction(p.epsilon)
    lo = hi = None
    n_ok = n_bad = 0
    for combo in itertools.product(*groups):
        table = build(*combo)
        if not p.keep_negative and any(v < -eps for row in table for v in row):
            n_bad += 1
            continue
        n_ok += 1
        value = inst.moment(table)
        key = tuple(v for vec in combo for v in vec[:-1])
        if lo is None or (value, key) < (lo[0], lo[1]):
            lo = (value, key, combo)
        if hi is None or value > hi[0] or (value == hi[0] and key < hi[1]):
            hi = (value, key, combo)
    if lo is None:
        raise NoFeasiblePoint("no feasible allocation")

    def point(combo):
        return AllocationPoint(order, tuple(combo[:n_male]), tuple(combo[n_male:]))

    return MomentInterval(float(lo[0]), float(hi[0]), point(lo[2]), point(hi[2]),
                          n_ok, n_bad, lo[0], hi[0])


def enumerate_gnm(p: GnmProblem) -> MomentInterval:
    """Exact objective range by visiting every allocation (at most ``MAX_POINTS``)."""
    if p.order is not Order.BOTH:
        return _scan(p, p.order)
    a, b = _scan(p, Order.RACE_FIRST), _scan(p, Order.EDU_FIRST)
    lo = a if a.exact_min <= b.exact_min else b
    hi = a if a.exact_max >= b.exact_max else b
    return MomentInterval(lo.min_value, hi.max_value, lo.argmin, hi.argmax,
                          a.n_feasible + b.n_feasible,
                          a.n_excluded_negative + b.n_excluded_negative,
                          lo.exact_min, hi.exact_max)
