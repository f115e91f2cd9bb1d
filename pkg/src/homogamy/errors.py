"""Exception hierarchy shared by every module of the package."""


class HomogamyError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class UnknownLabel(HomogamyError):
    pass


class NegativeWeight(HomogamyError):
    pass


class ZeroTotal(HomogamyError):
    pass


class NonContiguousGroup(HomogamyError):
    pass


class DimensionMismatch(HomogamyError):
    pass


class ParseError(HomogamyError):
    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.line = line
        self.column = column


class CutOutOfRange(HomogamyError):
    pass


class DegenerateDenominator(HomogamyError):
    """min(N_H., N_.H) equals the floored random-matching count at a cut."""

    exit_code = 3

    def __init__(self, row_high, col_high, total, cut=None):
        self.row_high = row_high
        self.col_high = col_high
        self.total = total
        self.cut = cut
        at = f" at cut {cut}" if cut is not None else ""
        super().__init__(
            f"degenerate Liu-Lu denominator{at}: N_H.={row_high!r}, "
            f"N_.H={col_high!r}, N_..={total!r}"
        )


class DegenerateSourceCut(DegenerateDenominator):
    pass


class DegenerateTargetCut(DegenerateDenominator):
    pass


class InvalidTargets(HomogamyError):
    pass


class InfeasibleBlockTotals(HomogamyError):
    exit_code = 4


class NoFeasiblePoint(HomogamyError):
    exit_code = 4


class LatticeTooLarge(HomogamyError):
    pass
