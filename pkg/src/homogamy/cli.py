"""Command-line front end.

Every command except ``ingest`` prints one JSON report::

    {"schema_version": "1", "command": ..., "inputs": {...}, "result": {...},
     "diagnostics": [...]}

Numbers are written in fixed point with 9 decimals and keys keep a fixed order,
so identical invocations give byte-identical output. Exit codes: 0 success,
2 parse or validation error, 3 degenerate cut, 4 no feasible point.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import __version__
from .decomp import DecompositionReport, decompose_one_dim, decompose_two_dim
from .errors import HomogamyError, ParseError
from .gnm import GnmProblem, MomentInterval, Objective, Order, gnm_interval
from .liulu import ll_generalized, ll_simple
from .nm import NMResult, TargetMarginals, nm_transform
from .tables import (
    ContingencyTable,
    RaceEduLayout,
    diagonal_share,
    from_microdata,
    off_diagonal_share,
    read_microdata_csv,
    read_table_csv,
    sehc,
    sirm,
    write_table_csv,
)

__all__ = ["main", "dumps", "build_parser"]

SCHEMA_VERSION = "1"
DECIMALS = 9

log = logging.getLogger("homogamy")


# --- serialization -----------------------------------------------------------


def _number(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = f"{x:.{DECIMALS}f}"
    return "0." + "0" * DECIMALS if s == "-0." + "0" * DECIMALS else s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with fixed-point floats and the mapping order preserved."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _number(float(obj))
    if isinstance(obj, Fraction):
        return json.dumps(f"{obj.numerator}/{obj.denominator}")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in seq) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _report(command: str, inputs: dict, result: dict, diagnostics: Sequence[str]) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "inputs": {k: {"path": v, "sha256": _sha256(v)} for k, v in inputs.items()},
        "result": result,
        "diagnostics": list(diagnostics),
    }


def _interval_dict(r: MomentInterval) -> dict:
    return {
        "min": r.min_value,
        "max": r.max_value,
        "exact_min": r.exact_min,
        "exact_max": r.exact_max,
        "argmin": r.argmin.to_dict(),
        "argmax": r.argmax.to_dict(),
        "n_feasible": r.n_feasible,
        "n_excluded_negative": r.n_excluded_negative,
        "observed_value": r.observed_value,
    }


def _table_dict(t: ContingencyTable) -> dict:
    return {"row_labels": list(t.row_labels), "col_labels": list(t.col_labels),
            "counts": [list(row) for row in t.counts]}


def _decomp_dict(rep: DecompositionReport) -> dict:
    def iv(v):
        return {"min": v.lo, "max": v.hi}

    out = {
        "total_change": rep.total_change,
        "conservative": rep.conservative,
        "effects": {k: iv(v) for k, v in rep.effects.items()},
        "interactions": {k: iv(v) for k, v in rep.interactions.items()},
    }
    if rep.residuum is not None:
        out["residuum"] = iv(rep.residuum)
    out["exact_sum_check"] = rep.exact_sum_check
    return out


# --- commands ----------------------------------------------------------------


def _read(path: str, observed: bool = True):
    return read_table_csv(path, observed=observed)


def _require_layout(layout: RaceEduLayout | None, path: str) -> RaceEduLayout:
    if layout is None:
        raise ParseError(f"{path}: a race x education table needs two label levels", 1)
    return layout


def cmd_measure(args) -> dict:
    t, layout = _read(args.table)
    result: dict = {}
    diagnostics = []
    if t.shape == (2, 2):
        value, status = ll_simple(t)
        result["ll_simple"] = {"value": value, "status": status.value}
    llm = ll_generalized(t)
    result["ll_generalized"] = [list(row) for row in llm.values]
    result["flags"] = [[f.value for f in row] for row in llm.flags]
    for (i, j) in llm.degenerate_cuts():
        diagnostics.append(f"cut ({i}, {j}) has a degenerate denominator")
    if layout is not None:
        result["sehc"] = sehc(t, layout)
        result["sirm"] = sirm(t, layout)
    return _report("measure", {"table": args.table}, result, diagnostics)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ParseError(f"not a comma-separated list of numbers: {text!r}") from None


def _nm_dict(res: NMResult) -> dict:
    return {
        "table": _table_dict(res.table),
        "negative_cells": [{"row": r, "col": c, "value": v} for r, c, v in res.negative_cells],
        "theta": [list(row) for row in res.theta],
    }


def cmd_nm(args) -> dict:
    source, _ = _read(args.source)
    inputs = {"source": args.source}
    if args.targets:
        target_table, _ = _read(args.targets)
        targets = TargetMarginals.of(target_table)
        inputs["targets"] = args.targets
    elif args.rows and args.cols:
        targets = TargetMarginals(_floats(args.rows), _floats(args.cols))
    else:
        raise ParseError("give a targets table or both --rows and --cols")
    res = nm_transform(source, targets, on_degenerate_target=args.on_degenerate)
    return _report("nm", inputs, _nm_dict(res), res.warnings)


def _problem(args, k_tr, k_ta, k_te, layout) -> GnmProblem:
    return GnmProblem(k_tr, k_ta, k_te, layout, Order(args.order), Objective(args.objective),
                      args.epsilon, block_source=args.block_source,
                      keep_negative=args.keep_negative)


def cmd_gnm(args) -> dict:
    (k_tr, lay), (k_ta, _), (k_te, _) = (_read(p) for p in (args.k_tr, args.k_ta, args.k_te))
    layout = _require_layout(lay, args.k_tr)
    p = _problem(args, k_tr, k_ta, k_te, layout)
    r = gnm_interval(p, jobs=args.jobs, mode=args.mode)
    diagnostics = []
    if r.n_excluded_negative:
        diagnostics.append(f"{r.n_excluded_negative} examined allocations excluded for negative cells")
    inputs = {"k_tr": args.k_tr, "k_ta": args.k_ta, "k_te": args.k_te}
    result = {"order": p.order.value, "objective": p.objective.value, "epsilon": p.epsilon,
              "interval": _interval_dict(r)}
    return _report("gnm", inputs, result, diagnostics)


def cmd_decompose(args) -> dict:
    (k0, lay), (k1, _) = _read(args.k0), _read(args.k1)
    inputs = {"k0": args.k0, "k1": args.k1}
    objective = Objective(args.objective)
    if args.mode == "one-dim":
        if lay is not None:
            moment = (lambda t: sehc(t, lay)) if objective is Objective.SEHC else (lambda t: sirm(t, lay))
        else:
            moment = diagonal_share if objective is Objective.SEHC else off_diagonal_share
        rep = decompose_one_dim(k0, k1, moment)
        result = {"mode": args.mode, "objective": objective.value, "decomposition": _decomp_dict(rep)}
        return _report("decompose", inputs, result, rep.warnings)
    layout = _require_layout(lay, args.k0)
    rep = decompose_two_dim(k0, k1, layout, objective, Order(args.order), args.epsilon,
                            jobs=args.jobs, block_source=args.block_source,
                            keep_negative=args.keep_negative)
    result = {
        "mode": args.mode,
        "objective": objective.value,
        "order": args.order,
        "decomposition": _decomp_dict(rep),
        "corners": {k: _interval_dict(v) for k, v in rep.corners.items()},
    }
    diagnostics = []
    if rep.conservative:
        diagnostics.append("component intervals are conservative (corners chosen independently)")
    return _report("decompose", inputs, result, diagnostics)


def _predicate_where(arg: str):
    col, sep, values = arg.partition("=")
    if not sep or not col:
        raise ParseError(f"--where expects COLUMN=VALUE[,VALUE...], got {arg!r}")
    allowed = {v.strip() for v in values.split(",")}
    col = col.strip()
    return lambda row: (row.get(col) or "").strip() in allowed


def _predicate_range(arg: str):
    col, sep, bounds = arg.partition("=")
    lo, sep2, hi = bounds.partition(":")
    if not sep or not sep2 or not col:
        raise ParseError(f"--range expects COLUMN=LO:HI, got {arg!r}")
    lo_v = float(lo) if lo.strip() else -math.inf
    hi_v = float(hi) if hi.strip() else math.inf
    col = col.strip()

    def pred(row):
        try:
            return lo_v <= float(row.get(col, "")) <= hi_v
        except ValueError:
            return False

    return pred


def _labels(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def cmd_ingest(args) -> str:
    preds = [_predicate_where(s) for s in args.where] + [_predicate_range(s) for s in args.range]
    records = read_microdata_csv(args.microdata, preds)
    edu = _labels(args.edu)
    layout = RaceEduLayout(
        _labels(args.races), edu,
        _labels(args.male_edu) if args.male_edu else None,
        _labels(args.female_edu) if args.female_edu else None,
    )
    t = from_microdata(records, layout)
    log.info("ingested %d records into a %dx%d table", len(records), *t.shape)
    return write_table_csv(t, layout)


# --- parser ------------------------------------------------------------------


def _add_gnm_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--order", choices=[o.value for o in Order], default=Order.RACE_FIRST.value)
    p.add_argument("--epsilon", type=float, default=1e-9,
                   help="cells below -epsilon make an allocation infeasible")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the search")
    p.add_argument("--block-source", choices=["te", "tr"], default="te",
                   help="education-preference source of race-first blocks")
    p.add_argument("--keep-negative", action="store_true",
                   help="keep allocations with negative cells (diagnostic)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homogamy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("measure", help="Liu-Lu measures and moments of a table")
    p.add_argument("table")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("nm", help="NM counterfactual transform")
    p.add_argument("source")
    p.add_argument("targets", nargs="?", help="table whose marginals are the targets")
    p.add_argument("--rows", help="comma-separated row targets")
    p.add_argument("--cols", help="comma-separated column targets")
    p.add_argument("--on-degenerate", choices=["raise", "force"], default="raise")
    p.set_defaults(func=cmd_nm)

    p = sub.add_parser("gnm", help="objective interval of a two-trait counterfactual")
    p.add_argument("k_tr", help="race-preference table")
    p.add_argument("k_ta", help="availability table")
    p.add_argument("k_te", help="education-preference table")
    p.add_argument("--objective", choices=[o.value for o in Objective], default="sehc")
    p.add_argument("--mode", choices=["search", "observed"], default="search")
    _add_gnm_options(p)
    p.set_defaults(func=cmd_gnm)

    p = sub.add_parser("decompose", help="decompose the change between two tables")
    p.add_argument("k0")
    p.add_argument("k1")
    p.add_argument("--mode", choices=["one-dim", "two-dim"], default="one-dim")
    p.add_argument("--objective", choices=[o.value for o in Objective], default="sehc")
    _add_gnm_options(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("ingest", help="cross-tabulate couple microdata into a table CSV")
    p.add_argument("microdata")
    p.add_argument("--races", default="B,W")
    p.add_argument("--edu", default="L,M,H")
    p.add_argument("--male-edu")
    p.add_argument("--female-edu")
    p.add_argument("--where", action="append", default=[], metavar="COL=V1[,V2]")
    p.add_argument("--range", action="append", default=[], metavar="COL=LO:HI")
    p.add_argument("-o", "--output", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("HOMOGAMY_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except HomogamyError as exc:
        print(f"homogamy {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"homogamy {args.command}: {exc}", file=sys.stderr)
        return 2
    if isinstance(out, str):
        if getattr(args, "output", None):
            with open(args.output, "w", newline="") as fh:
                fh.write(out)
        else:
            sys.stdout.write(out)
    else:
        sys.stdout.write(dumps(out) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
