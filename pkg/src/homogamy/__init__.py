"""Counterfactual decomposition of assortative mating on contingency tables."""

__version__ = "0.1.0"

from .decomp import (
    DecompositionReport,
    FactorGrid2,
    FactorGrid3,
    Interval,
    biewen2,
    biewen3,
    decompose_one_dim,
    decompose_two_dim,
)
from .errors import HomogamyError
from .gnm import (
    AllocationPoint,
    GnmProblem,
    MomentInterval,
    Objective,
    Order,
    assemble_counterfactual,
    enumerate_allocations,
    evaluate_allocation,
    gnm_interval,
    racial_step,
)
from .liulu import CutStatus, LiuLuMatrix, ll_generalized, ll_simple
from .nm import NMResult, TargetMarginals, nm_transform, nm_transform_convenience
from .tables import (
    ContingencyTable,
    CoupleRecord,
    RaceEduLayout,
    from_microdata,
    merge_categories,
    read_table_csv,
    sehc,
    sirm,
    write_table_csv,
)
