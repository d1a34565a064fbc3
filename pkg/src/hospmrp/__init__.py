"""Multilevel regression and poststratification of hospital test data.

Estimates weekly community infection prevalence from routine pre-procedure
PCR tests, correcting for imperfect test sensitivity and specificity.
"""

__version__ = "0.1.0"

from .cells import ALL_CELLS, Demographics
from .model import (
    CalibrationData,
    CellWeekCounts,
    HierarchicalModel,
    ParameterDraw,
    PoststratTable,
    TestRecord,
    analytic_incidence,
    linear_predictor,
    log_posterior,
    true_incidence,
)
from .poststrat import PrevalenceSeries, describe, poststratify, raw_weekly_positivity
from .sampler import PosteriorDraws, SamplerConfig, diagnostics, sample

__all__ = [
    "ALL_CELLS",
    "CalibrationData",
    "CellWeekCounts",
    "Demographics",
    "HierarchicalModel",
    "ParameterDraw",
    "PosteriorDraws",
    "PoststratTable",
    "PrevalenceSeries",
    "SamplerConfig",
    "TestRecord",
    "analytic_incidence",
    "describe",
    "diagnostics",
    "linear_predictor",
    "log_posterior",
    "poststratify",
    "raw_weekly_positivity",
    "sample",
    "true_incidence",
]
