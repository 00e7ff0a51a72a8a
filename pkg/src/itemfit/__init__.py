"""Parsimonious multinomial logit fitting with automatically chosen response curves.

Modules: :mod:`model` (types and file formats), :mod:`curves`,
:mod:`likelihood`, :mod:`optimizer`, :mod:`fitter`, :mod:`projection`,
:mod:`data` and :mod:`cli`.
"""

from . import errors
from .errors import *  # noqa: F401,F403
from .model import (
    Criterion,
    CurveFamily,
    CurveSpec,
    FitConfig,
    FitReport,
    ItemModel,
    ObservationGrid,
    RegressorKind,
    RegressorMeta,
    ReportEntry,
    StateCoefficients,
    StatusSpace,
    TerminalReason,
    load_model,
    save_model,
    validate_grid,
)

__version__ = "0.1.0"

__all__ = [
    "Criterion",
    "CurveFamily",
    "CurveSpec",
    "FitConfig",
    "FitReport",
    "ItemModel",
    "ObservationGrid",
    "RegressorKind",
    "RegressorMeta",
    "ReportEntry",
    "StateCoefficients",
    "StatusSpace",
    "TerminalReason",
    "load_model",
    "save_model",
    "validate_grid",
    *[name for name in dir(errors) if name[0].isupper()],
]
