"""Transfer evaluation: victim oracles, success matrices, sweeps, reports and desk-scale model zoos."""

from .matrix import curve_summary, run_matrix, seeded_matrix, sweep_alpha
from .oracle import VictimOracle, derive_targets, targeted_success, untargeted_success
from .report import CSV_COLUMNS, WHITEBOX, Cell, TransferReport, emit_plots, emit_report
from .zoo import DeskSetup, FaceSetup, ModelSpec, Zoo

__all__ = [
    "CSV_COLUMNS",
    "Cell",
    "DeskSetup",
    "FaceSetup",
    "ModelSpec",
    "TransferReport",
    "VictimOracle",
    "WHITEBOX",
    "Zoo",
    "curve_summary",
    "derive_targets",
    "emit_plots",
    "emit_report",
    "run_matrix",
    "seeded_matrix",
    "sweep_alpha",
    "targeted_success",
    "untargeted_success",
]
