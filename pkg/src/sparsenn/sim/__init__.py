"""Cycle-level simulator and energy model."""

from .engine import Simulator, SimulationDeadlock, run_network
from .report import (
    COMPARISON_CSV_HEADER,
    EVENT_FIELDS,
    PHASE_CSV_HEADER,
    EnergyConfig,
    EnergyResult,
    Events,
    LayerReport,
    PhaseResult,
    SimReport,
    comparison_rows,
    energy_of,
    energy_report,
    event_energy_pj,
    layer_energy,
    merge_reports,
    phase_rows,
    write_csv,
)

__all__ = [
    "Simulator", "SimulationDeadlock", "run_network", "COMPARISON_CSV_HEADER", "EVENT_FIELDS",
    "PHASE_CSV_HEADER", "EnergyConfig", "EnergyResult", "Events", "LayerReport", "PhaseResult",
    "SimReport", "comparison_rows", "energy_of", "energy_report", "event_energy_pj",
    "layer_energy", "merge_reports", "phase_rows", "write_csv",
]
