"""Simulation results, event counters and the event-based energy model."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np

EVENT_FIELDS = ("w_mem_reads", "u_mem_reads", "v_mem_reads", "macs",
                "regfile_ops", "router_hops", "queue_ops", "saturations")


@dataclass
class Events:
    w_mem_reads: int = 0
    u_mem_reads: int = 0
    v_mem_reads: int = 0
    macs: int = 0
    regfile_ops: int = 0
    router_hops: int = 0
    queue_ops: int = 0
    saturations: int = 0

    @property
    def uv_mem_reads(self) -> int:
        return self.u_mem_reads + self.v_mem_reads

    def __iadd__(self, other: Events) -> Events:
        for f in EVENT_FIELDS:
            setattr(self, f, getattr(self, f) + getattr(other, f))
        return self


@dataclass
class PhaseResult:
    phase: str                      # "V", "U" or "W"
    cycles: int
    busy: List[int]                 # MAC-issue cycles per PE
    delivered: int                  # packets delivered to PEs
    events: Events = field(default_factory=Events)
    outputs: Optional[np.ndarray] = None

    @property
    def utilization(self) -> float:
        if self.cycles == 0 or not self.busy:
            return 0.0
        return float(np.mean(self.busy)) / self.cycles

    def to_dict(self) -> dict:
        d = {"phase": self.phase, "cycles": self.cycles, "utilization": self.utilization,
             "delivered": self.delivered, "busy": list(self.busy)}
        d.update(asdict(self.events))
        return d


@dataclass
class LayerReport:
    layer: int
    phases: Dict[str, PhaseResult]
    outputs: np.ndarray
    mask: Optional[np.ndarray] = None
    popcount: Optional[float] = None   # mean over samples once merged

    def __post_init__(self):
        if self.popcount is None and self.mask is not None:
            self.popcount = int(np.count_nonzero(self.mask))

    @property
    def cycles(self) -> int:
        return sum(p.cycles for p in self.phases.values())

    @property
    def events(self) -> Events:
        total = Events()
        for p in self.phases.values():
            total += p.events
        return total


@dataclass
class SimReport:
    mode: str
    layers: List[LayerReport] = field(default_factory=list)
    clock_period_ns: float = 2.0

    @property
    def total_cycles(self) -> int:
        return sum(l.cycles for l in self.layers)

    @property
    def outputs(self) -> List[np.ndarray]:
        return [l.outputs for l in self.layers]

    @property
    def events(self) -> Events:
        total = Events()
        for l in self.layers:
            total += l.events
        return total

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "total_cycles": self.total_cycles,
            "clock_period_ns": self.clock_period_ns,
            "layers": [{
                "layer": l.layer,
                "cycles": l.cycles,
                "popcount": l.popcount,
                "phases": [p.to_dict() for p in l.phases.values()],
            } for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class EnergyConfig:
    """Energy per event in pJ. Defaults are illustrative, not measured."""

    w_mem_read: float = 20.0
    u_mem_read: float = 2.5
    v_mem_read: float = 2.5
    mac: float = 1.0
    regfile_op: float = 0.2
    router_hop: float = 0.5
    queue_op: float = 0.2
    clock_period_ns: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.clock_period_ns <= 0:
            raise ValueError("clock_period_ns must be positive")


@dataclass
class EnergyResult:
    energy_uj: float
    power_mw: float
    cycles: int


def event_energy_pj(ev: Events, cfg: EnergyConfig) -> float:
    return (ev.w_mem_reads * cfg.w_mem_read + ev.u_mem_reads * cfg.u_mem_read
            + ev.v_mem_reads * cfg.v_mem_read + ev.macs * cfg.mac
            + ev.regfile_ops * cfg.regfile_op + ev.router_hops * cfg.router_hop
            + ev.queue_ops * cfg.queue_op)


def energy_of(ev: Events, cycles: int, cfg: EnergyConfig) -> EnergyResult:
    pj = event_energy_pj(ev, cfg)
    # pJ per ns is mW
    power = pj / (cycles * cfg.clock_period_ns) if cycles else 0.0
    return EnergyResult(pj * 1e-6, power, cycles)


def energy_report(report: SimReport, cfg: EnergyConfig) -> EnergyResult:
    """Total energy (uJ) and average power (mW) of a whole run."""
    return energy_of(report.events, report.total_cycles, cfg)


def layer_energy(layer: LayerReport, cfg: EnergyConfig) -> EnergyResult:
    return energy_of(layer.events, layer.cycles, cfg)


def merge_reports(reports: List[SimReport]) -> SimReport:
    """Sum cycles, busy counts and events of same-shaped runs (one per input sample)."""
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    merged = SimReport(first.mode, clock_period_ns=first.clock_period_ns)
    for l, layer in enumerate(first.layers):
        group = [r.layers[l] for r in reports]
        phases = {}
        for name in layer.phases:
            parts = [g.phases[name] for g in group]
            ev = Events()
            for p in parts:
                ev += p.events
            busy = np.sum([p.busy for p in parts], axis=0).tolist()
            phases[name] = PhaseResult(name, sum(p.cycles for p in parts), busy,
                                       sum(p.delivered for p in parts), ev)
        counts = [g.popcount for g in group]
        pc = None if counts[0] is None else float(np.mean(counts))
        merged.layers.append(LayerReport(layer.layer, phases, group[-1].outputs, None, pc))
    return merged


PHASE_CSV_HEADER = ["layer", "phase", "mode", "cycles", "utilization", *EVENT_FIELDS,
                    "energy_uj", "power_mw"]

COMPARISON_CSV_HEADER = ["layer", "uv_off_cycles", "uv_on_cycles", "cycle_reduction",
                         "uv_off_energy_uj", "uv_on_energy_uj", "uv_off_power_mw",
                         "uv_on_power_mw", "power_ratio", "popcount", "rows"]


def phase_rows(report: SimReport, cfg: Optional[EnergyConfig] = None) -> List[list]:
    rows = []
    for l in report.layers:
        for p in l.phases.values():
            e = energy_of(p.events, p.cycles, cfg) if cfg else None
            rows.append([l.layer, p.phase, report.mode, p.cycles, round(p.utilization, 6),
                         *(getattr(p.events, f) for f in EVENT_FIELDS),
                         "" if e is None else round(e.energy_uj, 9),
                         "" if e is None else round(e.power_mw, 6)])
    return rows


def comparison_rows(off: SimReport, on: SimReport, cfg: EnergyConfig) -> List[list]:
    rows = []
    for lo, ln in zip(off.layers, on.layers):
        eo, en = layer_energy(lo, cfg), layer_energy(ln, cfg)
        rows.append([
            lo.layer, lo.cycles, ln.cycles, round(1.0 - ln.cycles / lo.cycles, 6),
            round(eo.energy_uj, 9), round(en.energy_uj, 9),
            round(eo.power_mw, 6), round(en.power_mw, 6),
            round(en.power_mw / eo.power_mw, 6) if eo.power_mw else "",
            "" if ln.popcount is None else ln.popcount,
            len(ln.outputs),
        ])
    return rows


def write_csv(path, header: List[str], rows: List[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
