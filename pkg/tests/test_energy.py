"""Event-based energy model, report merging and CSV schemas."""

from __future__ import annotations

import csv
from dataclasses import fields

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsenn.sim import (
    COMPARISON_CSV_HEADER,
    PHASE_CSV_HEADER,
    EnergyConfig,
    Events,
    LayerReport,
    PhaseResult,
    SimReport,
    comparison_rows,
    energy_of,
    energy_report,
    merge_reports,
    phase_rows,
    write_csv,
)

ENERGY_KEYS = [f.name for f in fields(EnergyConfig) if f.name != "clock_period_ns"]


def make_report(mode="uv_off", cycles=100, reads=50, mask=None):
    ev = Events(w_mem_reads=reads, macs=reads, regfile_ops=7, router_hops=3, queue_ops=11)
    w = PhaseResult("W", cycles, [reads // 4] * 4, 5, ev, np.zeros(8, dtype=np.int64))
    return SimReport(mode, [LayerReport(0, {"W": w}, np.zeros(8, dtype=np.int64), mask)])


def test_zero_energy_config_gives_zero():
    cfg = EnergyConfig(**{k: 0.0 for k in ENERGY_KEYS})
    res = energy_report(make_report(), cfg)
    assert res.energy_uj == 0.0 and res.power_mw == 0.0


def test_energy_hand_value():
    cfg = EnergyConfig(w_mem_read=2.0, u_mem_read=0, v_mem_read=0, mac=1.0, regfile_op=0.5,
                       router_hop=1.0, queue_op=0.0, clock_period_ns=4.0)
    # 50*2 + 50*1 + 7*0.5 + 3*1 = 156.5 pJ over 100 cycles of 4 ns
    res = energy_report(make_report(), cfg)
    assert res.energy_uj == pytest.approx(156.5e-6)
    assert res.power_mw == pytest.approx(156.5 / 400.0)
    assert res.cycles == 100


@given(st.lists(st.floats(0, 100), min_size=len(ENERGY_KEYS), max_size=len(ENERGY_KEYS)),
       st.floats(0.1, 10))
def test_energy_is_linear_in_event_costs(costs, scale):
    cfg = EnergyConfig(**dict(zip(ENERGY_KEYS, costs)))
    cfg2 = EnergyConfig(**{k: c * scale for k, c in zip(ENERGY_KEYS, costs)})
    rep = make_report()
    assert energy_report(rep, cfg2).energy_uj == pytest.approx(scale * energy_report(rep, cfg).energy_uj,
                                                               rel=1e-12, abs=1e-18)


def test_zero_cycles_has_zero_power():
    assert energy_of(Events(macs=3), 0, EnergyConfig()).power_mw == 0.0


def test_energy_config_rejects_negatives():
    with pytest.raises(ValueError):
        EnergyConfig(mac=-1.0)
    with pytest.raises(ValueError):
        EnergyConfig(clock_period_ns=0.0)


def test_merge_sums_counters():
    a = make_report(cycles=100, reads=40, mask=np.array([1, 0, 1, 0, 0, 0, 0, 0], bool))
    b = make_report(cycles=60, reads=20, mask=np.array([1, 1, 1, 1, 0, 0, 0, 0], bool))
    m = merge_reports([a, b])
    w = m.layers[0].phases["W"]
    assert w.cycles == 160 and w.events.w_mem_reads == 60 and w.busy == [15] * 4
    assert m.layers[0].popcount == 3.0
    assert m.total_cycles == a.total_cycles + b.total_cycles
    with pytest.raises(ValueError):
        merge_reports([])


def test_csv_headers_are_pinned(tmp_path):
    assert PHASE_CSV_HEADER == [
        "layer", "phase", "mode", "cycles", "utilization", "w_mem_reads", "u_mem_reads",
        "v_mem_reads", "macs", "regfile_ops", "router_hops", "queue_ops", "saturations",
        "energy_uj", "power_mw"]
    assert COMPARISON_CSV_HEADER == [
        "layer", "uv_off_cycles", "uv_on_cycles", "cycle_reduction", "uv_off_energy_uj",
        "uv_on_energy_uj", "uv_off_power_mw", "uv_on_power_mw", "power_ratio", "popcount", "rows"]
    cfg = EnergyConfig()
    path = tmp_path / "phases.csv"
    write_csv(path, PHASE_CSV_HEADER, phase_rows(make_report(), cfg))
    rows = list(csv.reader(open(path)))
    assert rows[0] == PHASE_CSV_HEADER and len(rows) == 2
    assert all(len(r) == len(PHASE_CSV_HEADER) for r in rows)
    off = make_report(cycles=100, reads=40)
    on = make_report("uv_on", cycles=75, reads=20, mask=np.ones(8, bool))
    (row,) = comparison_rows(off, on, cfg)
    assert len(row) == len(COMPARISON_CSV_HEADER)
    assert row[3] == pytest.approx(0.25)
