"""Cycle-stepped simulation of V, U and W phases on the H-tree PE array.

Timing model
------------
* A packet entering a router input buffer at cycle ``t`` may be granted at
  ``t + D`` where ``D`` is the router pipeline depth (4, or 5 for the
  accumulating routers of the V phase). A grant moves it straight into the
  parent's buffer, so a buffer of ``D`` slots sustains one packet per cycle.
* Credits return in the same cycle a slot frees. Routers are stepped
  top-down, then downstream deliveries, then PEs, then PE injections, which
  makes the zero-latency credit return well defined.
* The root broadcasts one packet per cycle down a dedicated path, one cycle
  per level, into every PE's activation queue. It only does so when every
  queue has room for everything already in flight.
* A PE issues one MAC per cycle. A phase ends ``pe_pipeline_depth`` cycles
  after the last issue (drain).

Accumulation is exact integer arithmetic everywhere, so arrival order never
affects a functional result, only cycle counts.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..arch import (
    RADIX,
    ArchConfig,
    CapacityError,
    Packet,
    PacketKind,
    PEState,
    RouterState,
    build_tree,
    scan_nonzero,
    validate_capacity,
)
from ..model import Mode, QuantizedLayer, QuantizedNetwork
from ..numerics import QFormat, SaturationCounter, WideAccumulator, requantize, round_shift
from ..numerics import CODE_MAX, CODE_MIN
from .report import Events, LayerReport, PhaseResult, SimReport


class SimulationDeadlock(RuntimeError):
    pass


class Simulator:
    """Owns the PE array and router tree for one simulation run."""

    def __init__(self, arch: ArchConfig):
        self.arch = arch
        self.P = arch.num_pes
        self.levels, self.pes = build_tree(arch)
        self.root = self.levels[-1][0]
        self.routers_top_down: List[RouterState] = [r for lvl in reversed(self.levels) for r in lvl]
        self.down_routers = sum(len(lvl) for lvl in self.levels[:-1])
        self.width = 0  # number of valid activations in the source register files
        self._layer_id = 0

    # -- register files ----------------------------------------------------

    def load_input(self, codes: Sequence[int]) -> None:
        codes = [int(c) for c in codes]
        regs = self.arch.activation_regs_per_pe
        if len(codes) > regs * self.P:
            raise CapacityError("activation register file",
                                f"{len(codes)} activations exceed {regs} x {self.P}")
        for pe in self.pes:
            src = pe.src_regfile
            for s in range(regs):
                src[s] = 0
            for s, j in enumerate(range(pe.pe, len(codes), self.P)):
                src[s] = codes[j]
        self.width = len(codes)

    def gather(self, which: str = "src") -> np.ndarray:
        out = np.zeros(self.width, dtype=np.int64)
        for pe in self.pes:
            rf = pe.src_regfile if which == "src" else pe.dst_regfile
            for s, j in enumerate(range(pe.pe, self.width, self.P)):
                out[j] = rf[s]
        return out

    def local_nonzero(self, pe: PEState) -> List[tuple]:
        """``(global index, code)`` of local nonzero activations in LNZD scan order."""
        n_local = len(range(pe.pe, self.width, self.P))
        src = pe.src_regfile[:n_local]
        return [(pe.pe + s * self.P, src[s]) for s in scan_nonzero(src)]

    def _ordered(self, items: list, pe: int) -> list:
        order = self.arch.injection_order
        if order == "descending":
            return items[::-1]
        if order == "shuffled":
            rng = np.random.default_rng((self.arch.injection_seed, self._layer_id, pe))
            return [items[i] for i in rng.permutation(len(items))]
        return items

    # -- network plumbing ------------------------------------------------------

    def _reset_links(self) -> None:
        c = self.arch.credits_per_link
        for lvl in self.levels:
            for r in lvl:
                for b in r.bufs:
                    b.clear()
                r.up_credits = c
        for pe in self.pes:
            pe.up_credits = c

    def _check_credits(self) -> None:
        c = self.arch.credits_per_link
        for child in list(self.pes) + [r for lvl in self.levels[:-1] for r in lvl]:
            occ = len(child.parent.bufs[child.port_in_parent])
            if child.up_credits + occ != c or child.up_credits < 0:
                raise AssertionError(f"credit conservation violated on link into {child.parent.dump()}")

    def _deadlock(self, t: int, what: str) -> SimulationDeadlock:
        lines = [f"{what}: no completion after {t} cycles"]
        lines += [r.dump() for r in self.routers_top_down]
        lines += [f"PE{pe.pe}: queue={len(pe.act_queue)} up_credits={pe.up_credits}"
                  for pe in self.pes if pe.act_queue or pe.up_credits != self.arch.credits_per_link]
        return SimulationDeadlock("\n".join(lines))

    def _broadcast(self, inject: List[list], slots: Optional[List[list]], rows: Optional[List[list]],
                   acc: Optional[List[list]], ev: Events) -> tuple:
        """Inject packets, arbitrate them up the tree and broadcast them to every PE.

        With ``slots`` given, each PE consumes its queue at one packet per
        cycle at best and issues one MAC per active local slot,
        ``acc[p][s] += rows[p][s][index] * value``. Without it, delivered
        packets stay queued. Returns ``(cycles_to_last_event, busy, delivered)``.
        """
        arch = self.arch
        P, D, levels = self.P, arch.router_pipeline_depth, arch.tree_levels
        qdepth = arch.act_queue_depth
        prefer_high = arch.tie_break == "high_port"
        pes, root = self.pes, self.root
        routers = self.routers_top_down
        consume = slots is not None
        self._reset_links()

        pending = [deque(lst) for lst in inject]
        to_inject = sum(len(q) for q in pending)
        expected = to_inject
        down: deque = deque()
        delivered = 0
        busy = [0] * P
        cur: List[Optional[Packet]] = [None] * P
        pos = [0] * P
        done_total = 0
        last_event = -1
        hops = qops = rf = 0
        cap = arch.max_cycles or 20_000 + 40 * expected * (1 + max((len(s) for s in slots), default=0) if consume else 1)

        t = 0
        while True:
            for r in routers:
                bufs = r.bufs
                best = best_idx = None
                for k in range(RADIX):
                    b = bufs[k]
                    if b and b[0][0] <= t:
                        idx = b[0][1].index
                        if best is None or idx < best_idx or (prefer_high and idx == best_idx):
                            best, best_idx = k, idx
                if best is None:
                    continue
                if r is root:
                    if max(len(pe.act_queue) for pe in pes) + len(down) >= qdepth:
                        continue
                elif r.up_credits == 0:
                    continue
                pkt = bufs[best].popleft()[1]
                r.children[best].up_credits += 1
                hops += 1
                if r is root:
                    down.append((t + levels, pkt))
                    hops += self.down_routers
                else:
                    r.parent.bufs[r.port_in_parent].append((t + D, pkt))
                    r.up_credits -= 1

            while down and down[0][0] <= t:
                pkt = down.popleft()[1]
                for pe in pes:
                    pe.act_queue.append(pkt)
                qops += P
                delivered += 1
                if not consume:
                    last_event = t

            if consume:
                for p in range(P):
                    pkt = cur[p]
                    if pkt is None:
                        q = pes[p].act_queue
                        if not q:
                            continue
                        pkt = cur[p] = q.popleft()
                        pos[p] = 0
                        qops += 1
                    act = slots[p]
                    last_event = t
                    if not act:
                        cur[p] = None
                        done_total += 1
                        continue
                    s = act[pos[p]]
                    acc[p][s] += rows[p][s][pkt.index] * pkt.value
                    busy[p] += 1
                    pos[p] += 1
                    if pos[p] == len(act):
                        cur[p] = None
                        done_total += 1

            if to_inject:
                for p in range(P):
                    pe = pes[p]
                    if pending[p] and pe.up_credits > 0:
                        pe.parent.bufs[pe.port_in_parent].append((t + D, pending[p].popleft()))
                        pe.up_credits -= 1
                        to_inject -= 1
                        rf += 1

            if arch.check_invariants:
                self._check_credits()

            if (done_total == P * expected) if consume else (delivered == expected):
                break
            t += 1
            if t > cap:
                raise self._deadlock(t, "broadcast phase")

        ev.router_hops += hops
        ev.queue_ops += qops
        ev.regfile_ops += rf
        return last_event + 1, busy, delivered

    # -- phases ----------------------------------------------------------------

    def run_v_phase(self, layer: QuantizedLayer, in_fmt: QFormat) -> PhaseResult:
        if self.arch.v_schedule == "row":
            return self._run_v_row(layer, in_fmt)
        return self._run_v_column(layer, in_fmt)

    def _root_requantize(self, total: int, layer: QuantizedLayer, in_fmt: QFormat,
                         sat: SaturationCounter) -> int:
        acc = WideAccumulator(total, layer.v_fmt.frac_bits + in_fmt.frac_bits)
        return requantize(acc, layer.vres_fmt, sat).code

    def _run_v_column(self, layer: QuantizedLayer, in_fmt: QFormat) -> PhaseResult:
        """Columns of V live with their activations; partial sums are reduced in-network."""
        arch = self.arch
        P, r = self.P, layer.rank
        Dacc, depth, levels = arch.acc_pipeline_depth, arch.pe_pipeline_depth, arch.tree_levels
        if r > arch.act_queue_depth:
            raise CapacityError("act_queue", f"rank {r} exceeds queue depth {arch.act_queue_depth}")
        ev = Events()
        sat = SaturationCounter()
        vt = layer.v.T.tolist()  # vt[j][i] = V[i, j]
        busy = [0] * P
        outbox: List[deque] = []
        for pe in self.pes:
            nz = self._ordered(self.local_nonzero(pe), pe.pe)
            k = len(nz)
            box = deque()
            for i in range(r):
                total = 0
                for j, a in nz:
                    total += vt[j][i] * a
                # row-outer order: row i completes after (i + 1) * k issues
                ready = (i + 1) * k - 1 + depth if k else 0
                box.append((ready, Packet(PacketKind.PARTIAL_SUM, total, i, pe.pe)))
            busy[pe.pe] = r * k
            outbox.append(box)
        macs = sum(busy)
        ev.macs += macs
        ev.v_mem_reads += macs
        ev.regfile_ops += macs

        self._reset_links()
        pes, root, qdepth = self.pes, self.root, arch.act_queue_depth
        down: deque = deque()
        results = np.zeros(r, dtype=np.int64)
        delivered = 0
        last = -1
        cap = arch.max_cycles or 20_000 + 10 * (max(busy) + r * (levels + 1) * Dacc)
        t = 0
        while delivered < r:
            for rt in self.routers_top_down:
                bufs = rt.bufs
                if not all(b and b[0][0] <= t for b in bufs):
                    continue
                idx = bufs[0][0][1].index
                if any(b[0][1].index != idx for b in bufs):
                    raise AssertionError(f"partial sums out of step at {rt.dump()}")
                if rt is root:
                    if max(len(pe.act_queue) for pe in pes) + len(down) >= qdepth:
                        continue
                elif rt.up_credits == 0:
                    continue
                total = 0
                for k, b in enumerate(bufs):
                    total += b.popleft()[1].value
                    rt.children[k].up_credits += 1
                ev.router_hops += 1
                if rt is root:
                    code = self._root_requantize(total, layer, in_fmt, sat)
                    results[idx] = code
                    down.append((t + levels, Packet(PacketKind.V_RESULT, code, idx, -1)))
                    ev.router_hops += self.down_routers
                else:
                    rt.parent.bufs[rt.port_in_parent].append(
                        (t + Dacc, Packet(PacketKind.PARTIAL_SUM, total, idx, rt.index)))
                    rt.up_credits -= 1
            while down and down[0][0] <= t:
                pkt = down.popleft()[1]
                for pe in pes:
                    pe.act_queue.append(pkt)
                ev.queue_ops += self.P
                delivered += 1
                last = t
            for pe, box in zip(pes, outbox):
                if box and box[0][0] <= t and pe.up_credits > 0:
                    pe.parent.bufs[pe.port_in_parent].append((t + Dacc, box.popleft()[1]))
                    pe.up_credits -= 1
            if arch.check_invariants:
                self._check_credits()
            t += 1
            if t > cap:
                raise self._deadlock(t, "V phase")
        ev.saturations += sat.count
        return PhaseResult("V", last + 1, busy, delivered, ev, results)

    def _run_v_row(self, layer: QuantizedLayer, in_fmt: QFormat) -> PhaseResult:
        """Comparison mode: V rows interleaved like W rows, then results re-broadcast."""
        P, r = self.P, layer.rank
        if r > self.arch.act_queue_depth:
            raise CapacityError("act_queue", f"rank {r} exceeds queue depth {self.arch.act_queue_depth}")
        ev = Events()
        sat = SaturationCounter()
        vrows = layer.v.tolist()
        slots = [list(range(len(range(p, r, P)))) for p in range(P)]
        rows = [[vrows[i] for i in range(p, r, P)] for p in range(P)]
        acc = [[0] * len(s) for s in slots]
        inject = [[Packet(PacketKind.ACT_BROADCAST, a, j, pe.pe)
                   for j, a in self._ordered(self.local_nonzero(pe), pe.pe)] for pe in self.pes]
        last, busy, delivered = self._broadcast(inject, slots, rows, acc, ev)
        compute_cycles = last + self.arch.pe_pipeline_depth
        macs = sum(busy)
        ev.macs += macs
        ev.v_mem_reads += macs
        ev.regfile_ops += macs

        results = np.zeros(r, dtype=np.int64)
        gather = []
        for p in range(P):
            pk = []
            for s, i in enumerate(range(p, r, P)):
                results[i] = self._root_requantize(acc[p][s], layer, in_fmt, sat)
                pk.append(Packet(PacketKind.V_RESULT, int(results[i]), i, p))
            gather.append(pk)
        # queues hold the activation stream only transiently; empty them first
        for pe in self.pes:
            pe.act_queue.clear()
        last2, _, delivered2 = self._broadcast(gather, None, None, None, ev)
        ev.saturations += sat.count
        return PhaseResult("V", compute_cycles + last2, busy, delivered + delivered2, ev, results)

    def run_u_phase(self, layer: QuantizedLayer) -> PhaseResult:
        """Row-scheduled U: each PE walks its queued V results against its local U rows.

        PEs share nothing in this phase, so each PE's schedule is exact in
        closed form: one MAC per cycle, at least one cycle per queue entry.
        """
        P, r = self.P, layer.rank
        m = layer.shape[0]
        ev = Events()
        urows = layer.u.tolist()
        busy = [0] * P
        finish = 0
        for pe in self.pes:
            q = pe.act_queue
            if len(q) != r:
                raise AssertionError(f"PE{pe.pe}: expected {r} V results in the queue, found {len(q)}")
            mine = [urows[j] for j in range(pe.pe, m, P)]
            acc = [0] * len(mine)
            cycles = 0
            while q:
                pkt = q.popleft()
                ev.queue_ops += 1
                for s, row in enumerate(mine):
                    acc[s] += row[pkt.index] * pkt.value
                cycles += max(1, len(mine))
            busy[pe.pe] = r * len(mine)
            pe.predictor_bank = np.array([a > 0 for a in acc], dtype=bool)
            finish = max(finish, cycles)
        macs = sum(busy)
        ev.macs += macs
        ev.u_mem_reads += macs
        cycles = finish + self.arch.pe_pipeline_depth
        mask = self.gather_mask(m)
        return PhaseResult("U", cycles, busy, 0, ev, mask)

    def gather_mask(self, m: int) -> np.ndarray:
        mask = np.zeros(m, dtype=bool)
        for pe in self.pes:
            for s, j in enumerate(range(pe.pe, m, self.P)):
                mask[j] = pe.predictor_bank[s]
        return mask

    def run_w_phase(self, layer: QuantizedLayer, in_fmt: QFormat, use_mask: bool) -> PhaseResult:
        """Broadcast nonzero inputs; every PE computes its predicted-active rows."""
        P = self.P
        m = layer.shape[0]
        ev = Events()
        sat = SaturationCounter()
        wrows = layer.w.tolist()
        slots, rows = [], []
        for pe in self.pes:
            n_local = len(range(pe.pe, m, P))
            if use_mask:
                bank = pe.predictor_bank
                if bank is None or len(bank) != n_local:
                    raise AssertionError(f"PE{pe.pe}: predictor bank not set for this layer")
                slots.append(scan_nonzero(bank))
            else:
                slots.append(list(range(n_local)))
            rows.append([wrows[j] for j in range(pe.pe, m, P)])
        acc = [[0] * len(r) for r in rows]
        inject = [[Packet(PacketKind.ACT_BROADCAST, a, j, pe.pe)
                   for j, a in self._ordered(self.local_nonzero(pe), pe.pe)] for pe in self.pes]
        last, busy, delivered = self._broadcast(inject, slots, rows, acc, ev)
        macs = sum(busy)
        ev.macs += macs
        ev.w_mem_reads += macs
        ev.regfile_ops += macs  # accumulate into destination registers

        shift = layer.w_fmt.frac_bits + in_fmt.frac_bits - layer.out_fmt.frac_bits
        out = np.zeros(m, dtype=np.int64)
        for pe in self.pes:
            dst = pe.dst_regfile
            for s in range(len(dst)):
                dst[s] = 0
            active = set(slots[pe.pe])
            for s, j in enumerate(range(pe.pe, m, P)):
                v = acc[pe.pe][s] if s in active else 0
                if layer.relu and v < 0:
                    v = 0
                code = round_shift(v, shift)
                if code > CODE_MAX or code < CODE_MIN:
                    sat.add(1)
                    code = CODE_MAX if code > CODE_MAX else CODE_MIN
                dst[s] = code
                out[j] = code
            ev.regfile_ops += len(range(pe.pe, m, P))
        ev.saturations += sat.count
        cycles = last + self.arch.pe_pipeline_depth
        return PhaseResult("W", cycles, busy, delivered, ev, out)

    def swap(self, width: int) -> None:
        for pe in self.pes:
            pe.swap()
            pe.predictor_bank = None
        self.width = width
        self._layer_id += 1


def run_network(qnet: QuantizedNetwork, x_codes: Sequence[int], arch: ArchConfig,
                mode: Mode | str) -> SimReport:
    """Simulate one inference; outputs are bit-identical to the golden model."""
    mode = Mode(mode)
    validate_capacity(qnet, arch)
    sim = Simulator(arch)
    sim.load_input(x_codes)
    report = SimReport(mode.value, clock_period_ns=arch.clock_period_ns)
    fmt = qnet.in_fmt
    for l, layer in enumerate(qnet.layers):
        phases: Dict[str, PhaseResult] = {}
        mask = None
        use_mask = mode == Mode.UV_ON and layer.has_predictor
        if use_mask:
            phases["V"] = sim.run_v_phase(layer, fmt)
            phases["U"] = sim.run_u_phase(layer)
            mask = phases["U"].outputs
        phases["W"] = sim.run_w_phase(layer, fmt, use_mask)
        report.layers.append(LayerReport(l, phases, phases["W"].outputs, mask))
        sim.swap(layer.shape[0])
        fmt = layer.out_fmt
    return report
