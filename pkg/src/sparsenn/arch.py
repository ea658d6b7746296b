"""Structural model of the accelerator: PE array, radix-4 H-tree, mappings.

Rows of W and U, columns of V, and activations are interleaved across PEs by
index modulo the PE count, so column ``j`` of V sits on the same PE as
activation ``a_j``. The tree has ``log4(P)`` router levels; level 0 routers
have PEs as children and the single top-level router is the root.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np


RADIX = 4


class CapacityError(ValueError):
    """A network does not fit the configured hardware; ``limit`` names the resource."""

    def __init__(self, limit: str, detail: str):
        super().__init__(f"{limit}: {detail}")
        self.limit = limit


@dataclass
class ArchConfig:
    num_pes: int = 64
    router_buffer_depth: int = 4           # flits per router input port
    credits_per_link: Optional[int] = None  # defaults to the buffer depth
    act_queue_depth: int = 64
    activation_regs_per_pe: int = 64
    pe_pipeline_depth: int = 5
    router_pipeline_depth: int = 4         # RC, SA, ST, LT
    acc_pipeline_depth: int = 5            # RC, SA, ST, ACC, LT
    clock_period_ns: float = 2.0
    w_mem_bytes: int = 128 * 1024
    u_mem_bytes: int = 8 * 1024
    v_mem_bytes: int = 8 * 1024
    word_bytes: int = 2
    # knobs that must not change functional results
    tie_break: str = "low_port"            # or "high_port"
    injection_order: str = "ascending"     # or "descending", "shuffled"
    injection_seed: int = 0
    v_schedule: str = "column"             # or "row" (comparison mode)
    check_invariants: bool = False
    max_cycles: Optional[int] = None

    def __post_init__(self):
        if self.credits_per_link is None:
            self.credits_per_link = self.router_buffer_depth
        self.validate()

    @property
    def tree_levels(self) -> int:
        return round(math.log(self.num_pes, RADIX))

    @property
    def qformat_bits(self) -> int:
        return 8 * self.word_bytes

    def validate(self) -> None:
        levels = round(math.log(self.num_pes, RADIX)) if self.num_pes > 0 else 0
        if self.num_pes < RADIX or RADIX ** levels != self.num_pes:
            raise ValueError(f"num_pes must be a power of 4 (>= 4), got {self.num_pes}")
        for name in ("router_buffer_depth", "act_queue_depth", "activation_regs_per_pe",
                     "pe_pipeline_depth", "router_pipeline_depth", "acc_pipeline_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= self.credits_per_link <= self.router_buffer_depth:
            raise ValueError("credits_per_link must be in [1, router_buffer_depth]")
        if self.clock_period_ns <= 0:
            raise ValueError("clock_period_ns must be positive")
        if self.tie_break not in ("low_port", "high_port"):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        if self.injection_order not in ("ascending", "descending", "shuffled"):
            raise ValueError(f"unknown injection_order {self.injection_order!r}")
        if self.v_schedule not in ("column", "row"):
            raise ValueError(f"unknown v_schedule {self.v_schedule!r}")


class PacketKind(enum.Enum):
    ACT_BROADCAST = "act"
    PARTIAL_SUM = "psum"
    V_RESULT = "vres"


class Packet:
    """One flit. ``value`` is a 16-bit code, or an exact integer accumulator for partial sums."""

    __slots__ = ("kind", "value", "index", "source_pe")

    def __init__(self, kind: PacketKind, value: int, index: int, source_pe: int):
        self.kind = kind
        self.value = value
        self.index = index
        self.source_pe = source_pe

    def __repr__(self) -> str:
        return f"Packet({self.kind.value}, idx={self.index}, val={self.value}, src={self.source_pe})"


def map_row(j: int, P: int) -> int:
    """PE owning row ``j`` of W/U, activation ``a_j`` and output ``o_j``."""
    if j < 0:
        raise ValueError("index must be non-negative")
    return j % P


def map_col(j: int, P: int) -> int:
    """PE owning column ``j`` of V; identical to :func:`map_row` by construction."""
    if j < 0:
        raise ValueError("index must be non-negative")
    return j % P


def local_count(total: int, pe: int, P: int) -> int:
    """How many of ``range(total)`` map to ``pe``."""
    return len(range(pe, total, P))


def lnzd(values: Sequence, start: int = 0) -> Optional[int]:
    """Leading nonzero detector: first index >= ``start`` holding a nonzero (or set bit)."""
    arr = np.asarray(values)
    if start >= arr.size:
        return None
    hits = np.flatnonzero(arr[start:])
    return int(start + hits[0]) if hits.size else None


def scan_nonzero(values: Sequence) -> List[int]:
    """All nonzero positions in order, as successive LNZD lookups would produce them."""
    out = []
    pos = lnzd(values, 0)
    while pos is not None:
        out.append(pos)
        pos = lnzd(values, pos + 1)
    return out


def arbitrate(indices: Sequence[Optional[int]], prefer_high_port: bool = False) -> Optional[int]:
    """Port whose head packet has the smallest index; ties go to the lowest port.

    ``indices[k]`` is the head index waiting on port ``k`` or ``None``.
    """
    best = None
    for port, idx in enumerate(indices):
        if idx is None:
            continue
        if best is None or idx < indices[best] or (prefer_high_port and idx == indices[best]):
            best = port
    return best


@dataclass
class RouterState:
    level: int
    index: int
    bufs: List[Deque[Tuple[int, Packet]]] = field(default_factory=lambda: [deque() for _ in range(RADIX)])
    up_credits: int = 0
    parent: Optional[RouterState] = None
    port_in_parent: int = 0
    children: list = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.parent is None

    def occupancy(self) -> List[int]:
        return [len(b) for b in self.bufs]

    def dump(self) -> str:
        heads = [b[0][1] if b else None for b in self.bufs]
        return (f"router L{self.level}#{self.index}: occupancy={self.occupancy()} "
                f"up_credits={self.up_credits} heads={heads}")


@dataclass
class PEState:
    pe: int
    regfiles: Tuple[List[int], List[int]]
    src: int = 0
    act_queue: Deque[Packet] = field(default_factory=deque)
    predictor_bank: Optional[np.ndarray] = None
    up_credits: int = 0
    parent: Optional[RouterState] = None
    port_in_parent: int = 0

    @property
    def src_regfile(self) -> List[int]:
        return self.regfiles[self.src]

    @property
    def dst_regfile(self) -> List[int]:
        return self.regfiles[1 - self.src]

    def swap(self) -> None:
        self.src = 1 - self.src


def build_tree(arch: ArchConfig) -> Tuple[List[List[RouterState]], List[PEState]]:
    """Routers per level (level 0 = leaves, last = [root]) and the PE array."""
    P = arch.num_pes
    regs = arch.activation_regs_per_pe
    pes = [PEState(p, ([0] * regs, [0] * regs)) for p in range(P)]
    levels: List[List[RouterState]] = []
    children: list = pes
    for level in range(arch.tree_levels):
        routers = [RouterState(level, i) for i in range(len(children) // RADIX)]
        for c_idx, child in enumerate(children):
            parent = routers[c_idx // RADIX]
            child.parent = parent
            child.port_in_parent = c_idx % RADIX
            child.up_credits = arch.credits_per_link
            parent.children.append(child)
        levels.append(routers)
        children = routers
    return levels, pes


def validate_capacity(qnet, arch: ArchConfig) -> None:
    """Raise :class:`CapacityError` when ``qnet`` does not fit on-chip."""
    P = arch.num_pes
    widest = max(qnet.layer_sizes)
    if widest > arch.activation_regs_per_pe * P:
        raise CapacityError("activation register file",
                            f"layer width {widest} exceeds {arch.activation_regs_per_pe} x {P} registers")
    w_bytes = u_bytes = v_bytes = 0
    for layer in qnet.layers:
        m, n = layer.shape
        rows = math.ceil(m / P)
        w_bytes += rows * n * arch.word_bytes
        if layer.has_predictor:
            r = layer.rank
            u_bytes += rows * r * arch.word_bytes
            v_bytes += math.ceil(n / P) * r * arch.word_bytes
            if r > arch.act_queue_depth:
                raise CapacityError("act_queue", f"rank {r} exceeds queue depth {arch.act_queue_depth}")
    for name, used, cap in (("W memory", w_bytes, arch.w_mem_bytes),
                            ("U memory", u_bytes, arch.u_mem_bytes),
                            ("V memory", v_bytes, arch.v_mem_bytes)):
        if used > cap:
            raise CapacityError(name, f"{used} bytes per PE exceed {cap}")
