"""One supertile unit: an m x n EPE array, two kernel groups per column.

Double pumping is modelled logically: a column produces the results of two
kernel groups per window, and one logic cycle performs two MACs per EPE.
Weights live in two banks (ping-pong); compute reads the active bank while a
load fills the other one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import ACC_MAX, AccumulatorOverflow
from .memsys import BroadcastCache, RowTurn


class SuError(RuntimeError):
    pass


class WeightCacheOverflow(SuError):
    pass


class WeightsNotLoaded(SuError):
    pass


@dataclass
class EpeState:
    """View of one EPE's caches: ``[slot][pump][tap]`` int16 weights per bank."""

    weight_cache_a: list
    weight_cache_b: list
    active_bank: str
    pending_update: bool


@dataclass
class SuState:
    m: int = 32
    n: int = 16
    depth: int = 16
    index: int = 0
    banks: list = field(default_factory=lambda: [None, None])   # each (fu, m, 2n, L) int64
    active: int | None = None
    pending: bool = False
    cycles: int = 0
    stall_cycles: int = 0
    macs: int = 0
    busy: bool = False

    @property
    def lanes(self):
        return 2 * self.n

    @property
    def inactive(self) -> int:
        return 1 if self.active == 0 else 0

    def swap(self):
        if self.pending:
            self.active = self.inactive
            self.pending = False

    def epe(self, i: int, j: int) -> EpeState:
        """Weights cached by EPE(i, j); pump p holds kernel group j + p*n."""
        def view(b):
            w = self.banks[b]
            if w is None:
                return []
            return [[w[f, i, j + p * self.n].astype(np.int16).tolist() for p in (0, 1)] for f in range(w.shape[0])]
        return EpeState(view(0), view(1), "a" if self.active in (0, None) else "b", self.pending)


def load_kernel_groups(su: SuState, weights: np.ndarray, fu: int, port_bytes: int = 64) -> int:
    """Fill the inactive bank with ``weights`` (fu, m, 2n, L); returns load cycles
    for a ``weight_port_bytes``-wide path (64 bytes by default)."""
    if fu > su.depth:
        raise WeightCacheOverflow(f"fu={fu} exceeds weight cache depth {su.depth}")
    if weights.shape[:3] != (fu, su.m, su.lanes):
        raise SuError(f"weight block {weights.shape} does not match fu={fu}, m={su.m}, 2n={su.lanes}")
    target = 0 if su.active is None else su.inactive
    su.banks[target] = np.asarray(weights, dtype=np.int64)
    if su.active is None:
        su.active = target
    else:
        su.pending = True
    return weight_load_cycles(fu, su.m, su.lanes, weights.shape[3], port_bytes)


def weight_load_cycles(fu: int, m: int, lanes: int, length: int, port_bytes: int = 64) -> int:
    return -(-(fu * m * lanes * length * 2) // port_bytes)


def stream_window(su: SuState, act: np.ndarray):
    """Stream one window vector (m rows x L steps) through the array.

    Returns ((fu, 2n) column sums, logic cycles = L * fu).
    """
    if su.active is None or su.banks[su.active] is None:
        raise WeightsNotLoaded(f"SU{su.index}: no weights in the active bank")
    w = su.banks[su.active]
    if act.shape != (su.m, w.shape[3]):
        raise SuError(f"activation vector {act.shape} does not match window ({su.m}, {w.shape[3]})")
    acc = np.einsum("il,figl->fg", act.astype(np.int64), w)
    if acc.size and int(np.abs(acc).max()) > ACC_MAX:
        raise AccumulatorOverflow(f"SU{su.index}: column sum exceeds 48 bits")
    cost = w.shape[3] * w.shape[0]
    su.cycles += cost
    su.macs += su.m * su.lanes * cost
    return acc, cost


def gather_vector(patch: np.ndarray, rowmap) -> np.ndarray:
    """Map a (channels, taps) patch onto EPE rows via a RowMap; idle slots read 0."""
    ch, tp = rowmap.channel, rowmap.tap
    ok = (ch >= 0) & (ch < patch.shape[0])
    out = np.zeros(ch.shape, dtype=np.int64)
    out[ok] = patch[ch[ok], tp[ok]]
    return out


def run_layer_slice(su: SuState, positions, bc: BroadcastCache, rowmap, sink, stall: int = 0) -> int:
    """Process this SU's windows of the BC's current output row.

    ``positions`` is the SU's share from the dispatch schedule; the BC yields the
    same positions through its interleaved cursor. ``sink(oy, ox, acc)`` takes
    each (fu, 2n) result. ``stall`` is the BC wait time the row timeline charged
    to this SU. Returns compute + stall cycles.
    """
    expected = list(positions)
    seen = []
    compute = 0
    while True:
        ev = bc.advance()
        if ev is None or isinstance(ev, RowTurn):
            break
        oy, ox, patch = ev
        acc, cost = stream_window(su, gather_vector(patch, rowmap))
        compute += cost
        seen.append(ox)
        sink(oy, ox, acc)
    if seen != expected:
        raise SuError(f"SU{su.index}: BC served positions {seen}, schedule says {expected}")
    su.stall_cycles += stall
    return compute + stall
