"""Dispatching-assembling buffer model: IB, per-SU broadcast caches, OB sets.

IB physical layout: a tensor is stored slice-major over groups of
``ib_port_bits / 16`` channels (32 by default), then row-major, with the
channels of a group interleaved per pixel, so one IB port word is one pixel of
one channel group.  Groups are zero-padded to full width.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .hwconfig import HwConfig


class BufferError_(RuntimeError):
    pass


class BcUnderrun(BufferError_):
    """A window needed a row the BC does not hold; a scheduling bug."""


class ObError(BufferError_):
    pass


class PortOverrun(BufferError_):
    pass


# --------------------------------------------------------------------- ledger

@dataclass
class BandwidthLedger:
    bytes: dict = field(default_factory=lambda: defaultdict(int))
    cycles: dict = field(default_factory=lambda: defaultdict(int))
    peak: dict = field(default_factory=lambda: defaultdict(float))
    ports: dict = field(default_factory=dict)  # resource -> bytes per logic cycle

    def charge(self, resource: str, nbytes: int, cycles: int = 0):
        self.bytes[resource] += int(nbytes)
        self.cycles[resource] += int(cycles)
        if cycles:
            rate = nbytes / cycles
            port = self.ports.get(resource)
            if port is not None and rate > port + 1e-9:
                raise PortOverrun(f"{resource}: {rate:.1f} B/cycle exceeds port {port} B/cycle")
            self.peak[resource] = max(self.peak[resource], rate)

    def merge(self, other: "BandwidthLedger"):
        for k, v in other.bytes.items():
            self.bytes[k] += v
        for k, v in other.cycles.items():
            self.cycles[k] += v
        for k, v in other.peak.items():
            self.peak[k] = max(self.peak[k], v)


def new_ledger(hw: HwConfig) -> BandwidthLedger:
    return BandwidthLedger(ports={"ib_read": hw.ib_port_bytes, "bc_fill": hw.ib_port_bytes,
                                  "assemble": hw.assemble_port_bytes, "weight_load": hw.weight_port_bytes})


def ledger_report(ledger: BandwidthLedger, hw: HwConfig) -> dict:
    """Measured byte counts plus the design bandwidth identities."""
    per_su_bits = hw.m * 16 * hw.f_logic
    supply_bits = hw.ib_port_bits * hw.f_logic
    ob_bytes = hw.sus_per_engine * hw.lanes * 2 * hw.f_logic
    return {
        "bytes": dict(sorted(ledger.bytes.items())),
        "peak_bytes_per_cycle": dict(sorted(ledger.peak.items())),
        "per_su_input_demand_bits_per_s": per_su_bits,
        "aggregate_input_demand_bits_per_s": per_su_bits * hw.sus_per_engine,
        "ib_supply_bits_per_s": supply_bits,
        "demand_supply_ratio": per_su_bits * hw.sus_per_engine / supply_bits,
        "ob_aggregate_bytes_per_s": ob_bytes,
        "ob_aggregate_GBps": ob_bytes / 1e9,
    }


# ----------------------------------------------------------------------- IB

def ib_words_per_pixel(c0: int, c1: int, lanes: int) -> int:
    """Port words needed to fetch channels [c0, c1) of one pixel."""
    return (c1 - 1) // lanes - c0 // lanes + 1


def ib_row_cycles(c0: int, c1: int, cols: int, lanes: int) -> int:
    """Port cycles to stream ``cols`` pixels of channels [c0, c1).

    Reads narrower than one word are packed several pixels per word, so the
    port moves a full 512 bits each cycle.
    """
    words = ib_words_per_pixel(c0, c1, lanes)
    if words == 1:
        return -(-cols * (c1 - c0) // lanes)
    return words * cols


def to_ib_layout(x: np.ndarray, lanes: int) -> np.ndarray:
    """(C, H, W) -> (groups, H, W, lanes), zero padded."""
    c, h, w = x.shape
    g = -(-c // lanes)
    out = np.zeros((g * lanes, h, w), dtype=x.dtype)
    out[:c] = x
    return out.reshape(g, lanes, h, w).transpose(0, 2, 3, 1).copy()


def from_ib_layout(phys: np.ndarray, channels: int) -> np.ndarray:
    g, h, w, lanes = phys.shape
    return phys.transpose(0, 3, 1, 2).reshape(g * lanes, h, w)[:channels].copy()


@dataclass
class IbTensor:
    phys: np.ndarray      # (groups, H, W, lanes)
    channels: int
    frac: int
    wide: bool = False

    @property
    def shape(self):
        g, h, w, lanes = self.phys.shape
        return (self.channels, h, w)

    def logical(self) -> np.ndarray:
        return from_ib_layout(self.phys, self.channels)


class InputBuffer:
    def __init__(self, hw: HwConfig, ledger: BandwidthLedger):
        self.hw = hw
        self.lanes = hw.ib_port_bits // 16
        self.ledger = ledger
        self.tensors: dict[str, IbTensor] = {}
        self.peak_bytes = 0

    def store(self, tid: str, x: np.ndarray, frac: int, wide: bool = False):
        self.tensors[tid] = IbTensor(to_ib_layout(np.asarray(x), self.lanes), x.shape[0], frac, wide)
        used = sum(t.phys.size * (6 if t.wide else 2) for t in self.tensors.values())
        self.peak_bytes = max(self.peak_bytes, used)

    def load(self, tid: str) -> IbTensor:
        return self.tensors[tid]

    def drop(self, tid: str):
        self.tensors.pop(tid, None)

    def read_row(self, tid: str, c0: int, c1: int, row: int, col0: int, col1: int):
        """Channels [c0, c1) of one row segment; returns (data (C, cols), port cycles)."""
        t = self.tensors[tid]
        words = ib_words_per_pixel(c0, c1, self.lanes)
        cols = col1 - col0
        g0 = c0 // self.lanes
        seg = t.phys[g0:g0 + words, row, col0:col1, :]          # (words, cols, lanes)
        flat = seg.transpose(0, 2, 1).reshape(words * self.lanes, cols)
        off = c0 - g0 * self.lanes
        cycles = ib_row_cycles(c0, c1, cols, self.lanes)
        nbytes = cols * (c1 - c0) * 2 if words == 1 else cycles * self.hw.ib_port_bytes
        self.ledger.charge("ib_read", nbytes, cycles)
        return flat[off:off + (c1 - c0)], cycles


# ------------------------------------------------------------ broadcast cache

@dataclass(frozen=True)
class RowTurn:
    """Emitted when the window reaches the row end and the center moves down."""

    finished_row: int
    next_row: int


class BroadcastCache:
    """Circular row cache in front of one SU.

    Rows are absolute input-row indices of the current tile. Columns are the
    tile's real (non-padding) columns; padding is produced by the read path.
    """

    def __init__(self, capacity: int, channels: int, kernel, stride: int, pad: int, dilation: int,
                 tile_in_col0: int, in_w: int, in_h: int, out_cols: int, out_rows: int,
                 su: int = 0, sus: int = 1):
        ky, kx = kernel
        if capacity < (ky - 1) * dilation + 2:
            raise ValueError("BC must hold at least kernel size + 1 rows")
        self.capacity = capacity
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.dilation = dilation
        self.in_h = in_h
        self.col_lo = max(0, tile_in_col0)                                 # first real column held
        self.col_hi = min(in_w, tile_in_col0 + (out_cols - 1) * stride + (kx - 1) * dilation + 1)
        self.tile_in_col0 = tile_in_col0
        self.out_cols = out_cols
        self.out_rows = out_rows
        self.su = su
        self.sus = sus
        self.slots: list[int | None] = [None] * capacity
        self.data = np.zeros((capacity, channels, max(self.col_hi - self.col_lo, 1)), dtype=np.int64)
        self.write_cursor = 0
        self.oy = 0
        self.cursor = su  # window index within the row
        self.history: list[tuple[str, int]] = []

    @property
    def start_offset(self) -> int:
        return self.su * self.stride

    @property
    def window_stride(self) -> int:
        return self.sus * self.stride

    @property
    def width(self):
        return self.col_hi - self.col_lo

    def resident(self) -> list[int]:
        return sorted(r for r in self.slots if r is not None)

    def rows_for(self, oy: int) -> tuple[int, int]:
        top = oy * self.stride - self.pad
        return top, top + (self.kernel[0] - 1) * self.dilation

    def _needed_now(self) -> int:
        """Lowest input row this or any later window may still read.

        With dilation the current window skips rows that the next one needs, so
        everything from the window top down stays live.
        """
        if self.oy >= self.out_rows:
            return self.in_h
        return max(0, self.oy * self.stride - self.pad)

    def can_load(self) -> bool:
        victim = self.slots[self.write_cursor]
        return victim is None or victim < self._needed_now()

    def load_row(self, row: int, data: np.ndarray):
        victim = self.slots[self.write_cursor]
        if victim is not None and victim >= self._needed_now():
            raise BcUnderrun(f"loading row {row} would evict row {victim} still under the window")
        self.slots[self.write_cursor] = row
        self.data[self.write_cursor, :, :data.shape[1]] = data
        self.history.append(("load", row) if victim is None else ("overwrite", row))
        self.write_cursor = (self.write_cursor + 1) % self.capacity

    def _slot_of(self, row: int) -> int:
        try:
            return self.slots.index(row)
        except ValueError:
            raise BcUnderrun(f"row {row} not resident (have {self.resident()})") from None

    def window(self, oy: int, ox: int) -> np.ndarray:
        """(channels, k_y*k_x) patch for output position (oy, ox); zeros for padding."""
        ky, kx = self.kernel
        out = np.zeros((self.channels, ky, kx), dtype=np.int64)
        x0 = ox * self.stride + self.tile_in_col0
        cols = x0 + np.arange(kx) * self.dilation
        ok = (cols >= self.col_lo) & (cols < self.col_hi) & (cols >= 0)
        idx = cols[ok] - self.col_lo
        top = oy * self.stride - self.pad
        for i in range(ky):
            r = top + i * self.dilation
            if r < 0 or r >= self.in_h:
                continue
            out[:, i, ok] = self.data[self._slot_of(r)][:, idx]
        return out.reshape(self.channels, ky * kx)

    def advance(self):
        """Next (oy, ox, patch) for this SU's interleaved sequence, or a RowTurn."""
        if self.oy >= self.out_rows:
            return None
        if self.cursor >= self.out_cols:
            finished = self.oy
            self.oy += 1
            self.cursor = self.su
            return RowTurn(finished, self.oy)
        ox = self.cursor
        self.cursor += self.sus
        return self.oy, ox, self.window(self.oy, ox)


def bc_fill(bcs: list[BroadcastCache], ib: InputBuffer, tid: str, c0: int, c1: int, rows) -> int:
    """Read ``rows`` once from the IB and broadcast them into every BC."""
    total = 0
    for r in rows:
        bc = bcs[0]
        if not 0 <= r < bc.in_h:
            raise ValueError(f"row {r} outside the tile")
        data, cycles = ib.read_row(tid, c0, c1, r, bc.col_lo, bc.col_hi)
        for b in bcs:
            b.load_row(r, data)
        ib.ledger.charge("bc_fill", data.size * 2 * len(bcs))
        total += cycles
    return total


def bc_advance(bc: BroadcastCache):
    return bc.advance()


# ----------------------------------------------------------------------- OB

class OutputBufferSet:
    """2n components for one SU; every component has two banks (ping-pong).

    Each element carries the flat index of the output element it holds.
    A dedicated partial region keeps inter-slice sums at accumulator width.
    """

    def __init__(self, hw: HwConfig, ledger: BandwidthLedger | None = None):
        self.components = hw.lanes
        self.capacity = hw.ob_bytes_per_component // 2
        self.values = np.zeros((2, self.components, self.capacity), dtype=np.int64)
        self.meta = np.full((2, self.components, self.capacity), -1, dtype=np.int64)
        self.partial = np.zeros((self.components, self.capacity), dtype=np.int64)
        self.write_bank = 0
        self.ledger = ledger

    @property
    def read_bank(self):
        return 1 - self.write_bank

    def swap(self):
        self.write_bank = 1 - self.write_bank
        self.values[self.write_bank] = 0
        self.meta[self.write_bank] = -1

    def _check(self, addr, bank):
        if bank != self.write_bank:
            raise ObError(f"bank {bank} is being read; writes go to bank {self.write_bank}")
        a = np.asarray(addr)
        if a.size and (a.min() < 0 or a.max() >= self.capacity):
            raise ObError(f"OB address {int(a.max())} outside component capacity {self.capacity}")

    def write(self, column: int, value: int, addr: int, bank: int | None = None, meta: int = -1):
        bank = self.write_bank if bank is None else bank
        self._check(addr, bank)
        self.values[bank, column, addr] = value
        self.meta[bank, column, addr] = meta
        if self.ledger is not None:
            self.ledger.charge("ob_write", 2)

    def write_vector(self, addr: int, values: np.ndarray, metas: np.ndarray, mask: np.ndarray):
        """All 2n columns write the same address in one cycle (exclusive ports)."""
        self._check(addr, self.write_bank)
        cols = np.nonzero(mask)[0]
        self.values[self.write_bank, cols, addr] = values[cols]
        self.meta[self.write_bank, cols, addr] = metas[cols]
        if self.ledger is not None:
            self.ledger.charge("ob_write", 2 * len(cols))

    def read(self, column: int, addr: int, bank: int | None = None) -> int:
        bank = self.read_bank if bank is None else bank
        return int(self.values[bank, column, addr])

    def read_partial(self, addr: int) -> np.ndarray:
        if self.ledger is not None:
            self.ledger.charge("ob_partial_read", 6 * self.components)
        return self.partial[:, addr].copy()

    def write_partial(self, addr: int, values: np.ndarray):
        if addr >= self.capacity:
            raise ObError(f"partial address {addr} outside capacity {self.capacity}")
        self.partial[:, addr] = values
        if self.ledger is not None:
            self.ledger.charge("ob_partial_write", 6 * self.components)


def ob_write(ob: OutputBufferSet, column: int, value: int, addr: int, bank: int | None = None):
    ob.write(column, value, addr, bank)


def assemble_read(obs: list[OutputBufferSet], out: np.ndarray, expected: np.ndarray, ib: InputBuffer | None = None,
                  hw: HwConfig | None = None) -> int:
    """Gather the read banks of every OB set into ``out`` (flat, C*H*W order).

    ``expected`` lists the flat indices this tile must provide; each must be
    present exactly once. Returns assemble-port cycles.
    """
    seen = np.zeros(out.size, dtype=np.int64)
    flat = out.reshape(-1)
    for ob in obs:
        meta = ob.meta[ob.read_bank]
        sel = meta >= 0
        idx = meta[sel]
        flat[idx] = ob.values[ob.read_bank][sel]
        np.add.at(seen, idx, 1)
    if np.any(seen[expected] != 1) or seen.sum() != len(expected):
        missing = expected[seen[expected] == 0]
        dup = np.nonzero(seen > 1)[0]
        raise ObError(f"assembly incomplete: {len(missing)} missing, {len(dup)} duplicated elements")
    nbytes = 2 * len(expected)
    cycles = 0
    if hw is not None:
        cycles = -(-nbytes // hw.assemble_port_bytes)
        if ib is not None:
            ib.ledger.charge("assemble", nbytes, cycles)
            ib.ledger.charge("ob_read", nbytes)
    return cycles
