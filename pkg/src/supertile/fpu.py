"""Filter processing unit: micro-command decode, address generation, and the
2n-lane SIMD ALU (pre-multiplier -> mid adder/comparator -> final multiplier).

The FPU sees the OB sets of its engine as one flat element space; operands are
placed there by the runtime at the addresses the program names.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import INT16_MIN, check_acc, saturate, shift_round
from .mapper import Cat, Final, Func, Mid, MicroCommand, Pre, Slot, decode_ucmds, disassemble, unpack_hw

PIPELINE_DEPTH = 3   # one register per ALU stage


class FpuProgramError(ValueError):
    pass


class BankConflict(RuntimeError):
    pass


@dataclass
class AluConfig:
    func: Func
    pre: Pre
    mid: Mid
    final: Final
    slice_loop: bool
    iterations: int
    wide_out: bool
    scalars: dict = field(default_factory=dict)    # Slot -> (value, aux)

    @property
    def window_reduce(self) -> bool:
        """Reductions emit on window end and reset the register."""
        return self.func in (Func.MAXPOOL, Func.AVGPOOL, Func.DEPTHWISE)


@dataclass(frozen=True)
class LoadParams:
    start: int
    stride: int
    pad: int
    window: tuple
    fmap: tuple
    channels: int
    lshift: int = 0
    dilation: int = 1
    operand: int = 0

    def out_hw(self):
        kh = (self.window[0] - 1) * self.dilation + 1
        kw = (self.window[1] - 1) * self.dilation + 1
        return ((self.fmap[0] + 2 * self.pad - kh) // self.stride + 1,
                (self.fmap[1] + 2 * self.pad - kw) // self.stride + 1)

    @property
    def size(self):
        return self.channels * self.fmap[0] * self.fmap[1]


@dataclass(frozen=True)
class StoreParams:
    start: int
    fmap: tuple


@dataclass
class Descriptor:
    alu: AluConfig
    loads: list
    store: StoreParams
    channels: int

    @property
    def out_size(self):
        return self.channels * self.store.fmap[0] * self.store.fmap[1]


def _s32(v):
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v & 0x80000000 else v


def decode(prog, ob_elements: int | None = None) -> Descriptor:
    """Decode a micro-command sequence (objects or the binary record stream)."""
    cmds = decode_ucmds(prog) if isinstance(prog, (bytes, bytearray)) else list(prog)
    if not cmds or cmds[-1].category != Cat.DATA_STORE:
        raise FpuProgramError("program must end with DataStore")
    alu, loads, scal, store = None, [], {}, None
    for i, c in enumerate(cmds):
        if not isinstance(c, MicroCommand):
            raise FpuProgramError(f"record {i} is not a micro-command")
        o = c.operands
        if c.category == Cat.FUNC_SET:
            if alu is not None:
                raise FpuProgramError("more than one FuncSet")
            try:
                alu = AluConfig(Func(o[0]), Pre(o[1]), Mid(o[2]), Final(o[3]), bool(o[4]), o[5], bool(o[6]))
            except ValueError as e:
                raise FpuProgramError(f"bad FuncSet operand: {e}") from None
        elif c.category == Cat.SCALAR_VALUE:
            try:
                scal[Slot(o[0])] = (_s32(o[1]), _s32(o[2]))
            except ValueError:
                raise FpuProgramError(f"unknown scalar slot {o[0]}") from None
        elif c.category == Cat.DATA_LOAD:
            if alu is None:
                raise FpuProgramError("DataLoad before FuncSet")
            f = o[6]
            loads.append(LoadParams(o[0], o[1], o[2], unpack_hw(o[3]), unpack_hw(o[4]), o[5],
                                    f & 0xFF, max((f >> 8) & 0xFF, 1), (f >> 16) & 0xFF))
        elif c.category == Cat.DATA_STORE:
            if i != len(cmds) - 1:
                raise FpuProgramError("DataStore must be the last command")
            store = StoreParams(o[0], unpack_hw(o[1]))
    if alu is None:
        raise FpuProgramError("program has no FuncSet")
    if not loads:
        raise FpuProgramError("program has no DataLoad")
    alu.scalars = scal
    ch = loads[0].channels
    if any(ld.channels != ch for ld in loads):
        raise FpuProgramError("operands disagree on channel count")
    if alu.func == Func.ADD and len(loads) != 2:
        raise FpuProgramError("eltwise add needs two operands")
    if tuple(loads[0].out_hw()) != tuple(store.fmap):
        raise FpuProgramError(f"store map {store.fmap} does not match window geometry {loads[0].out_hw()}")
    if alu.iterations < 1:
        raise FpuProgramError("bad iteration count")
    desc = Descriptor(alu, loads, store, ch)
    if ob_elements is not None:
        spans = [(ld.start, ld.start + ld.size) for ld in loads] + [(store.start, store.start + desc.out_size)]
        for a, b in spans:
            if a < 0 or b > ob_elements:
                raise FpuProgramError(f"address range [{a}, {b}) outside the OB space of {ob_elements}")
    return desc


def reciprocal_divide(total: np.ndarray, size: int, mult: int, shift: int) -> np.ndarray:
    """Round-half-even ``total / size`` with one multiply and a shift.

    u = 2*total + size + 2*size*32768 is non-negative and floor(u / 2size) is
    the half-up quotient (offset by 32768); a multiply-back detects exact ties,
    which are pulled down to even.
    """
    d = 2 * size
    u = 2 * np.asarray(total, dtype=np.int64) + size + d * 32768
    if u.size and (u.min() < 0 or u.max() >= d * 65537):
        raise ValueError("window sum outside the int16 input range")
    q1 = (u * mult) >> shift
    tie = u - q1 * d == 0
    q = q1 - 32768
    return q - (tie & (q % 2 == 1))


def _taps(x, window, stride, pad, dilation, fill):
    """Yield (tap_index, view) for each window tap, padding from the address generator."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else x
    kh, kw = window
    oh = (h + 2 * pad - (kh - 1) * dilation - 1) // stride + 1
    ow = (w + 2 * pad - (kw - 1) * dilation - 1) // stride + 1
    for ky in range(kh):
        for kx in range(kw):
            y0, x0 = ky * dilation, kx * dilation
            yield ky * kw + kx, xp[:, y0:y0 + stride * (oh - 1) + 1:stride, x0:x0 + stride * (ow - 1) + 1:stride]


def _lane_op(desc: Descriptor, operands, weights):
    alu, sc = desc.alu, desc.alu.scalars
    ld = desc.loads[0]
    compare_reduce = alu.mid == Mid.COMPARE and Slot.CLAMP_LO not in sc
    fill = INT16_MIN if compare_reduce else 0
    reg = None
    if alu.func == Func.ADD:
        a, b = operands
        reg = (a << desc.loads[0].lshift) + (b << desc.loads[1].lshift)
    else:
        for t, x in _taps(operands[0], ld.window, ld.stride, ld.pad, ld.dilation, fill):
            if alu.pre == Pre.WEIGHT:
                x = x * weights[:, t][:, None, None]
            elif alu.pre == Pre.SCALAR:
                a, sh = sc[Slot.PRE]
                x = (x * a) << sh
            if alu.mid == Mid.ADD:
                reg = x if reg is None else reg + x
            elif compare_reduce:
                reg = x if reg is None else np.maximum(reg, x)
            else:
                reg = x
        if alu.mid == Mid.ADD and Slot.BIAS in sc:
            b, sh = sc[Slot.BIAS]
            reg = reg + (np.int64(b) << sh)
        if alu.mid == Mid.COMPARE and not compare_reduce:
            reg = np.maximum(reg, sc[Slot.CLAMP_LO][0])
            if Slot.CLAMP_HI in sc:
                reg = np.minimum(reg, sc[Slot.CLAMP_HI][0])
    check_acc(reg, "fpu lane")
    if alu.final == Final.SHIFT:
        mult, sh = sc.get(Slot.FINAL, (1, 0))
        reg = shift_round(reg * mult, sh)
    elif alu.final == Final.RECIPROCAL:
        mult, sh = sc[Slot.FINAL]
        reg = reciprocal_divide(reg, sc[Slot.DIVISOR][0], mult, sh)
    if not alu.wide_out:
        reg = saturate(reg)
    return reg


def run_filter_op(desc: Descriptor, mem: np.ndarray, weights: np.ndarray | None = None) -> int:
    """Execute a decoded program on the flat OB space ``mem`` (int64); returns cycles.

    Channels are processed 2n at a time by the slice-loop controller.
    """
    alu = desc.alu
    if alu.pre == Pre.WEIGHT:
        if weights is None:
            raise FpuProgramError("depthwise program needs kernels on the load path")
        weights = np.asarray(weights, dtype=np.int64).reshape(desc.channels, -1)
    lanes = -(-desc.channels // alu.iterations)
    oh, ow = desc.store.fmap
    out = np.zeros((desc.channels, oh, ow), dtype=np.int64)
    srcs = [mem[ld.start:ld.start + ld.size].reshape(ld.channels, *ld.fmap) for ld in desc.loads]
    for it in range(alu.iterations):
        c0, c1 = it * lanes, min(desc.channels, (it + 1) * lanes)
        if c0 >= c1:
            break
        w = weights[c0:c1] if weights is not None else None
        out[c0:c1] = _lane_op(desc, [s[c0:c1] for s in srcs], w)
    mem[desc.store.start:desc.store.start + out.size] = out.reshape(-1)
    return fpu_cycles(desc)


def fpu_cycles(desc: Descriptor) -> int:
    oh, ow = desc.store.fmap
    win = desc.loads[0].window
    per = win[0] * win[1] if desc.alu.func != Func.ADD else 1
    return desc.alu.iterations * oh * ow * per + PIPELINE_DEPTH


# ------------------------------------------------------------------ overlap

@dataclass
class Task:
    name: str
    cycles: int
    reads: frozenset = frozenset()    # OB bank tokens
    writes: frozenset = frozenset()


@dataclass
class ParallelResult:
    elapsed: int
    fpu_cycles: int
    su_cycles: int
    serialized: bool
    records: list


def run_parallel_with_su(fpu_task: Task, su_task: Task) -> ParallelResult:
    """Overlap an FPU task with an SU task; a shared bank forces serialization."""
    conflict = (set(fpu_task.reads) | set(fpu_task.writes)) & set(su_task.writes) or \
        set(fpu_task.writes) & set(su_task.reads)
    if conflict:
        msg = f"bank conflict on {sorted(conflict)}: {fpu_task.name} serialized after {su_task.name}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return ParallelResult(fpu_task.cycles + su_task.cycles, fpu_task.cycles, su_task.cycles, True, [msg])
    return ParallelResult(max(fpu_task.cycles, su_task.cycles), fpu_task.cycles, su_task.cycles, False, [])


def pipelined_elapsed(su_chunks, fpu_chunks, lag: int = 1) -> int:
    """Elapsed time of an SU layer feeding an FPU layer tile by tile.

    FPU chunk i may start once SU chunk i + lag is done (window halo)."""
    t_su, t_fpu = 0, 0
    su_end = []
    for c in su_chunks:
        t_su += c
        su_end.append(t_su)
    last = len(su_end) - 1
    for i, c in enumerate(fpu_chunks):
        t_fpu = max(t_fpu, su_end[min(i + lag, last)]) + c
    return max(t_fpu, t_su)

