"""Lowering of a ModelGraph onto the SU/FPU engine.

The compiler decides, per node: which unit runs it, how the input map is
tiled for the broadcast caches, how input channels are sliced, the first-layer
kernel partition (NP) and 1x1 kernel fusion factor (Fu), the interleaved
window dispatch, which post-ops fold into the SU column cascade, and the FPU
micro-command programs.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fixedpoint import QFormat, choose_qformat, quantize
from .hwconfig import HwConfig
from .model_ir import LayerKind, LayerNode, ModelError, ModelGraph, TensorShape, topo_order


class LoweringError(ModelError):
    pass


SU_KINDS = (LayerKind.CONV, LayerKind.CONV1X1, LayerKind.CONV_TRANSPOSED, LayerKind.CONV_DILATED)
FPU_KINDS = (LayerKind.DEPTHWISE, LayerKind.MAXPOOL, LayerKind.AVGPOOL, LayerKind.RELU, LayerKind.RELU6,
             LayerKind.LINEAR, LayerKind.ADD, LayerKind.QUANTIZE)


# ------------------------------------------------------------ kernel partition

def compute_np(ks: int, m: int, channels: int = 3) -> int:
    """Number of pieces a first-layer window is split into: the largest of
    {ks, ks*channels, ks*ks} that still fits in ``m`` EPE rows."""
    if ks < 1:
        raise LoweringError("kernel size must be >= 1")
    if ks > m:
        raise LoweringError(f"kernel size {ks} exceeds the {m} EPE rows of an SU")
    return max(c for c in (ks, ks * channels, ks * ks) if c <= m)


@dataclass(frozen=True)
class Piece:
    """One EPE row's share of a window: ``channels`` x flattened taps [begin, end)."""

    row: int
    channels: tuple[int, ...]
    window_pos_begin: int
    window_pos_end: int

    def __len__(self):
        return len(self.channels) * (self.window_pos_end - self.window_pos_begin)


def _partition_pays(ks: int, m: int, channels: int) -> bool:
    """Partition only when the pieces stream faster than one tap per cycle
    with the channels spread over rows."""
    if ks > m or channels >= m:
        return False
    np_ = compute_np(ks, m, channels)
    return -(-ks * ks * channels // np_) < ks * ks


def partition_first_layer(ks: int, np_: int, channels: int = 3) -> list[Piece]:
    """Split a ks x ks x ``channels`` window over ``np_`` EPE rows.

    ``np_ == ks*channels``: one 1 x ks strip of one channel per row (preferred on ties);
    ``np_ == ks*ks``: one tap of every channel per row;
    ``np_ == ks``: one kernel row of every channel per row.
    """
    allc = tuple(range(channels))
    if np_ == ks * channels:
        return [Piece(c * ks + ky, (c,), ky * ks, (ky + 1) * ks) for c in range(channels) for ky in range(ks)]
    if np_ == ks * ks:
        return [Piece(t, allc, t, t + 1) for t in range(ks * ks)]
    if np_ == ks:
        return [Piece(ky, allc, ky * ks, (ky + 1) * ks) for ky in range(ks)]
    raise LoweringError(f"np={np_} is not a valid piece count for ks={ks}, channels={channels}")


@dataclass
class RowMap:
    """Which (channel, tap) feeds each EPE row at each streaming step; -1 means idle."""

    channel: np.ndarray  # (m, L) int
    tap: np.ndarray      # (m, L) int

    @property
    def length(self) -> int:
        return self.channel.shape[1]

    @property
    def rows_used(self) -> int:
        return int(np.any(self.channel >= 0, axis=1).sum())


def standard_rowmap(m: int, channels: int, taps: int) -> RowMap:
    ch = np.full((m, taps), -1, dtype=np.int64)
    tp = np.full((m, taps), -1, dtype=np.int64)
    ch[:channels] = np.arange(channels)[:, None]
    tp[:channels] = np.arange(taps)[None, :]
    return RowMap(ch, tp)


def pieces_rowmap(m: int, pieces: list[Piece]) -> RowMap:
    length = max(len(p) for p in pieces)
    ch = np.full((m, length), -1, dtype=np.int64)
    tp = np.full((m, length), -1, dtype=np.int64)
    for p in pieces:
        i = 0
        for c in p.channels:
            for t in range(p.window_pos_begin, p.window_pos_end):
                ch[p.row, i], tp[p.row, i] = c, t
                i += 1
    return RowMap(ch, tp)


# ------------------------------------------------------------- kernel fusion

def compute_fu(c_out: int, n: int, depth: int = 16) -> int:
    """Kernels per EPE weight bank for a 1x1 layer: ceil(c_out / 2n).

    Values above ``depth`` do not fit one bank; see :func:`split_fu`.
    """
    if c_out < 1:
        raise LoweringError("c_out must be >= 1")
    return -(-c_out // (2 * n))


def split_fu(fu: int, depth: int) -> list[int]:
    """Break a fusion factor into passes of at most ``depth`` kernels each."""
    passes = -(-fu // depth)
    return [min(depth, fu - i * depth) for i in range(passes)]


# -------------------------------------------------------------------- tiling

@dataclass(frozen=True)
class Tile:
    out_col0: int
    out_cols: int
    in_col0: int      # padded-frame coordinate, may be negative
    in_cols: int
    out_rows: int
    in_rows: int
    halo: int
    bc_rows: int      # rows the BC can hold at this tile width

    @property
    def origin(self):
        return (0, self.out_col0)


@dataclass
class TilePlan:
    tiles: list[Tile]
    max_width: int


def plan_tiles(shape: TensorShape, layer: LayerNode, hw: HwConfig, ob_slots: int = 1,
               min_tiles: int = 1) -> TilePlan:
    """Split the output columns so that (k+1) BC rows of the input tile fit.

    Widths count padded columns; every tile spans the full height. A tile's
    outputs must also fit one OB bank: ``ob_slots`` (fu x passes x groups)
    results per window. ``min_tiles`` asks for at least that many tiles so a
    consumer can start on early tiles.
    """
    ky_eff, kx_eff = layer.effective_kernel()
    s, pad = layer.stride, layer.padding
    h, w = shape.h, shape.w
    oh = (h + 2 * pad - ky_eff) // s + 1
    ow = (w + 2 * pad - kx_eff) // s + 1
    row_bytes = hw.m * 2
    max_width = hw.bc_bytes // ((ky_eff + 1) * row_bytes)
    if max_width < kx_eff:
        raise LoweringError(f"{layer.id}: kernel {ky_eff}x{kx_eff} does not fit the BC at any tile width")
    per_tile = min(ow, (max_width - kx_eff) // s + 1)
    ob_cap = hw.ob_bytes_per_component // 2
    windows = ob_cap // (ob_slots * oh)         # per SU and tile
    if windows < 1:
        raise LoweringError(f"{layer.id}: {oh} output rows x {ob_slots} kernel slots overflow an OB bank")
    per_tile = min(per_tile, windows * hw.sus_per_engine, -(-ow // max(1, min_tiles)))
    tiles = []
    for oc0 in range(0, ow, per_tile):
        cols = min(per_tile, ow - oc0)
        in_cols = (cols - 1) * s + kx_eff
        bc_rows = min(hw.bc_bytes // (in_cols * row_bytes), h + 2 * pad)
        tiles.append(Tile(oc0, cols, oc0 * s - pad, in_cols, oh, h, kx_eff - s, max(bc_rows, ky_eff + 1)))
    return TilePlan(tiles, max_width)


# ------------------------------------------------------------------- slicing

@dataclass
class SlicePlan:
    ranges: list[tuple[int, int]]  # [c0, c1) relative to the group's first channel

    def __len__(self):
        return len(self.ranges)


def plan_slices(c_in: int, hw: HwConfig) -> SlicePlan:
    if c_in < 1:
        raise LoweringError("c_in must be >= 1")
    return SlicePlan([(c, min(c + hw.m, c_in)) for c in range(0, c_in, hw.m)])


# ------------------------------------------------------------------ dispatch

@dataclass
class DispatchSchedule:
    positions: list[list[int]]  # per SU, window indices along the row
    conv_stride: int

    @property
    def sus(self):
        return len(self.positions)

    def start_offset(self, su: int) -> int:
        return su * self.conv_stride

    @property
    def window_stride(self) -> int:
        return self.sus * self.conv_stride


def build_dispatch_schedule(row_positions: int, sus: int, conv_stride: int = 1) -> DispatchSchedule:
    """Interleave the window positions of one output row across ``sus`` SUs."""
    return DispatchSchedule([list(range(s, row_positions, sus)) for s in range(sus)], conv_stride)


# -------------------------------------------------------------------- fusion

@dataclass
class FusionChain:
    slice_add: bool = False
    eltwise: bool = False
    relu: bool = False
    requantize: bool = True
    members: list[str] = field(default_factory=list)   # node ids folded into the conv, in order
    branch: str | None = None                          # tensor id added by the eltwise stage

    STAGES = ("slice_add", "eltwise", "relu", "requantize")

    def enables(self):
        return tuple(getattr(self, s) for s in self.STAGES)


def find_chains(graph: ModelGraph) -> dict[str, list[str]]:
    """conv id -> [conv, post-op ids...] for every SU conv.

    A post-op folds in only when its producer has it as the single consumer
    and the stage order add -> relu -> quantize is kept.
    """
    chains, claimed = {}, set()
    for node in topo_order(graph):
        if node.kind not in SU_KINDS:
            continue
        chain, cur, stage = [node.id], node, -1
        while cur.id not in graph.outputs:
            cons = graph.consumers(cur.id)
            if len(cons) != 1:
                break
            nxt = cons[0]
            if nxt.id in claimed:
                break
            if nxt.kind == LayerKind.ADD and stage < 0:
                other = nxt.inputs[1] if nxt.inputs[0] == cur.id else nxt.inputs[0]
                if other == cur.id or other in chain:
                    break
                stage = 0
            elif nxt.kind == LayerKind.RELU and stage < 1:
                stage = 1
            elif nxt.kind == LayerKind.QUANTIZE and stage < 2:
                stage = 2
            else:
                break
            chain.append(nxt.id)
            cur = nxt
        # the group executes at its tail's position, which is after the branch producer
        claimed.update(chain[1:])
        chains[node.id] = chain
    return chains


# ------------------------------------------------------------- micro-commands

class Cat(enum.IntEnum):
    DATA_LOAD = 1
    DATA_STORE = 2
    FUNC_SET = 3
    SCALAR_VALUE = 4


class Func(enum.IntEnum):
    MAXPOOL = 1
    AVGPOOL = 2
    RELU = 3
    RELU6 = 4
    LINEAR = 5
    ADD = 6
    DEPTHWISE = 7
    QUANTIZE = 8


class Pre(enum.IntEnum):
    BYPASS = 0
    SCALAR = 1
    WEIGHT = 2


class Mid(enum.IntEnum):
    BYPASS = 0
    ADD = 1
    COMPARE = 2


class Final(enum.IntEnum):
    BYPASS = 0
    SHIFT = 1
    RECIPROCAL = 2


class Slot(enum.IntEnum):
    PRE = 0        # value: multiplier, aux: left shift after multiply
    BIAS = 1       # value: addend, aux: left shift
    CLAMP_LO = 2
    CLAMP_HI = 3
    FINAL = 4      # value: multiplier, aux: right shift (round half even)
    DIVISOR = 5    # value: window size for the reciprocal stage


UCMD_RECORD = struct.Struct("<B7I")


@dataclass(frozen=True)
class MicroCommand:
    category: Cat
    operands: tuple[int, ...]

    def __post_init__(self):
        ops = tuple(int(v) for v in self.operands) + (0,) * (7 - len(self.operands))
        if len(ops) != 7:
            raise ValueError("a micro-command has 7 operand fields")
        object.__setattr__(self, "operands", ops)

    def encode(self) -> bytes:
        return UCMD_RECORD.pack(int(self.category), *[v & 0xFFFFFFFF for v in self.operands])

    @classmethod
    def decode(cls, blob: bytes) -> "MicroCommand":
        cat, *ops = UCMD_RECORD.unpack(blob)
        return cls(Cat(cat), tuple(ops))


def _signed(v: int) -> int:
    v &= 0xFFFFFFFF
    return v - (1 << 32) if v & 0x80000000 else v


def pack_hw(h, w):
    return (h << 16) | w


def unpack_hw(v):
    return v >> 16, v & 0xFFFF


def data_load(start, stride, pad, window, fmap, channels, lshift=0, dilation=1, operand=0):
    flags = (lshift & 0xFF) | ((dilation & 0xFF) << 8) | ((operand & 0xFF) << 16)
    return MicroCommand(Cat.DATA_LOAD, (start, stride, pad, pack_hw(*window), pack_hw(*fmap), channels, flags))


def data_store(start, fmap):
    return MicroCommand(Cat.DATA_STORE, (start, pack_hw(*fmap)))


def func_set(func, pre, mid, final, slice_loop, iterations, wide_out=False):
    return MicroCommand(Cat.FUNC_SET, (func, pre, mid, final, int(slice_loop), iterations, int(wide_out)))


def scalar(slot, value, aux=0):
    return MicroCommand(Cat.SCALAR_VALUE, (slot, value, aux))


def encode_ucmds(cmds) -> bytes:
    return b"".join(c.encode() for c in cmds)


def decode_ucmds(blob: bytes) -> list[MicroCommand]:
    if len(blob) % UCMD_RECORD.size:
        raise ValueError("ucmd stream length is not a whole number of records")
    return [MicroCommand.decode(blob[i:i + UCMD_RECORD.size]) for i in range(0, len(blob), UCMD_RECORD.size)]


def disassemble(cmds) -> str:
    lines = []
    for c in cmds:
        o = c.operands
        if c.category == Cat.DATA_LOAD:
            lines.append(f"DataLoad  StartAddr={o[0]} Stride={o[1]} Pad={o[2]} WindowSize={unpack_hw(o[3])} "
                         f"FeatureMapSize={unpack_hw(o[4])} ChannelNum={o[5]} lshift={o[6] & 0xFF} "
                         f"dilation={(o[6] >> 8) & 0xFF} operand={(o[6] >> 16) & 0xFF}")
        elif c.category == Cat.DATA_STORE:
            lines.append(f"DataStore StartAddr={o[0]} FeatureMapSize={unpack_hw(o[1])}")
        elif c.category == Cat.FUNC_SET:
            lines.append(f"FuncSet   func={Func(o[0]).name} pre={Pre(o[1]).name} mid={Mid(o[2]).name} "
                         f"final={Final(o[3]).name} slice_loop={o[4]} iterations={o[5]} wide_out={o[6]}")
        else:
            lines.append(f"Scalar    slot={Slot(o[0]).name} value={_signed(o[1])} aux={_signed(o[2])}")
    return "\n".join(lines)


# ------------------------------------------------------------------- plans

@dataclass
class SuStep:
    node: str
    kind: LayerKind
    chain: FusionChain
    in_tensor: str
    in_shape: TensorShape          # before upsampling
    conv_shape: TensorShape        # map the SUs actually sweep (after upsampling)
    out_shape: TensorShape
    kernel: tuple[int, int]
    stride: int
    padding: int
    dilation: int
    groups: int
    upsample: int
    c_in_g: int
    c_out_g: int
    tiles: TilePlan
    slices: SlicePlan
    rowmap: RowMap
    np_: int | None
    pieces: list[Piece] | None
    fu: int                        # kernels per weight bank (1 unless 1x1 fusion)
    passes: list[tuple[int, int]]  # (first out channel within group, fu for the pass)
    in_frac: int
    w_frac: int
    out_frac: int | None           # None: stays at accumulator precision
    branch_frac: int | None = None
    unit: str = "SU"

    @property
    def output(self) -> str:
        return self.chain.members[-1]

    @property
    def window_len(self) -> int:
        return self.rowmap.length

    @property
    def acc_frac(self) -> int:
        f = self.in_frac + self.w_frac
        if self.chain.eltwise and self.branch_frac is not None:
            f = max(f, self.branch_frac)
        return f

    def row_utilization(self, m: int) -> Fraction:
        return Fraction(self.rowmap.rows_used, m)

    def macs(self) -> int:
        o = self.out_shape
        return o.c * o.h * o.w * self.c_in_g * self.kernel[0] * self.kernel[1]   # per image


@dataclass
class FpuStep:
    node: str
    kind: LayerKind
    inputs: tuple[str, ...]
    in_shape: TensorShape
    out_shape: TensorShape
    ucmds: list[MicroCommand]
    in_fracs: tuple[int | None, ...]
    out_frac: int | None
    in_wide: bool = False
    unit: str = "FPU"

    @property
    def output(self):
        return self.node

    def macs(self) -> int:
        if self.kind != LayerKind.DEPTHWISE:
            return 0
        o = self.out_shape
        k = self.ucmd_window()
        return o.c * o.h * o.w * k[0] * k[1]

    def ucmd_window(self):
        for c in self.ucmds:
            if c.category == Cat.DATA_LOAD:
                return unpack_hw(c.operands[3])
        return (1, 1)


@dataclass
class ExecutionPlan:
    graph: ModelGraph
    hw: HwConfig
    steps: list
    formats: dict
    scalars: dict
    fuse: bool = True

    def step_for(self, node_id):
        for s in self.steps:
            if s.node == node_id or (isinstance(s, SuStep) and node_id in s.chain.members):
                return s
        raise KeyError(node_id)

    def dump(self) -> str:
        lines = [f"plan {self.graph.name} fuse={int(self.fuse)} engines={self.hw.num_engines} "
                 f"sus={self.hw.sus_per_engine} m={self.hw.m} n={self.hw.n}"]
        for s in self.steps:
            if isinstance(s, SuStep):
                c = s.chain
                lines.append(
                    f"SU  {s.node} kind={s.kind.value} in={s.in_tensor}:{s.in_shape} out={s.output}:{s.out_shape} "
                    f"k={s.kernel[0]}x{s.kernel[1]} s={s.stride} p={s.padding} d={s.dilation} g={s.groups} "
                    f"up={s.upsample} np={s.np_ or '-'} fu={s.fu} passes={len(s.passes)} slices={len(s.slices)} "
                    f"tiles={len(s.tiles.tiles)} L={s.window_len} rows={s.rowmap.rows_used}/{self.hw.m} "
                    f"fmt={s.in_frac}+{s.w_frac}->{'wide' if s.out_frac is None else s.out_frac} "
                    f"chain={'+'.join(c.members)} stages={''.join('1' if e else '0' for e in c.enables())}"
                    + (f" branch={c.branch}" if c.branch else ""))
                for t in s.tiles.tiles:
                    lines.append(f"    tile oc0={t.out_col0} oc={t.out_cols} ic0={t.in_col0} ic={t.in_cols} "
                                 f"rows={t.in_rows}->{t.out_rows} halo={t.halo} bc_rows={t.bc_rows}")
            else:
                lines.append(f"FPU {s.node} kind={s.kind.value} in={','.join(s.inputs)}:{s.in_shape} "
                             f"out={s.out_shape} fmt={s.in_fracs}->{'wide' if s.out_frac is None else s.out_frac}")
                lines.extend("    " + ln for ln in disassemble(s.ucmds).splitlines())
        return "\n".join(lines) + "\n"

    def summary_rows(self):
        rows = []
        for s in self.steps:
            if isinstance(s, SuStep):
                rows.append({"node": s.node, "unit": "SU", "chain": "+".join(s.chain.members),
                             "np": s.np_, "fu": s.fu, "passes": len(s.passes), "slices": len(s.slices),
                             "tiles": len(s.tiles.tiles), "groups": s.groups})
            else:
                rows.append({"node": s.node, "unit": "FPU", "chain": s.node, "np": None, "fu": None,
                             "passes": None, "slices": None, "tiles": None, "groups": None})
        return rows


# ------------------------------------------------------------------ lowering

def quantize_scalar(x: float) -> tuple[int, int]:
    q = choose_qformat([x])
    return quantize(x, q), q.frac_bits


def _su_step(node: LayerNode, graph: ModelGraph, hw: HwConfig, chain: FusionChain,
             formats: dict, in_frac: int, min_tiles: int = 1) -> SuStep:
    in_shape = graph.shape_of(node.inputs[0])
    conv_shape = in_shape
    if node.kind == LayerKind.CONV_TRANSPOSED:
        conv_shape = TensorShape(in_shape.n, in_shape.c, in_shape.h * node.upsample, in_shape.w * node.upsample)
    c_in_g = in_shape.c // node.groups
    c_out_g = node.out_channels // node.groups
    ky, kx = node.kernel
    taps = ky * kx
    np_ = pieces = None
    if ky == kx and ky > 1 and _partition_pays(ky, hw.m, c_in_g):
        np_ = compute_np(ky, hw.m, c_in_g)
        pieces = partition_first_layer(ky, np_, c_in_g)
        rowmap = pieces_rowmap(hw.m, pieces)
        slices = SlicePlan([(0, c_in_g)])
    else:
        slices = plan_slices(c_in_g, hw)
        rowmap = standard_rowmap(hw.m, min(c_in_g, hw.m), taps)
    if taps == 1 and np_ is None:
        fu = compute_fu(c_out_g, hw.n, hw.weight_cache_depth)
        per = split_fu(fu, hw.weight_cache_depth)
        passes, base = [], 0
        for f in per:
            passes.append((base, f))
            base += f * hw.lanes
    else:
        fu = 1
        passes = [(c, 1) for c in range(0, c_out_g, hw.lanes)]
    chain.slice_add = len(slices) > 1
    slots = node.groups * sum(f for _, f in passes)
    w_frac = graph.weights[node.id].qformat.frac_bits
    branch_frac = _frac_of(graph, formats, chain.branch) if chain.branch else None
    return SuStep(
        node=node.id, kind=node.kind, chain=chain, in_tensor=node.inputs[0], in_shape=in_shape,
        conv_shape=conv_shape, out_shape=node.out_shape, kernel=node.kernel, stride=node.stride,
        padding=node.padding, dilation=node.dilation, groups=node.groups, upsample=node.upsample,
        c_in_g=c_in_g, c_out_g=c_out_g, tiles=plan_tiles(conv_shape, node, hw, slots, min_tiles), slices=slices,
        rowmap=rowmap, np_=np_, pieces=pieces, fu=fu, passes=passes, in_frac=in_frac, w_frac=w_frac,
        out_frac=formats[chain.members[-1]] if chain.requantize else None, branch_frac=branch_frac)


def ob_elements(hw: HwConfig) -> int:
    """Element capacity of all OB sets of one engine seen as one flat FPU address space."""
    return hw.sus_per_engine * hw.lanes * hw.ob_bytes_per_component // 2


def emit_ucmds(node: LayerNode, in_shapes, in_fracs, out_frac, hw: HwConfig, scalars=None,
               weights_frac=None, in_wide=False) -> list[MicroCommand]:
    """FPU program for one filter-like or pointwise node.

    Source operands are laid out from address 0 in load order, the destination
    follows them; addresses count elements of the flat OB space.
    """
    x = in_shapes[0]
    kind = node.kind
    o = node.out_shape
    iters = -(-x.c // hw.lanes)
    loop = x.c > hw.lanes
    fx = in_fracs[0]
    wide_out = out_frac is None
    cmds = []
    window = node.kernel if kind.is_windowed else (1, 1)
    stride = node.stride if kind.is_windowed else 1
    pad = node.padding if kind.is_windowed else 0
    dil = node.dilation if kind == LayerKind.DEPTHWISE else 1

    def final_shift(acc_frac):
        if wide_out:
            return []
        return [scalar(Slot.FINAL, 1, acc_frac - out_frac)]

    if kind == LayerKind.MAXPOOL:
        cmds += [func_set(Func.MAXPOOL, Pre.BYPASS, Mid.COMPARE, Final.BYPASS, loop, iters)]
    elif kind == LayerKind.AVGPOOL:
        size = window[0] * window[1]
        mult, shift = avgpool_reciprocal(size)
        cmds += [func_set(Func.AVGPOOL, Pre.BYPASS, Mid.ADD, Final.RECIPROCAL, loop, iters),
                 scalar(Slot.FINAL, mult, shift), scalar(Slot.DIVISOR, size)]
    elif kind in (LayerKind.RELU, LayerKind.RELU6):
        f = Func.RELU if kind == LayerKind.RELU else Func.RELU6
        keep = (not wide_out) and out_frac == fx and not in_wide
        cmds += [func_set(f, Pre.BYPASS, Mid.COMPARE, Final.BYPASS if keep else Final.SHIFT, loop, iters, wide_out),
                 scalar(Slot.CLAMP_LO, 0)]
        if kind == LayerKind.RELU6:
            cmds.append(scalar(Slot.CLAMP_HI, min(6 << fx, 0x7FFF)))
        if not keep:
            cmds += final_shift(fx)
    elif kind == LayerKind.LINEAR:
        a, fa, b, fb = scalars
        f = max(fa + fx, fb)
        cmds += [func_set(Func.LINEAR, Pre.SCALAR, Mid.ADD, Final.SHIFT, loop, iters, wide_out),
                 scalar(Slot.PRE, a, f - fa - fx), scalar(Slot.BIAS, b, f - fb)] + final_shift(f)
    elif kind == LayerKind.ADD:
        f = max(in_fracs)
        cmds += [func_set(Func.ADD, Pre.BYPASS, Mid.ADD, Final.BYPASS if wide_out else Final.SHIFT,
                          loop, iters, wide_out)] + final_shift(f)
    elif kind == LayerKind.DEPTHWISE:
        f = fx + weights_frac
        cmds += [func_set(Func.DEPTHWISE, Pre.WEIGHT, Mid.ADD, Final.BYPASS if wide_out else Final.SHIFT,
                          loop, iters, wide_out)] + final_shift(f)
    elif kind == LayerKind.QUANTIZE:
        cmds += [func_set(Func.QUANTIZE, Pre.BYPASS, Mid.BYPASS, Final.SHIFT, loop, iters, wide_out)]
        cmds += final_shift(fx)
    else:
        raise LoweringError(f"{node.id}: {kind.value} is not an FPU operator")
    addr = 0
    if kind == LayerKind.ADD:
        f = max(in_fracs)
        for i, (s, fr) in enumerate(zip(in_shapes, in_fracs)):
            cmds.append(data_load(addr, 1, 0, (1, 1), (s.h, s.w), s.c, lshift=f - fr, operand=i))
            addr += s.c * s.h * s.w
    else:
        cmds.append(data_load(addr, stride, pad, window, (x.h, x.w), x.c, dilation=dil))
        addr += x.c * x.h * x.w
    total = addr + o.c * o.h * o.w
    if total > ob_elements(hw):
        raise LoweringError(f"{node.id}: FPU operands need {total} elements, OB holds {ob_elements(hw)}")
    cmds.append(data_store(addr, (o.h, o.w)))
    return cmds


def avgpool_reciprocal(size: int) -> tuple[int, int]:
    """Reciprocal constant and shift for dividing window sums by ``size``.

    The final multiplier evaluates floor(u * mult >> shift) on the
    non-negative, rounding-biased numerator u = 2*sum + size + offset; the
    shift is the smallest one for which that floor is exact over every sum
    int16 inputs can produce (see ``fpu.reciprocal_divide``).
    """
    span = 2 * size * (1 << 16) + 2 * size  # u ranges over [0, span)
    d = 2 * size
    for shift in range(1, 64):
        mult = -(-(1 << shift) // d)
        # floor(u*mult/2^shift) == floor(u/d) for all 0 <= u < span iff err*span < 2^shift
        if (mult * d - (1 << shift)) * span < (1 << shift) and span * mult < (1 << 63):
            return mult, shift
    raise LoweringError(f"no reciprocal for window size {size}")


def lower_layer(node: LayerNode, hw: HwConfig, graph: ModelGraph | None = None, formats=None,
                chain: FusionChain | None = None, scalars=None, min_tiles: int = 1):
    """Lower one node. SU convs get an :class:`SuStep`, the rest an :class:`FpuStep`."""
    if node.kind == LayerKind.LRN:
        raise NotImplementedError(f"{node.id}: lrn is not supported on this accelerator")
    if graph is None:
        raise LoweringError("lower_layer needs the graph for shapes and weights")
    formats = formats or {}
    in_fracs = tuple(_frac_of(graph, formats, i) for i in node.inputs)
    if node.kind in SU_KINDS:
        chain = chain or FusionChain(members=[node.id])
        return _su_step(node, graph, hw, chain, formats, in_fracs[0], min_tiles)
    if node.kind not in FPU_KINDS:
        raise LoweringError(f"{node.id}: no lowering for {node.kind.value}")
    in_shapes = [graph.shape_of(i) for i in node.inputs]
    in_fracs_eff = tuple(f if f is not None else _wide_frac(graph, formats, i) for f, i in
                         zip(in_fracs, node.inputs))
    w_frac = graph.weights[node.id].qformat.frac_bits if node.kind == LayerKind.DEPTHWISE else None
    sc = (scalars or {}).get(node.id)
    in_wide = any(f is None for f in in_fracs)
    cmds = emit_ucmds(node, in_shapes, in_fracs_eff, formats.get(node.id), hw, sc, w_frac, in_wide)
    return FpuStep(node.id, node.kind, node.inputs, in_shapes[0], node.out_shape, cmds, in_fracs_eff,
                   formats.get(node.id), in_wide=in_wide)


def _frac_of(graph, formats, tensor_id):
    if tensor_id == graph.input_id:
        return graph.input_frac
    return formats.get(tensor_id, 0)


def _wide_frac(graph, formats, tensor_id):
    """Fraction width of an unrounded intermediate (accumulator domain)."""
    node = graph.node(tensor_id)
    if node.kind in SU_KINDS or node.kind == LayerKind.DEPTHWISE:
        src = _frac_of(graph, formats, node.inputs[0])
        if src is None:
            src = _wide_frac(graph, formats, node.inputs[0])
        return src + graph.weights[node.id].qformat.frac_bits
    if node.kind == LayerKind.ADD:
        fr = []
        for i in node.inputs:
            f = _frac_of(graph, formats, i)
            fr.append(_wide_frac(graph, formats, i) if f is None else f)
        return max(fr)
    src = _frac_of(graph, formats, node.inputs[0])
    return _wide_frac(graph, formats, node.inputs[0]) if src is None else src


def calibration_input(graph: ModelGraph, seed: int | None = None):
    from .fixedpoint import QTensor, quantize_array
    rng = np.random.default_rng([graph.seed if seed is None else seed, 0xCA11B])
    x = rng.uniform(-1.0, 1.0, size=graph.input_shape.as_tuple())
    q = QFormat(graph.input_frac)
    return QTensor(quantize_array(x, q), q)


def lower_model(graph: ModelGraph, hw: HwConfig, fuse: bool = True, calib_input=None,
                pipeline: bool = True) -> ExecutionPlan:
    """Compile a whole graph: fusion chains, formats, per-node lowering."""
    from . import golden

    for n in graph.nodes:
        if n.kind == LayerKind.LRN:
            raise NotImplementedError(f"{n.id}: lrn is not supported on this accelerator")
    chains = find_chains(graph)
    wide = {m for ch in chains.values() for m in ch[:-1]}
    scalars = {n.id: quantize_scalar(n.scale) + quantize_scalar(n.shift)
               for n in graph.nodes if n.kind == LayerKind.LINEAR}
    if calib_input is None:
        calib_input = calibration_input(graph)
    _, _, formats = golden.ref_run_model(graph, calib_input, wide=wide, scalars=scalars)
    tail_of = {ch[-1]: conv for conv, ch in chains.items()}
    absorbed = {m for ch in chains.values() for m in ch[1:]}
    steps = []
    for node in topo_order(graph):
        if node.id in chains and len(chains[node.id]) > 1:
            continue  # emitted at its tail
        if node.id in absorbed and node.id not in tail_of:
            continue
        if node.id in tail_of or node.id in chains:
            conv = graph.node(tail_of.get(node.id, node.id))
            members = chains[conv.id]
            tail = members[-1] if fuse else conv.id
            chain = _chain_for(graph, members) if fuse else \
                FusionChain(requantize=len(members) == 1, members=[conv.id])
            step = lower_layer(conv, hw, graph, formats, chain, scalars)
            mt = _pipeline_tiles(graph, tail) if pipeline else 1
            if mt > 1:
                split = lower_layer(conv, hw, graph, formats, chain, scalars, mt)
                cons = lower_layer(graph.consumers(tail)[0], hw, graph, formats, scalars=scalars)
                if _split_pays(step, split, cons, hw):
                    step = split
            steps.append(step)
            if not fuse:
                for mid in members[1:]:
                    steps.append(lower_layer(graph.node(mid), hw, graph, formats, scalars=scalars))
            continue
        steps.append(lower_layer(node, hw, graph, formats, scalars=scalars))
    return ExecutionPlan(graph, hw, steps, formats, scalars, fuse)


PIPELINE_TILES = 4


def _pipeline_tiles(graph, out_id) -> int:
    """Split an SU layer into several tiles when a windowed FPU layer consumes it,
    so the FPU can work on finished tiles while the SUs continue."""
    cons = graph.consumers(out_id)
    if out_id in graph.outputs or len(cons) != 1 or cons[0].kind not in FPU_KINDS:
        return 1
    if not cons[0].kind.is_windowed or graph.node(out_id).out_shape.w < 2 * PIPELINE_TILES:
        return 1
    return PIPELINE_TILES


def _split_pays(whole, split, consumer, hw) -> bool:
    """Keep the tile split only if SU-to-FPU overlap beats the extra weight reloads."""
    from .fpu import pipelined_elapsed
    from .runtime import fpu_stats, su_timeline

    f = fpu_stats(consumer, hw).compute
    a = su_timeline(whole, hw).total + f
    ts = su_timeline(split, hw)
    n = max(1, len(ts.tile_cycles))
    b = pipelined_elapsed(ts.tile_cycles, [f // n] * n) + (ts.total - sum(ts.tile_cycles))
    return b < a


def _chain_for(graph, members) -> FusionChain:
    ch = FusionChain(members=list(members))
    prev = members[0]
    for mid in members[1:]:
        node = graph.node(mid)
        if node.kind == LayerKind.ADD:
            ch.eltwise = True
            ch.branch = node.inputs[1] if node.inputs[0] == prev else node.inputs[0]
        elif node.kind == LayerKind.RELU:
            ch.relu = True
        prev = mid
    return ch
