"""Engine driver: runs an ExecutionPlan on the simulated SUs, BCs, OBs and FPU.

Values and timing are computed separately. The functional path moves real
data through the IB, broadcast caches, EPE arrays, cascades and OB sets. The
timing path replays the same schedule on a cycle timeline (it depends only on
layer geometry), which gives compute, stall, exposed weight-load and drain
cycles per layer.

Timeline rules:
  * one IB port word (one pixel of one 32-channel group) per logic cycle feeds
    all BCs at once; a row can only overwrite a BC slot whose row is no longer
    under any window of the current output row;
  * an SU window costs L * fu cycles and may start once the last pixel it
    needs has arrived; the SUs of an engine re-synchronise every output row;
  * each sweep (group x pass x slice) loads weights into the inactive bank
    over the weight port, starting once the bank's previous sweep is done; the
    first sweep of a layer is loaded while the previous step runs;
  * a tile's outputs are assembled into the IB while the next tile computes;
    the last assembly is exposed.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import QFormat, QTensor
from .fpu import Task, decode, fpu_cycles, pipelined_elapsed, run_filter_op, run_parallel_with_su
from .golden import Wide
from .hwconfig import HwConfig
from .mapper import ExecutionPlan, FpuStep, SuStep, build_dispatch_schedule, ob_elements
from .memsys import (BroadcastCache, InputBuffer, OutputBufferSet, assemble_read, bc_fill, ib_row_cycles,
                     new_ledger)
from .model_ir import LayerKind
from .postproc import apply_cascade, configure_cascade
from .su_engine import SuState, load_kernel_groups, run_layer_slice, weight_load_cycles


class SimulationError(RuntimeError):
    pass


# ------------------------------------------------------------------ timing

@dataclass
class LayerStats:
    node: str
    unit: str
    compute: int = 0
    stall: int = 0
    weight_exposed: int = 0
    drain: int = 0
    estimate: int = 0
    macs: int = 0
    sweeps: int = 0
    tiles: int = 0
    rows_used: int | None = None
    m: int | None = None
    fu: int | None = None
    np_: int | None = None
    preload: int = 0
    tile_cycles: list = field(default_factory=list)
    elapsed: int = 0        # after overlap with a neighbouring step

    @property
    def actual(self) -> int:
        """Array busy time: windows plus BC stalls."""
        return self.compute + self.stall

    @property
    def total(self) -> int:
        """Layer latency: also counts exposed weight loads and the final assembly."""
        return self.compute + self.stall + self.weight_exposed + self.drain


def _row_span(oy, stride, pad, ky, dil, h):
    """Lowest and highest real input rows under output row ``oy`` (None if all padding)."""
    rows = [oy * stride - pad + i * dil for i in range(ky)]
    rows = [r for r in rows if 0 <= r < h]
    return (rows[0], rows[-1]) if rows else None


def sweep_list(step: SuStep):
    return [(g, base, fu, si, c0, c1) for g in range(step.groups) for base, fu in step.passes
            for si, (c0, c1) in enumerate(step.slices.ranges)]


def estimate_cycles(step: SuStep, hw: HwConfig) -> int:
    """Analytic cycles: per tile, rows x ceil(positions / SUs) x L x fu, per sweep."""
    per_sweep = sum(t.out_rows * -(-t.out_cols // hw.sus_per_engine) for t in step.tiles.tiles)
    return per_sweep * step.window_len * sum(f for _, f in step.passes) * len(step.slices) * step.groups


def su_timeline(step: SuStep, hw: HwConfig, credit: int | None = None) -> LayerStats:
    """Cycle timeline of one SU step; ``credit`` is how long the weight port had
    to preload the first sweep (None: preloaded before the run)."""
    P = hw.sus_per_engine
    H, W = step.conv_shape.h, step.conv_shape.w
    ky, kx = step.kernel
    s, pad, d = step.stride, step.padding, step.dilation
    kxe = (kx - 1) * d + 1
    ho = step.out_shape.h
    L = step.window_len
    lanes_ib = hw.ib_port_bits // 16
    spans = [_row_span(oy, s, pad, ky, d, H) for oy in range(ho)]
    rows_max = max((sp[1] for sp in spans if sp), default=-1)
    # row r leaves the BC after output row release_oy[r]
    release_oy = {}
    for r in range(rows_max + 1):
        nxt = next((oy for oy in range(ho) if max(0, oy * s - pad) > r), None)
        release_oy.setdefault(-1 if nxt is None else nxt - 1, []).append(r)

    st = LayerStats(step.node, "SU", macs=step.macs(), tiles=len(step.tiles.tiles), rows_used=step.rowmap.rows_used,
                    m=hw.m, fu=step.fu, np_=step.np_, estimate=estimate_cycles(step, hw))
    clock = 0
    port_free = 0
    wport_free = 0
    asm_free = 0
    loads_start, loads_release = [], []
    sweep_end = []
    q = 0
    tile_start = 0
    for tile in step.tiles.tiles:
        col_lo = max(0, tile.in_col0)
        col_hi = min(W, tile.in_col0 + (tile.out_cols - 1) * s + kxe)
        shares = build_dispatch_schedule(tile.out_cols, P, s).positions
        need_col = [min(col_hi - 1, tile.in_col0 + ox * s + kxe - 1) - col_lo for ox in range(tile.out_cols)]
        R = tile.bc_rows
        for g, base, fu, si, c0, c1 in sweep_list(step):
            ch0 = g * step.c_in_g + c0
            ch1 = g * step.c_in_g + c1
            fill = ib_row_cycles(ch0, ch1, col_hi - col_lo, lanes_ib)
            cost = L * fu
            wdur = weight_load_cycles(fu, hw.m, hw.lanes, L, hw.weight_port_bytes)
            if q == 0:
                if credit is None:
                    st.preload = wdur
                    ready = 0
                else:
                    ready = clock + max(0, wdur - credit)
                wport_free = ready
            else:
                bank_free = sweep_end[q - 2] if q >= 2 else 0
                ready = max(wport_free, bank_free) + wdur
                wport_free = ready
            first_load = len(loads_start)

            def ensure(row):
                nonlocal port_free
                while len(loads_start) - first_load <= row:
                    i = len(loads_start)
                    rel = 0
                    if i - R >= 0:
                        rel = loads_release[i - R]
                        if rel is None:
                            raise SimulationError(f"{step.node}: BC deadlock at load {i} (capacity {R})")
                    t0 = max(port_free, rel)
                    loads_start.append(t0)
                    loads_release.append(None)
                    port_free = t0 + fill

            if clock < ready:
                st.weight_exposed += ready - clock
                clock = ready
            for oy in range(ho):
                sp = spans[oy]
                start = clock
                ends = []
                for share in shares:
                    t = start
                    for ox in share:
                        avail = 0
                        if sp is not None:
                            ensure(sp[1])
                            avail = loads_start[first_load + sp[1]] + ib_row_cycles(ch0, ch1, max(need_col[ox], -1) + 1, lanes_ib)
                        t = max(t, avail) + cost
                    ends.append(t)
                row_end = max([start] + ends)
                busy = max(len(sh) for sh in shares) * cost
                st.compute += busy
                st.stall += row_end - start - busy
                clock = row_end
                for r in release_oy.get(oy, ()):
                    if first_load + r < len(loads_release):
                        loads_release[first_load + r] = clock
                    else:  # never loaded ahead; freed as soon as it would arrive
                        ensure(r)
                        loads_release[first_load + r] = clock
            for i in range(first_load, len(loads_release)):
                if loads_release[i] is None:
                    loads_release[i] = clock
            sweep_end.append(clock)
            q += 1
        st.tile_cycles.append(clock - tile_start)
        tile_start = clock
        asm = -(-2 * step.out_shape.c * ho * tile.out_cols // hw.assemble_port_bytes)
        asm_free = max(asm_free, clock) + asm
    st.drain = asm_free - clock
    st.sweeps = q
    if st.tile_cycles:
        st.tile_cycles[-1] += st.drain
    return st


def fpu_stats(step: FpuStep, hw: HwConfig) -> LayerStats:
    c = fpu_cycles(decode(step.ucmds))
    return LayerStats(step.node, "FPU", compute=c, macs=step.macs(), estimate=c, tiles=1)


@dataclass
class PlanTiming:
    layers: list                  # LayerStats per step
    image_cycles: int             # one image, steps overlapped where allowed
    setup: int                    # first-layer weight preload before the first image
    records: list

    def row(self, node):
        return next(s for s in self.layers if s.node == node)


def plan_timing(plan: ExecutionPlan, credit_first: int | None = None) -> PlanTiming:
    hw = plan.hw
    layers, records = [], []
    prev_elapsed = credit_first
    for st in plan.steps:
        if isinstance(st, SuStep):
            ls = su_timeline(st, hw, prev_elapsed)
        else:
            ls = fpu_stats(st, hw)
        ls.elapsed = ls.total
        layers.append(ls)
        prev_elapsed = ls.total
    # pairwise overlap of an SU step with the FPU step after it
    i = 0
    while i < len(plan.steps) - 1:
        a, b = plan.steps[i], plan.steps[i + 1]
        if isinstance(a, SuStep) and isinstance(b, FpuStep):
            la, lb = layers[i], layers[i + 1]
            if a.output in b.inputs:
                if len(la.tile_cycles) > 1:
                    n = len(la.tile_cycles)
                    chunks = [lb.total * (k + 1) // n - lb.total * k // n for k in range(n)]
                    elapsed = pipelined_elapsed(la.tile_cycles, chunks)
                    lb.elapsed = elapsed - la.total
                    records.append(f"{b.node} pipelined with {a.node} over {n} tiles")
                    i += 2
                    continue
            else:
                res = run_parallel_with_su(Task(b.node, lb.total, frozenset(b.inputs), frozenset({b.output})),
                                           Task(a.node, la.total, frozenset({a.in_tensor}), frozenset({a.output})))
                lb.elapsed = res.elapsed - la.total
                records.extend(res.records or [f"{b.node} overlapped with {a.node}"])
                i += 2
                continue
        i += 1
    setup = next((ls.preload for ls in layers if ls.unit == "SU"), 0)
    return PlanTiming(layers, sum(ls.elapsed for ls in layers), setup, records)


# -------------------------------------------------------------- functional

@dataclass
class Value:
    data: np.ndarray   # (C, H, W) int64
    frac: int
    wide: bool

    def as_oracle(self):
        if self.wide:
            return Wide(self.data[None].astype(np.int64), self.frac)
        return QTensor(self.data[None].astype(np.int16), QFormat(self.frac))


def sweep_weights(w: np.ndarray, step: SuStep, g: int, base: int, fu: int, c0: int, c1: int, hw: HwConfig):
    """(fu, m, 2n, L) weight block for one sweep, zero for idle rows and padded groups."""
    cog = step.c_out_g
    co, cig = w.shape[0], w.shape[1]
    wf = w.reshape(co, cig, -1)
    oc = base + np.arange(fu)[:, None] * hw.lanes + np.arange(hw.lanes)[None, :]    # (fu, 2n)
    ok_o = oc < cog
    ch = step.rowmap.channel + c0
    ok_c = (step.rowmap.channel >= 0) & (ch < c1)
    tp = np.where(ok_c, step.rowmap.tap, 0)
    chs = np.where(ok_c, ch, 0)
    blk = wf[g * cog + np.where(ok_o, oc, 0)][:, :, chs, tp]     # (fu, 2n, m, L)
    blk = blk * ok_o[:, :, None, None] * ok_c[None, None]
    return blk.transpose(0, 2, 1, 3).astype(np.int64)


class Engine:
    def __init__(self, plan: ExecutionPlan, index: int = 0, workers: int = 1, ledger=None):
        self.plan = plan
        self.hw = hw = plan.hw
        self.index = index
        self.workers = workers
        self.ledger = ledger or new_ledger(hw)
        self.lock = threading.Lock()
        self.ib = InputBuffer(hw, self.ledger)
        self.sus = [SuState(hw.m, hw.n, hw.weight_cache_depth, index=s) for s in range(hw.sus_per_engine)]
        self.obs = [OutputBufferSet(hw, self.ledger) for _ in range(hw.sus_per_engine)]
        self.fpu_mem = np.zeros(ob_elements(hw), dtype=np.int64)
        self.values: dict[str, Value] = {}

    # -- helpers
    def _put(self, tid, data, frac, wide):
        self.values[tid] = Value(data, frac, wide)
        self.ib.store(tid, data, frac, wide)

    def run(self, x: QTensor) -> dict:
        g = self.plan.graph
        if x.shape[0] != 1 or x.shape[1:] != g.input_shape.as_tuple()[1:]:
            raise SimulationError(f"image shape {x.shape} does not match input {g.input_shape.as_tuple()[1:]}")
        self.values = {}
        self._put(g.input_id, x.data[0].astype(np.int64), x.qformat.frac_bits, False)
        for step in self.plan.steps:
            try:
                if isinstance(step, SuStep):
                    self._run_su(step)
                else:
                    self._run_fpu(step)
            except SimulationError:
                raise
            except Exception as e:
                raise SimulationError(f"{type(e).__module__}: layer {step.node}: {e}") from e
        return {k: v for k, v in self.values.items() if k != g.input_id}

    # -- SU layers
    def _run_su(self, step: SuStep):
        hw = self.hw
        P = hw.sus_per_engine
        src = self.values[step.in_tensor]
        src_id = step.in_tensor
        if step.kind == LayerKind.CONV_TRANSPOSED:
            u = step.upsample
            c, h, w = src.data.shape
            up = np.zeros((c, h * u, w * u), dtype=np.int64)
            up[:, ::u, ::u] = src.data
            src_id = f"{step.in_tensor}@up{u}"
            self.ib.store(src_id, up, src.frac)
        weights = self.plan.graph.weights[step.node].data.astype(np.int64)
        co, ho, wo = step.out_shape.c, step.out_shape.h, step.out_shape.w
        H, W = step.conv_shape.h, step.conv_shape.w
        chain = step.chain
        branch = self.values[chain.branch] if chain.eltwise else None
        state = configure_cascade(chain, out_shape=(co, ho, wo), conv_frac=src.frac + step.w_frac,
                                  out_frac=step.out_frac, branch=None if branch is None else branch.data,
                                  branch_frac=None if branch is None else branch.frac)
        out = np.zeros(co * ho * wo, dtype=np.int64)
        spans = [_row_span(oy, step.stride, step.padding, step.kernel[0], step.dilation, H) for oy in range(ho)]
        rows_max = max((sp[1] for sp in spans if sp), default=-1)
        nsl = len(step.slices)
        for tile in step.tiles.tiles:
            shares = build_dispatch_schedule(tile.out_cols, P, step.stride).positions
            nwin = [ho * len(sh) for sh in shares]
            slot = 0
            for g in range(step.groups):
                for base, fu in step.passes:
                    oc = base + np.arange(fu)[:, None] * hw.lanes + np.arange(hw.lanes)[None, :]
                    mask = oc < step.c_out_g
                    meta0 = (g * step.c_out_g + np.minimum(oc, step.c_out_g - 1)) * ho * wo
                    for si, (c0, c1) in enumerate(step.slices.ranges):
                        blk = sweep_weights(weights, step, g, base, fu, c0, c1, hw)
                        wc = 0
                        for su in self.sus:
                            wc = load_kernel_groups(su, blk, fu, hw.weight_port_bytes)
                            su.swap()
                        self.ledger.charge("weight_load", blk.size * 2, wc)   # shared by all SUs
                        ch0, ch1 = g * step.c_in_g + c0, g * step.c_in_g + c1
                        bcs = [BroadcastCache(tile.bc_rows, ch1 - ch0, step.kernel, step.stride, step.padding,
                                              step.dilation, tile.in_col0, W, H, tile.out_cols, ho, su=s, sus=P)
                               for s in range(P)]
                        nxt = 0
                        for oy in range(ho):
                            sp = spans[oy]
                            if sp is not None:
                                while nxt <= sp[1]:
                                    bc_fill(bcs, self.ib, src_id, ch0, ch1, [nxt])
                                    nxt += 1
                            while nxt <= rows_max and all(b.can_load() for b in bcs):
                                bc_fill(bcs, self.ib, src_id, ch0, ch1, [nxt])
                                nxt += 1
                            self._su_row(step, state, bcs, shares, nwin, slot, fu, meta0, mask, tile, si, nsl, wo)
                    slot += fu
            for ob in self.obs:
                ob.swap()
            cols = np.arange(tile.out_col0, tile.out_col0 + tile.out_cols)
            expected = (np.arange(co)[:, None, None] * ho * wo + np.arange(ho)[None, :, None] * wo
                        + cols[None, None, :]).reshape(-1)
            assemble_read(self.obs, out, expected, self.ib, hw)
        out = out.reshape(co, ho, wo)
        self._put(step.output, out, state.out_frac if state.out_frac is not None else state.acc_frac,
                  state.out_frac is None)

    def _su_row(self, step, state, bcs, shares, nwin, slot, fu, meta0, mask, tile, si, nsl, wo):
        fidx = np.arange(fu)

        def work(s):
            su, ob, share = self.sus[s], self.obs[s], shares[s]
            per = len(share)

            def sink(oy, ox, acc):
                w = oy * per + ox // len(self.sus)
                addrs = (slot + fidx) * nwin[s] + w
                paddrs = fidx * nwin[s] + w
                meta = meta0 + oy * wo + tile.out_col0 + ox
                apply_cascade(acc, state, (addrs, paddrs, meta, mask), ob, si, nsl)

            return run_layer_slice(su, share, bcs[s], step.rowmap, sink)

        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                list(pool.map(work, range(len(self.sus))))
        else:
            for s in range(len(self.sus)):
                work(s)

    # -- FPU layers
    def _run_fpu(self, step: FpuStep):
        desc = decode(step.ucmds, ob_elements(self.hw))
        mem = self.fpu_mem
        mem[:] = 0
        for ld in desc.loads:
            v = self.values[step.inputs[ld.operand]]
            mem[ld.start:ld.start + ld.size] = v.data.reshape(-1)
        w = None
        if step.kind == LayerKind.DEPTHWISE:
            w = self.plan.graph.weights[step.node].data
        run_filter_op(desc, mem, w)
        o = step.out_shape
        out = mem[desc.store.start:desc.store.start + desc.out_size].reshape(o.c, o.h, o.w).copy()
        wide = step.out_frac is None
        self.ledger.charge("fpu_read", 2 * sum(ld.size for ld in desc.loads))
        self.ledger.charge("fpu_write", 2 * out.size)
        self._put(step.output, out, _fpu_out_frac(step, self.plan) if wide else step.out_frac, wide)


def _fpu_out_frac(step: FpuStep, plan: ExecutionPlan) -> int:
    if step.kind == LayerKind.ADD:
        return max(step.in_fracs)
    if step.kind == LayerKind.DEPTHWISE:
        return step.in_fracs[0] + plan.graph.weights[step.node].qformat.frac_bits
    if step.kind == LayerKind.LINEAR:
        a, fa, b, fb = plan.scalars[step.node]
        return max(fa + step.in_fracs[0], fb)
    return step.in_fracs[0]


# ------------------------------------------------------------------- batch

@dataclass
class SimResult:
    outputs: list            # per image: {output id: QTensor | Wide}
    tensors: list            # per image: {tensor id: Value}
    timing: PlanTiming
    engine_cycles: list      # per engine
    engine_images: list      # per engine: image indices
    ledger: object

    @property
    def latency_cycles(self) -> int:
        return max(self.engine_cycles)

    def batch_output(self, tid: str):
        """Tensor ``tid`` of every image stacked along N, as the oracle returns it."""
        vals = [t[tid].as_oracle() for t in self.tensors]
        data = np.concatenate([v.data for v in vals])
        if isinstance(vals[0], Wide):
            return Wide(data, vals[0].frac)
        return QTensor(data, vals[0].qformat)


def split_batch(x: QTensor) -> list:
    return [QTensor(x.data[i:i + 1], x.qformat) for i in range(x.shape[0])]


def simulate(plan: ExecutionPlan, inputs, workers: int = 1) -> SimResult:
    """Run a batch: image i goes to engine i mod num_engines.

    ``inputs`` is one (N, C, H, W) tensor or a list of single images.
    """
    hw = plan.hw
    if isinstance(inputs, QTensor):
        inputs = split_batch(inputs)
    if not inputs:
        raise SimulationError("empty batch")
    ledger = new_ledger(hw)
    engines = [Engine(plan, e, workers, ledger) for e in range(hw.num_engines)]
    timing = plan_timing(plan)
    last = timing.layers[-1].elapsed
    outputs, tensors = [None] * len(inputs), [None] * len(inputs)
    images = [[] for _ in engines]
    for i, x in enumerate(inputs):
        e = i % hw.num_engines
        vals = engines[e].run(x)
        tensors[i] = vals
        outputs[i] = {o: vals[o].as_oracle() for o in plan.graph.outputs}
        images[e].append(i)
    cycles = []
    for imgs in images:
        if not imgs:
            cycles.append(0)
            continue
        # first image waits for the preload; later ones load it during the previous image's last step
        later = max(0, timing.setup - last)
        cycles.append(timing.setup + len(imgs) * timing.image_cycles + (len(imgs) - 1) * later)
    return SimResult(outputs, tensors, timing, cycles, images, ledger)
