"""Performance reports: peak throughput, per-layer cycle rows, model summary.

The structured report (``RunReport.to_dict``) has stable keys::

    schema        "supertile.run_report/1"
    model, batch, hw{...}
    layers[]      node unit estimate actual total ratio compute stall weight_exposed
                  drain elapsed macs utilization row_util cycles_per_window fu np
                  tiles sweeps verdict
    totals        cycles latency_s fps gops peak_gops utilization macs setup_cycles
                  engine_cycles[]
    peak          tops dsps published_tops published_dsp_note
    reference     published_gops deviation_pct (only when a reference target is given)
    bandwidth     see memsys.ledger_report
    records[]     overlap / serialization notes
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .hwconfig import HwConfig
from .mapper import ExecutionPlan

SCHEMA = "supertile.run_report/1"

# published figures the model is compared against
PUBLISHED_PEAK_TOPS = 4.2
PUBLISHED_DSP_NOTE = "4214/5520"
PUBLISHED_ALEXNET_GOPS = 2335.4


def peak_throughput(hw: HwConfig) -> float:
    """ops/s: one multiply and one add per DSP per EPE cycle."""
    return hw.dsps * 2 * hw.f_epe


def peak_note(hw: HwConfig) -> str:
    tops = peak_throughput(hw) / 1e12
    return (f"peak {tops:.3f} TOP/s = {hw.dsps} DSPs x 2 ops x {hw.f_epe / 1e6:g} MHz; "
            f"published peak {PUBLISHED_PEAK_TOPS} TOP/s; published DSP usage {PUBLISHED_DSP_NOTE} "
            f"vs {hw.dsps} DSPs in the MAC arrays (the difference is outside the EPE arrays)")


@dataclass
class LayerRow:
    node: str
    unit: str
    estimate: int
    actual: int
    total: int
    compute: int
    stall: int
    weight_exposed: int
    drain: int
    elapsed: int
    macs: int
    utilization: float
    row_util: str | None
    cycles_per_window: int | None
    fu: int | None
    np: int | None
    tiles: int
    sweeps: int
    verdict: str | None = None

    @property
    def ratio(self) -> float:
        return self.actual / self.estimate if self.estimate else float("nan")

    def as_dict(self):
        d = dict(self.__dict__)
        d["ratio"] = round(self.ratio, 6) if self.estimate else None
        return d


def layer_cycle_estimate(plan: ExecutionPlan, timing, node: str) -> LayerRow:
    """Analytic estimate next to the simulated cycles for one step.

    ``actual`` is compute plus BC stalls; ``total`` adds exposed weight loads
    and the final tile assembly, and is what latency is built from.
    """
    hw = plan.hw
    step = plan.step_for(node)
    ls = timing.row(step.node)
    su = step.unit == "SU"
    per_cycle = hw.sus_per_engine * hw.m * hw.n * 2
    util = ls.macs / (ls.total * per_cycle) if ls.total and su else 0.0
    return LayerRow(
        node=step.node, unit=step.unit, estimate=ls.estimate, actual=ls.actual, total=ls.total, compute=ls.compute,
        stall=ls.stall, weight_exposed=ls.weight_exposed, drain=ls.drain, elapsed=ls.elapsed, macs=ls.macs,
        utilization=util,
        row_util=f"{step.rowmap.rows_used}/{hw.m}" if su else None,
        cycles_per_window=step.window_len * step.fu if su else None,
        fu=step.fu if su else None, np=step.np_ if su else None, tiles=ls.tiles, sweeps=ls.sweeps)


@dataclass
class RunReport:
    model: str
    hw: HwConfig
    batch: int
    layers: list
    engine_cycles: list
    setup_cycles: int = 0
    bandwidth: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    reference_gops: float | None = None

    @property
    def total_cycles(self) -> int:
        return max(self.engine_cycles)

    @property
    def latency_s(self) -> float:
        return self.total_cycles / self.hw.f_logic

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.layers) * self.batch

    @property
    def gops(self) -> float:
        return 2 * self.macs / self.latency_s / 1e9

    @property
    def fps(self) -> float:
        return self.batch / self.latency_s

    @property
    def peak_gops(self) -> float:
        return peak_throughput(self.hw) / 1e9

    @property
    def utilization(self) -> float:
        return self.gops / self.peak_gops

    def to_dict(self) -> dict:
        d = {
            "schema": SCHEMA,
            "model": self.model,
            "batch": self.batch,
            "hw": dict(self.hw.__dict__),
            "layers": [r.as_dict() for r in self.layers],
            "totals": {
                "cycles": self.total_cycles, "latency_s": self.latency_s, "fps": self.fps,
                "gops": self.gops, "peak_gops": self.peak_gops, "utilization": self.utilization,
                "macs": self.macs, "setup_cycles": self.setup_cycles, "engine_cycles": list(self.engine_cycles),
            },
            "peak": {"tops": peak_throughput(self.hw) / 1e12, "dsps": self.hw.dsps,
                     "published_tops": PUBLISHED_PEAK_TOPS, "published_dsp_note": PUBLISHED_DSP_NOTE},
            "bandwidth": self.bandwidth,
            "records": list(self.records),
        }
        if self.reference_gops:
            d["reference"] = {"published_gops": self.reference_gops,
                              "deviation_pct": 100 * (self.gops - self.reference_gops) / self.reference_gops}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_text(self) -> str:
        return render_text(self.to_dict())


def model_summary(rows, hw: HwConfig, *, model: str = "model", batch: int = 1, engine_cycles=None,
                  setup_cycles: int = 0, bandwidth=None, records=(), reference_gops=None) -> RunReport:
    rows = list(rows)
    if not rows:
        raise ValueError("model summary needs at least one layer row")
    if engine_cycles is None:
        engine_cycles = [sum(r.elapsed for r in rows) * batch]
    return RunReport(model, hw, batch, rows, list(engine_cycles), setup_cycles, bandwidth or {}, list(records),
                     reference_gops)


def report_from_sim(plan: ExecutionPlan, sim, reference_gops=None, verdicts=None) -> RunReport:
    from .memsys import ledger_report
    rows = [layer_cycle_estimate(plan, sim.timing, s.node) for s in plan.steps]
    for r in rows:
        if verdicts:
            r.verdict = verdicts.get(r.node)
    return model_summary(rows, plan.hw, model=plan.graph.name, batch=len(sim.outputs),
                         engine_cycles=sim.engine_cycles, setup_cycles=sim.timing.setup,
                         bandwidth=ledger_report(sim.ledger, plan.hw), records=sim.timing.records,
                         reference_gops=reference_gops)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def render_text(d: dict) -> str:
    """Human-readable table from a structured report."""
    cols = ["node", "unit", "estimate", "actual", "ratio", "stall", "total", "weight_exposed", "drain", "elapsed",
            "macs", "utilization", "row_util", "cycles_per_window", "verdict"]
    table = [cols] + [[_fmt(r.get(c)) for c in cols] for r in d["layers"]]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    lines = [f"model {d['model']}  batch {d['batch']}"]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in table]
    t = d["totals"]
    lines.append(f"total {t['cycles']} cycles (device latency {t['latency_s'] * 1e3:.4f} ms), "
                 f"{t['fps']:.1f} FPS, {t['gops']:.1f} GOP/s of {t['peak_gops']:.1f} peak "
                 f"({100 * t['utilization']:.1f}% utilization), setup {t['setup_cycles']} cycles")
    p = d["peak"]
    lines.append(f"peak {p['tops']:.3f} TOP/s from {p['dsps']} DSPs; published {p['published_tops']} TOP/s; "
                 f"published DSP usage {p['published_dsp_note']}")
    if "reference" in d:
        r = d["reference"]
        lines.append(f"reference {r['published_gops']} GOP/s; modeled deviation {r['deviation_pct']:+.1f}%")
    bw = d.get("bandwidth") or {}
    if bw:
        lines.append(f"input demand {bw['per_su_input_demand_bits_per_s'] / 1e9:.1f} Gbit/s per SU, "
                     f"IB supply {bw['ib_supply_bits_per_s'] / 1e9:.1f} Gbit/s (ratio {bw['demand_supply_ratio']:g}), "
                     f"OB aggregate {bw['ob_aggregate_GBps']:g} GB/s")
    lines += [f"note: {r}" for r in d.get("records", [])]
    return "\n".join(lines) + "\n"

