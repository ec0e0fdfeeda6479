"""Command-line driver: compile, run, verify, report.

Exit codes::

    0  success
    2  usage error
    3  model or config parse error
    4  lowering error (unsupported layer, capacity)
    5  simulation error
    6  verification mismatch
    7  input error (tensor file, missing plan files)
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import golden
from .fixedpoint import QTensor
from .golden import TensorFileError, Wide
from .hwconfig import DEFAULT_CONFIG, ConfigError, HwConfig, emit_hwconfig, load_hwconfig
from .mapper import FpuStep, LoweringError, calibration_input, encode_ucmds, lower_model
from .model_ir import ModelError, emit_model, load_model, topo_order
from .perf import render_text, report_from_sim
from .runtime import SimulationError, simulate

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_LOWER, EXIT_SIM, EXIT_VERIFY, EXIT_INPUT = 0, 2, 3, 4, 5, 6, 7


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _hw(path, out=None) -> HwConfig:
    if path is None:
        print(f"no hw config given; using the default design ({DEFAULT_CONFIG.num_engines} engines, "
              f"{DEFAULT_CONFIG.sus_per_engine} SUs/engine, {DEFAULT_CONFIG.m}x{DEFAULT_CONFIG.n} EPEs, "
              f"{DEFAULT_CONFIG.f_logic / 1e6:g}/{DEFAULT_CONFIG.f_epe / 1e6:g} MHz)", file=out)
        return DEFAULT_CONFIG
    try:
        return load_hwconfig(path)
    except OSError as e:
        raise CliError(EXIT_INPUT, f"cannot read hw config: {e}") from None
    except ConfigError as e:
        raise CliError(EXIT_PARSE, f"{path}: {e}") from None


def _model(path):
    try:
        return load_model(path)
    except OSError as e:
        raise CliError(EXIT_INPUT, f"cannot read model: {e}") from None
    except ModelError as e:
        raise CliError(EXIT_PARSE, f"{path}: {e}") from None


def _lower(graph, hw):
    try:
        return lower_model(graph, hw)
    except (LoweringError, NotImplementedError) as e:
        raise CliError(EXIT_LOWER, f"lowering failed: {e}") from None


def _simulate(plan, x, workers=1):
    try:
        return simulate(plan, x, workers=workers)
    except SimulationError as e:
        raise CliError(EXIT_SIM, f"simulation failed: {e}") from None


def summary_table(plan) -> str:
    rows = plan.summary_rows()
    cols = ["node", "unit", "chain", "np", "fu", "passes", "slices", "tiles", "groups"]
    table = [cols] + [["-" if r[c] is None else str(r[c]) for c in cols] for r in rows]
    w = [max(len(t[i]) for t in table) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(x) for v, x in zip(t, w)).rstrip() for t in table) + "\n"


# ------------------------------------------------------------------ commands

def cmd_compile(model, hw_path, out, stdout=None) -> int:
    stdout = stdout or sys.stdout
    hw = _hw(hw_path, stdout)
    graph = _model(model)
    plan = _lower(graph, hw)
    d = Path(out)
    (d / "ucmds").mkdir(parents=True, exist_ok=True)
    (d / "model.yaml").write_text(emit_model(graph))
    (d / "hw.cfg").write_text(emit_hwconfig(hw))
    (d / "plan.txt").write_text(plan.dump())
    for s in plan.steps:
        if isinstance(s, FpuStep):
            (d / "ucmds" / f"{s.node}.bin").write_bytes(encode_ucmds(s.ucmds))
    stdout.write(f"compiled {graph.name}: {len(plan.steps)} steps -> {d}\n")
    stdout.write(summary_table(plan))
    return EXIT_OK


def load_plan(plan_dir):
    d = Path(plan_dir)
    for f in ("model.yaml", "hw.cfg"):
        if not (d / f).is_file():
            raise CliError(EXIT_INPUT, f"{d}: missing {f} (not a compiled plan directory)")
    hw = _hw(d / "hw.cfg")
    return _lower(_model(d / "model.yaml"), hw)


def _read_input(path, graph) -> QTensor:
    try:
        x = golden.read_tensor(path)
    except OSError as e:
        raise CliError(EXIT_INPUT, f"cannot read input: {e}") from None
    except TensorFileError as e:
        raise CliError(EXIT_INPUT, f"{path}: {e}") from None
    want = graph.input_shape.as_tuple()
    if x.shape != want:
        raise CliError(EXIT_INPUT, f"{path}: input shape {x.shape} != model input {want}")
    return x


def cmd_run(plan_dir, input=None, seed=None, report=None, output=None, workers=1, stdout=None) -> int:
    stdout = stdout or sys.stdout
    plan = load_plan(plan_dir)
    graph = plan.graph
    x = _read_input(input, graph) if input else calibration_input(graph, seed)
    sim = _simulate(plan, x, workers)
    rep = report_from_sim(plan, sim)
    text = rep.to_text()
    stdout.write(text)
    if report:
        Path(report).write_text(text)
        Path(report).with_suffix(".json").write_text(rep.to_json())
    if output:
        y = sim.batch_output(graph.outputs[0])
        if isinstance(y, Wide):
            raise CliError(EXIT_SIM, "model output is an unquantized sum; nothing to write")
        golden.write_tensor(output, y)
    return EXIT_OK


@dataclass
class LayerVerdict:
    node: str
    ok: bool
    note: str = ""


def _first_mismatch(a, b):
    if a.shape != b.shape:
        return f"shape {a.shape} != {b.shape}"
    idx = tuple(int(i) for i in np.argwhere(a != b)[0])
    return f"first mismatch at (n, c, y, x) = {idx}: engine {int(a[idx])} oracle {int(b[idx])}"


def verify_model(graph, hw, seed=None, engine_graph=None, workers=1) -> list:
    """Engine vs oracle on every tensor the engine materializes.

    ``engine_graph`` lets the engine run a different copy of the model (the
    oracle always uses ``graph``); used as a negative control.
    """
    plan = _lower(graph, hw)
    if engine_graph is not None:
        eplan = _lower(engine_graph, hw)
        eplan.formats = plan.formats
    else:
        eplan = plan
    x = calibration_input(graph, seed)
    sim = _simulate(eplan, x, workers)
    _, ref, _ = golden.ref_run_model(graph, x, plan.formats, scalars=plan.scalars)
    have = sim.tensors[0].keys()
    out = []
    for node in topo_order(graph):
        if node.id not in have:
            out.append(LayerVerdict(node.id, True, "fused, checked at chain tail"))
            continue
        a, b = sim.batch_output(node.id).data, ref[node.id].data
        if a.shape == b.shape and np.array_equal(a, b):
            out.append(LayerVerdict(node.id, True))
        else:
            out.append(LayerVerdict(node.id, False, _first_mismatch(a, b)))
    return out


def cmd_verify(model, seed=None, hw_path=None, workers=1, stdout=None) -> int:
    stdout = stdout or sys.stdout
    hw = _hw(hw_path, stdout)
    graph = _model(model)
    res = verify_model(graph, hw, seed, workers=workers)
    for i, v in enumerate(res):
        stdout.write(f"layer {i} {v.node}: {'PASS' if v.ok else 'FAIL'}" + (f" ({v.note})" if v.note else "") + "\n")
    bad = sum(not v.ok for v in res)
    stdout.write(f"{len(res) - bad}/{len(res)} layers pass\n")
    return EXIT_OK if not bad else EXIT_VERIFY


def cmd_report(path, fmt="text", stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(EXIT_INPUT, f"cannot read report: {e}") from None
    stdout.write(render_text(d) if fmt == "text" else json.dumps(d, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supertile", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    c = sub.add_parser("compile", help="lower a model to a plan directory")
    c.add_argument("--model", required=True)
    c.add_argument("--hw")
    c.add_argument("--out", required=True)
    r = sub.add_parser("run", help="simulate a compiled plan")
    r.add_argument("--plan", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--seed", type=int)
    r.add_argument("--report")
    r.add_argument("--output", help="write the model output tensor here")
    r.add_argument("--workers", type=int, default=1)
    v = sub.add_parser("verify", help="engine vs oracle, layer by layer")
    v.add_argument("--model", required=True)
    v.add_argument("--seed", type=int)
    v.add_argument("--hw")
    v.add_argument("--workers", type=int, default=1)
    s = sub.add_parser("report", help="render a saved structured report")
    s.add_argument("--in", dest="path", required=True)
    s.add_argument("--format", choices=["text", "json"], default="text")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "compile":
            return cmd_compile(args.model, args.hw, args.out)
        if args.cmd == "run":
            return cmd_run(args.plan, args.input, args.seed, args.report, args.output, args.workers)
        if args.cmd == "verify":
            return cmd_verify(args.model, args.seed, args.hw, args.workers)
        return cmd_report(args.path, args.format)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
