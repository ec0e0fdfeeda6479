"""Random layers (or residual blocks) through engine and oracle; prints mismatches.

    python scripts/oracle_sweep.py --count 300 --seed 1
    python scripts/oracle_sweep.py --residual --count 100
"""
import argparse
import time

import numpy as np

from supertile import golden
from supertile.hwconfig import HwConfig
from supertile.mapper import calibration_input, lower_model
from supertile.randgen import random_layer, random_residual_block
from supertile.runtime import simulate


def one(graph, hw, seed, fuse=True):
    plan = lower_model(graph, hw, fuse=fuse)
    x = calibration_input(graph, seed)
    sim = simulate(plan, x)
    _, ref, _ = golden.ref_run_model(graph, x, plan.formats, scalars=plan.scalars)
    return [o for o in graph.outputs if not np.array_equal(sim.batch_output(o).data, ref[o].data)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--residual", action="store_true", help="residual blocks, fused and unfused")
    ap.add_argument("--sus", type=int, default=4)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    hw = HwConfig(sus_per_engine=args.sus)
    t0 = time.perf_counter()
    bad = 0
    for i in range(args.count):
        g = random_residual_block(rng) if args.residual else random_layer(rng)
        fails = one(g, hw, i)
        if args.residual:
            fails += one(g, hw, i, fuse=False)
        if fails:
            bad += 1
            y = g.nodes[0]
            print(f"#{i} {g.name} {y.kind.value} k={y.kernel} s={y.stride} d={y.dilation} g={y.groups} "
                  f"in={g.input_shape.as_tuple()}: mismatch in {fails}")
    print(f"{args.count} models, {bad} mismatching, {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
