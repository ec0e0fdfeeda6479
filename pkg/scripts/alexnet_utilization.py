"""Per-layer cycles and utilization of the AlexNet conv stack fixtures.

    python scripts/alexnet_utilization.py            # channels / 4, simulated and verified
    python scripts/alexnet_utilization.py --full     # full size, timing model only
"""
import argparse

from supertile.hwconfig import HwConfig
from supertile.mapper import lower_model
from supertile.model_ir import load_model
from supertile.perf import PUBLISHED_ALEXNET_GOPS, layer_cycle_estimate, model_summary
from supertile.runtime import plan_timing

from importlib import resources


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--simulate", action="store_true", help="also run the engine against the oracle")
    args = ap.parse_args()
    name = "alexnet_full.yaml" if args.full else "alexnet_small.yaml"
    g = load_model(str(resources.files("supertile") / "fixtures" / name))
    hw = HwConfig()
    plan = lower_model(g, hw)
    if args.simulate:
        from supertile.cli import verify_model
        bad = [v.node for v in verify_model(g, hw) if not v.ok]
        print("verify:", "all layers bit-exact" if not bad else f"mismatch in {bad}")
    t = plan_timing(plan)
    rows = [layer_cycle_estimate(plan, t, s.node) for s in plan.steps]
    batch = g.input_shape.n
    per_engine = -(-batch // hw.num_engines)
    later = max(0, t.setup - t.layers[-1].elapsed)
    cycles = t.setup + per_engine * t.image_cycles + (per_engine - 1) * later
    rep = model_summary(rows, hw, model=g.name, batch=batch, engine_cycles=[cycles], setup_cycles=t.setup,
                        records=t.records, reference_gops=PUBLISHED_ALEXNET_GOPS)
    print(rep.to_text(), end="")
    for r in rows:
        if r.unit == "SU":
            print(f"{r.node:>6}: util {r.utilization:.2f} rows {r.row_util} fu {r.fu} "
                  f"exposed weights {r.weight_exposed} stall {r.stall}")


if __name__ == "__main__":
    main()
