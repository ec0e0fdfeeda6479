import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from supertile import golden  # noqa: E402
from supertile.hwconfig import HwConfig  # noqa: E402
from supertile.mapper import calibration_input, lower_model  # noqa: E402
from supertile.model_ir import load_model  # noqa: E402
from supertile.runtime import simulate  # noqa: E402


def fixture_path(name):
    return str(resources.files("supertile") / "fixtures" / name)


def load_fixture(name):
    return load_model(fixture_path(name))


def run_both(graph, hw=None, seed=None, fuse=True, workers=1):
    """(plan, sim, oracle tensors) for one model on one calibration input."""
    hw = hw or HwConfig()
    plan = lower_model(graph, hw, fuse=fuse)
    x = calibration_input(graph, seed)
    sim = simulate(plan, x, workers=workers)
    _, ref, _ = golden.ref_run_model(graph, x, plan.formats, scalars=plan.scalars)
    return plan, sim, ref


def assert_outputs_match(graph, sim, ref):
    for o in graph.outputs:
        got = sim.batch_output(o)
        assert got.data.shape == ref[o].data.shape
        np.testing.assert_array_equal(got.data, ref[o].data)


@pytest.fixture
def hw():
    return HwConfig()


# one line per acceptance criterion, shown even when output is captured
ACCEPTANCE = {}


def record_criterion(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
