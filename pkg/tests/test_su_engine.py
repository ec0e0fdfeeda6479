import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supertile.fixedpoint import AccumulatorOverflow
from supertile.hwconfig import HwConfig
from supertile.mapper import lower_model, standard_rowmap
from supertile.memsys import BroadcastCache
from supertile.runtime import su_timeline
from supertile.su_engine import (SuError, SuState, WeightCacheOverflow, WeightsNotLoaded, load_kernel_groups,
                                 run_layer_slice, stream_window, weight_load_cycles)

from conftest import assert_outputs_match, run_both
from test_mapper import model

M, LANES = 32, 32


def loaded(w):
    su = SuState()
    load_kernel_groups(su, w, w.shape[0])
    return su


def test_fu1_3x3_geometry():
    su = loaded(np.ones((1, M, LANES, 9), dtype=np.int64))
    e = su.epe(5, 3)
    assert len(e.weight_cache_a) == 1
    assert [len(pump) for pump in e.weight_cache_a[0]] == [9, 9]
    assert e.active_bank == "a" and not e.pending_update


def test_fu12_1x1_indices():
    # weight value encodes (c_in, c_out) so the cached kernel identifies itself
    fu = 12
    w = np.zeros((fu, M, LANES, 1), dtype=np.int64)
    for f, i, j in itertools.product(range(fu), range(M), range(LANES)):
        w[f, i, j, 0] = i * 1000 + (j + f * LANES)
    su = loaded(w)
    i, j = 7, 4
    cached = [su.epe(i, j).weight_cache_a[f][0][0] for f in range(fu)]
    assert cached == [i * 1000 + j + s * 32 for s in range(fu)]


def test_fu17_overflows_cache():
    with pytest.raises(WeightCacheOverflow):
        load_kernel_groups(SuState(), np.zeros((17, M, LANES, 1)), 17)


def test_ping_pong_swap():
    su = loaded(np.ones((1, M, LANES, 1), dtype=np.int64))
    load_kernel_groups(su, 2 * np.ones((1, M, LANES, 1), dtype=np.int64), 1)
    assert su.pending and su.epe(0, 0).weight_cache_b[0][0] == [2]
    # compute keeps using the active bank until the swap
    acc, _ = stream_window(su, np.ones((M, 1), dtype=np.int64))
    assert acc[0, 0] == M
    su.swap()
    acc, _ = stream_window(su, np.ones((M, 1), dtype=np.int64))
    assert acc[0, 0] == 2 * M


def test_stream_requires_weights():
    with pytest.raises(WeightsNotLoaded):
        stream_window(SuState(), np.zeros((M, 9)))


def test_stream_rejects_wrong_window():
    su = loaded(np.ones((1, M, LANES, 9), dtype=np.int64))
    with pytest.raises(SuError):
        stream_window(su, np.zeros((M, 4)))


def test_zero_activations():
    rng = np.random.default_rng(0)
    su = loaded(rng.integers(-32768, 32768, (1, M, LANES, 9)))
    acc, _ = stream_window(su, np.zeros((M, 9), dtype=np.int64))
    assert not acc.any()


def test_identity_1x1():
    w = np.zeros((1, M, LANES, 1), dtype=np.int64)
    for i in range(M):
        w[0, i, i, 0] = 1
    act = np.arange(-16, 16).reshape(M, 1)
    acc, cost = stream_window(loaded(w), act)
    assert acc[0].tolist() == act.ravel().tolist() and cost == 1


def test_random_3x3_against_triple_sum():
    rng = np.random.default_rng(7)
    w = rng.integers(-32768, 32768, (1, M, LANES, 9))
    act = rng.integers(-32768, 32768, (M, 9))
    su = loaded(w)
    acc, cost = stream_window(su, act)
    assert cost == 9
    for j in range(LANES):
        assert acc[0, j] == sum(int(act[i, t]) * int(w[0, i, j, t]) for i in range(M) for t in range(9))


def test_fused_1x1_costs_fu_cycles():
    su = loaded(np.ones((12, M, LANES, 1), dtype=np.int64))
    acc, cost = stream_window(su, np.ones((M, 1), dtype=np.int64))
    assert cost == 12 and acc.shape == (12, LANES)


def test_column_sum_overflow_detected():
    # 32 rows x 4200 taps x 2^30 is past 2^47
    su = loaded(np.full((1, M, LANES, 4200), -32768, dtype=np.int64))
    with pytest.raises(AccumulatorOverflow):
        stream_window(su, np.full((M, 4200), -32768, dtype=np.int64))


def test_weight_load_cycles():
    # 1 x 32 x 32 x 9 int16 over a 64-byte port
    assert weight_load_cycles(1, 32, 32, 9) == 288
    assert load_kernel_groups(SuState(), np.zeros((1, M, LANES, 9)), 1) == 288


def make_bc(width, sus, su, rows=3, pad=0):
    bc = BroadcastCache(4, 1, (3, 3), 1, pad, 1, -pad, width, rows, width + 2 * pad - 2, 1, su, sus)
    for r in range(3):
        bc.load_row(r, np.arange(width)[None, :] + 10 * r)
    return bc


def test_run_layer_slice_share_of_two():
    su = loaded(np.ones((1, M, LANES, 9), dtype=np.int64))
    bc = make_bc(10, 4, 0)
    got = []
    cycles = run_layer_slice(su, [0, 4], bc, standard_rowmap(M, 1, 9), lambda oy, ox, a: got.append(ox))
    assert cycles == 18 and got == [0, 4]


def test_run_layer_slice_empty_share():
    su = loaded(np.ones((1, M, LANES, 9), dtype=np.int64))
    bc = make_bc(3, 4, 3)
    assert run_layer_slice(su, [], bc, standard_rowmap(M, 1, 9), lambda *a: None, stall=5) == 5
    assert su.cycles == 0 and su.stall_cycles == 5


def test_run_layer_slice_schedule_mismatch():
    su = loaded(np.ones((1, M, LANES, 9), dtype=np.int64))
    with pytest.raises(SuError, match="schedule"):
        run_layer_slice(su, [0], make_bc(10, 4, 0), standard_rowmap(M, 1, 9), lambda *a: None)


def test_full_8x8_tile_hand_count():
    g = model(["{id: c, kind: conv, inputs: [x], out_channels: 32, kernel: 3, padding: 1}"], "[1, 32, 8, 8]")
    step = lower_model(g, HwConfig()).steps[0]
    # 8 rows x ceil(8 / 4) positions x 9 taps
    assert su_timeline(step, HwConfig()).compute == 8 * 2 * 9


@pytest.mark.parametrize("k,stride,cin,cout", [(1, 1, 3, 32), (3, 2, 16, 64), (5, 1, 32, 32), (7, 2, 3, 64),
                                               (3, 1, 96, 384), (1, 2, 96, 64)])
def test_layer_matches_oracle(k, stride, cin, cout):
    g = model([f"{{id: c, kind: conv, inputs: [x], out_channels: {cout}, kernel: {k}, stride: {stride}, "
               f"padding: {k // 2}}}"], f"[1, {cin}, 9, 9]")
    _, sim, ref = run_both(g)
    assert_outputs_match(g, sim, ref)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.permutations(range(4)))
def test_slice_order_is_irrelevant(seed, order):
    rng = np.random.default_rng(seed)
    w = rng.integers(-32768, 32768, (4, 1, M, LANES, 9))
    act = rng.integers(-32768, 32768, (4, M, 9))
    total = sum(stream_window(loaded(w[s]), act[s])[0] for s in range(4))
    shuffled = 0
    for s in order:
        shuffled = shuffled + stream_window(loaded(w[s]), act[s])[0]
    assert np.array_equal(total, shuffled)


def test_dense_layer_throughput():
    g = model(["{id: c, kind: conv, inputs: [x], out_channels: 64, kernel: 3, padding: 1}"], "[1, 32, 8, 8]")
    plan, sim, _ = run_both(g)
    st_ = sim.timing.row("c")
    # every MAC slot busy: 2 m n per SU per cycle
    assert st_.macs == 4 * 2 * M * 16 * st_.compute


def test_weight_load_hidden_when_compute_is_long():
    hw = HwConfig()
    g = model(["{id: c, kind: conv, inputs: [x], out_channels: 64, kernel: 3, padding: 1}"], "[1, 96, 32, 32]")
    ts = su_timeline(lower_model(g, hw).steps[0], hw)
    assert ts.weight_exposed == 0
    g = model(["{id: c, kind: conv1x1, inputs: [x], out_channels: 384}"], "[1, 96, 2, 2]")
    step = lower_model(g, hw).steps[0]
    ts = su_timeline(step, hw)
    load = weight_load_cycles(12, M, LANES, 1)
    per_sweep = ts.compute // len(step.slices)
    assert load > per_sweep and ts.preload == load
    # load bound: the port runs back to back, then the last sweep computes
    assert ts.actual + ts.weight_exposed == (len(step.slices) - 1) * load + per_sweep
