import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supertile import golden
from supertile.fixedpoint import QFormat, QTensor
from supertile.golden import (TensorFileError, Wide, ref_conv2d, ref_pool_pointwise, ref_run_model,
                              ref_transposed_conv)
from supertile.model_ir import LayerKind, ModelError, ModelGraph, TensorShape, parse_model

from conftest import load_fixture


def q(a, frac=0):
    return QTensor(np.asarray(a), QFormat(frac))


def naive_conv(x, w, stride, pad, dil, groups):
    """Seven nested loops, no vectorization."""
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=object)
    cog = co // groups
    for b, o, y, xx in itertools.product(range(n), range(co), range(oh), range(ow)):
        g = o // cog
        s = 0
        for ci, ky, kx in itertools.product(range(cig), range(kh), range(kw)):
            iy, ix = y * stride - pad + ky * dil, xx * stride - pad + kx * dil
            if 0 <= iy < h and 0 <= ix < wd:
                s += int(x[b, g * cig + ci, iy, ix]) * int(w[o, ci, ky, kx])
        out[b, o, y, xx] = s
    return out


def test_identity_1x1():
    x = np.arange(-8, 8).reshape(1, 1, 4, 4)
    r = ref_conv2d(q(x, 4), q([[[[1 << 10]]]], 10))
    assert r.frac == 14
    assert np.array_equal(r.data >> 10, x)


def test_impulse_response():
    x = np.zeros((1, 1, 5, 5), dtype=np.int16)
    x[0, 0, 2, 2] = 1
    w = np.arange(1, 10).reshape(1, 1, 3, 3)
    r = ref_conv2d(q(x), q(w), padding=1).data[0, 0]
    # correlation: the footprint appears flipped around the impulse
    assert np.array_equal(r[1:4, 1:4], w[0, 0, ::-1, ::-1])


def test_stride2_pad1_hand_checked():
    x = [[4, 1, 2, 4], [1, 2, 3, -2], [-4, -2, -2, 3], [4, -4, 0, 3]]
    w = [[-3, 2, -3], [0, 2, -1], [-1, -2, 2]]
    r = ref_conv2d(q([[x]]), q([[w]]), stride=2, padding=1)
    assert r.data[0, 0].tolist() == [[9, -12], [-26, 9]]


def test_transposed_hand_checked():
    r = ref_transposed_conv(q([[[[1, 2], [3, 4]]]]), q(np.ones((1, 1, 3, 3))), upsample=2, padding=1)
    assert r.data[0, 0].tolist() == [[1, 3, 2, 2], [4, 10, 6, 6], [3, 7, 4, 4], [3, 7, 4, 4]]


def test_transposed_unit_upsample_is_full_padding_conv():
    rng = np.random.default_rng(2)
    x, w = rng.integers(-50, 50, (1, 2, 4, 4)), rng.integers(-50, 50, (3, 2, 3, 3))
    a = ref_transposed_conv(q(x), q(w), upsample=1, padding=2)
    assert a == ref_conv2d(q(x), q(w), padding=2)


def test_transposed_identity_kernel_upsamples():
    x = np.arange(1, 5).reshape(1, 1, 2, 2)
    r = ref_transposed_conv(q(x), q([[[[1]]]]), upsample=2)
    assert np.array_equal(r.data, golden.upsample_zeros(x, 2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2, 3]), st.sampled_from([1, 2]), st.integers(0, 2),
       st.sampled_from([1, 2]), st.sampled_from([1, 2]))
def test_conv_matches_naive_loops(seed, k, stride, pad, dil, groups):
    rng = np.random.default_rng(seed)
    x = rng.integers(-32768, 32768, (1, 2 * groups, 6, 5))
    w = rng.integers(-32768, 32768, (2 * groups, 2, k, k))
    got = ref_conv2d(q(x), q(w), stride, pad, dil, groups).data
    assert (got == naive_conv(x, w, stride, pad, dil, groups)).all()


def test_conv_shape_mismatch():
    with pytest.raises(ModelError):
        ref_conv2d(q(np.zeros((1, 3, 4, 4))), q(np.zeros((4, 2, 3, 3))))


def test_pool_examples():
    c = q(np.full((1, 2, 4, 4), 77), 5)
    assert np.all(ref_pool_pointwise(c, LayerKind.MAXPOOL, kernel=(2, 2), stride=2).data == 77)
    neg = q(-np.arange(1, 17).reshape(1, 1, 4, 4), 3)
    r = ref_pool_pointwise(neg, LayerKind.RELU)
    assert r.qformat.frac_bits == 3 and not r.data.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([2, 3]), st.sampled_from([1, 2]), st.integers(0, 1))
def test_avgpool_is_rounded_rational_mean(seed, k, stride, pad):
    from fractions import Fraction
    rng = np.random.default_rng(seed)
    x = rng.integers(-32768, 32768, (1, 1, 5, 5))
    r = ref_pool_pointwise(q(x), LayerKind.AVGPOOL, kernel=(k, k), stride=stride, padding=pad).data[0, 0]
    xp = np.pad(x[0, 0], pad)
    for oy, ox in np.ndindex(r.shape):
        win = xp[oy * stride:oy * stride + k, ox * stride:ox * stride + k]
        mean = Fraction(int(win.sum()), k * k)
        assert r[oy, ox] == round(mean)   # python round is half-even


def test_relu6_and_linear():
    x = q([[[[-5 << 8, 3 << 8, 9 << 8]]]], 8)
    assert ref_pool_pointwise(x, LayerKind.RELU6).data.ravel().tolist() == [0, 3 << 8, 6 << 8]
    # 0.5 * x + 1 with a in Q1 and b in Q0
    r = ref_pool_pointwise(x, LayerKind.LINEAR, scalars=(1, 1, 1, 0), out_frac=8)
    assert r.data.ravel().tolist() == [-384, 640, 1408]


def test_add_aligns_fractions():
    r = ref_pool_pointwise(q([[[[3]]]], 2), LayerKind.ADD, other=q([[[[1]]]], 4))
    assert r == Wide(np.array([[[[13]]]]), 4)


def test_unsupported_kind():
    with pytest.raises(ModelError):
        ref_pool_pointwise(q([[[[1]]]]), LayerKind.LRN)


def test_run_model_single_relu():
    g = parse_model("input: {id: x, shape: [1, 2, 3, 3], frac: 6}\nnodes:\n  - {id: r, kind: relu, inputs: [x]}\n")
    x = q(np.arange(-9, 9).reshape(1, 2, 3, 3), 6)
    out, _, fmt = ref_run_model(g, x)
    assert np.array_equal(out["r"].data, np.maximum(x.data, 0))
    assert fmt == {"r": 6}


def test_run_model_empty_graph():
    with pytest.raises(ModelError, match="no nodes"):
        parse_model("input: {id: x, shape: [1, 1, 2, 2]}\nnodes: []\n")
    g = ModelGraph("x", TensorShape(1, 1, 2, 2), [], [])
    with pytest.raises(ModelError):
        ref_run_model(g, q(np.zeros((1, 1, 2, 2))))


def test_hcnet_golden_files_round_trip(tmp_path):
    g = load_fixture("hcnet_block.yaml")
    from supertile.mapper import calibration_input
    x = calibration_input(g)
    _, tensors, formats = ref_run_model(g, x)
    for name, t in tensors.items():
        golden.write_tensor(tmp_path / f"{name}.t", t)
        assert golden.read_tensor(tmp_path / f"{name}.t") == t
    # deterministic across runs
    _, again, formats2 = ref_run_model(g, x)
    assert formats == formats2
    assert all(again[k] == v for k, v in tensors.items())


def test_tensor_file_errors():
    blob = golden.dump_tensor(q(np.ones((2, 3)), 4))
    assert golden.load_tensor(blob) == q(np.ones((2, 3)), 4)
    with pytest.raises(TensorFileError, match="magic"):
        golden.load_tensor(b"nope" + blob[4:])
    with pytest.raises(TensorFileError, match="payload"):
        golden.load_tensor(blob[:-1])
