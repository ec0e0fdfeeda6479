import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supertile.model_ir import (LayerKind, ModelError, ModelSyntaxError, ShapeError, TensorShape, emit_model,
                                infer_shapes, parse_model, topo_order)
from supertile.randgen import random_layer, random_residual_block

from conftest import fixture_path


def doc(nodes, shape="[1, 3, 8, 8]"):
    return f"name: t\ninput: {{id: x, shape: {shape}}}\nnodes:\n" + "".join(f"  - {n}\n" for n in nodes)


def test_single_conv_shape():
    g = parse_model(doc(["{id: c, kind: conv, inputs: [x], out_channels: 16, kernel: 3, padding: 1}"]))
    assert len(g.nodes) == 1
    assert g.node("c").out_shape == TensorShape(1, 16, 8, 8)
    assert g.weights["c"].shape == (16, 3, 3, 3)


def test_dangling_reference():
    with pytest.raises(ModelError, match="x9"):
        parse_model(doc(["{id: r, kind: relu, inputs: [x9]}"]))


def test_unknown_kind_and_key():
    with pytest.raises(ModelSyntaxError, match="unknown layer kind"):
        parse_model(doc(["{id: r, kind: softmax, inputs: [x]}"]))
    with pytest.raises(ModelSyntaxError, match="colour"):
        parse_model(doc(["{id: r, kind: relu, inputs: [x], colour: red}"]))


def test_syntax_error_reports_position():
    with pytest.raises(ModelSyntaxError, match="line"):
        parse_model("name: t\ninput: {id: x, shape: [1, 3, 8, 8]\nnodes: []\n")


def test_hcnet_block_fixture():
    g = parse_model(open(fixture_path("hcnet_block.yaml")).read())
    convs = [n for n in g.nodes if n.kind.is_conv]
    assert [n.kind for n in convs] == [LayerKind.CONV1X1, LayerKind.CONV, LayerKind.CONV1X1]
    assert convs[1].groups == 2
    assert any(n.kind == LayerKind.ADD for n in g.nodes)


def test_shape_examples():
    g = parse_model(doc(["{id: c, kind: conv, inputs: [x], out_channels: 32, kernel: 7, stride: 2, padding: 3}"],
                        "[1, 3, 224, 224]"))
    assert g.node("c").out_shape == TensorShape(1, 32, 112, 112)
    g = parse_model(doc(["{id: t, kind: conv_transposed, inputs: [x], out_channels: 4, kernel: 1, upsample: 2}"],
                        "[1, 3, 4, 4]"))
    assert g.node("t").out_shape.h == 8


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        parse_model(doc(["{id: a, kind: conv1x1, inputs: [x], out_channels: 32}",
                         "{id: b, kind: conv1x1, inputs: [x], out_channels: 64}",
                         "{id: s, kind: add, inputs: [a, b]}"], "[1, 8, 56, 56]"))


def test_non_positive_output():
    with pytest.raises(ShapeError):
        parse_model(doc(["{id: p, kind: maxpool, inputs: [x], kernel: 9}"]))


def test_topo_linear_and_diamond():
    g = parse_model(doc(["{id: c, kind: relu, inputs: [b]}", "{id: a, kind: relu, inputs: [x]}",
                         "{id: b, kind: relu, inputs: [a]}"]))
    assert [n.id for n in topo_order(g)] == ["a", "b", "c"]
    g = parse_model(doc(["{id: d, kind: add, inputs: [c, b]}", "{id: c, kind: relu, inputs: [a]}",
                         "{id: b, kind: relu, inputs: [a]}", "{id: a, kind: relu, inputs: [x]}"]))
    assert [n.id for n in topo_order(g)] == ["a", "b", "c", "d"]


def test_self_loop_is_a_cycle():
    with pytest.raises(ModelError, match="cycle"):
        parse_model(doc(["{id: a, kind: relu, inputs: [a]}"]))


def test_weight_blob_round_trip():
    g = parse_model(doc(["{id: c, kind: conv1x1, inputs: [x], out_channels: 2}"]))
    again = parse_model(emit_model(g))
    assert np.array_equal(again.weights["c"].data, g.weights["c"].data)
    with pytest.raises(ModelSyntaxError):
        parse_model(doc(["{id: c, kind: conv1x1, inputs: [x], out_channels: 2, weights: {frac: 8, hex: '00'}}"]))


def test_seeded_weights_deterministic():
    a = parse_model(doc(["{id: c, kind: conv, inputs: [x], out_channels: 4, kernel: 3}"]))
    b = parse_model(doc(["{id: c, kind: conv, inputs: [x], out_channels: 4, kernel: 3}"]))
    assert np.array_equal(a.weights["c"].data, b.weights["c"].data)


def _same(a, b):
    assert emit_model(a) == emit_model(b)
    assert [n.out_shape for n in a.nodes] == [n.out_shape for n in b.nodes]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_emit_parse_round_trip(seed, residual):
    rng = np.random.default_rng(seed)
    g = random_residual_block(rng) if residual else random_layer(rng)
    _same(parse_model(emit_model(g)), g)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_infer_shapes_idempotent_and_topo_respects_edges(seed):
    g = random_residual_block(np.random.default_rng(seed))
    before = [n.out_shape for n in g.nodes]
    assert [n.out_shape for n in infer_shapes(infer_shapes(g)).nodes] == before
    order = [n.id for n in topo_order(g)]
    assert len(order) == len(g.nodes)
    pos = {k: i for i, k in enumerate(order)}
    for n in g.nodes:
        for i in n.inputs:
            if i != g.input_id:
                assert pos[i] < pos[n.id]
