"""CNN graph IR and the YAML model-description format.

Model file layout (all keys are checked, unknown keys are rejected)::

    name: hcnet_block          # optional
    seed: 7                    # seeds random weights for nodes without a weights blob
    input: {id: data, shape: [1, 128, 8, 8], frac: 12}
    nodes:
      - id: squeeze
        kind: conv1x1
        inputs: [data]
        out_channels: 32
        kernel: [1, 1]         # [k_y, k_x]; scalar also accepted
        stride: 1
        padding: 0
        dilation: 1
        groups: 1
        upsample: 1            # conv_transposed only
        frac: 10               # optional fixed output format
        weights: {frac: 14, hex: "..."}   # optional, int16 little-endian
    outputs: [squeeze]         # optional, defaults to nodes nobody consumes

Per-kind optional keys: ``maxpool``/``avgpool`` take kernel/stride/padding,
``linear`` takes ``scale`` and ``shift`` (reals), ``quantize`` takes ``frac``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .fixedpoint import QFormat, QTensor, choose_qformat, quantize_array

# libyaml when present; weight blobs make the pure-python scanner slow
_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
_Dumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)


class ModelError(ValueError):
    """Any problem with a model description or graph."""


class ModelSyntaxError(ModelError):
    pass


class ShapeError(ModelError):
    pass


class LayerKind(str, enum.Enum):
    CONV = "conv"
    CONV1X1 = "conv1x1"
    DEPTHWISE = "depthwise"
    CONV_TRANSPOSED = "conv_transposed"
    CONV_DILATED = "conv_dilated"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"
    RELU = "relu"
    RELU6 = "relu6"
    LINEAR = "linear"
    ADD = "add"
    QUANTIZE = "quantize"
    LRN = "lrn"  # parsed so it can be named in errors; never executable

    @property
    def is_conv(self):
        return self in CONV_KINDS

    @property
    def is_pool(self):
        return self in (LayerKind.MAXPOOL, LayerKind.AVGPOOL)

    @property
    def is_windowed(self):
        return self.is_conv or self.is_pool


CONV_KINDS = frozenset({LayerKind.CONV, LayerKind.CONV1X1, LayerKind.DEPTHWISE,
                        LayerKind.CONV_TRANSPOSED, LayerKind.CONV_DILATED})


@dataclass(frozen=True)
class TensorShape:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ShapeError(f"tensor dimension {name}={v} must be a positive integer")
        if self.n * self.c * self.h * self.w >= 1 << 63:
            raise ShapeError("tensor element count overflows 63 bits")

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self):
        return (self.n, self.c, self.h, self.w)

    def __str__(self):
        return "x".join(map(str, self.as_tuple()))


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: LayerKind
    inputs: tuple[str, ...]
    out_channels: int | None = None
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    upsample: int = 1
    frac: int | None = None
    scale: float | None = None
    shift: float | None = None
    out_shape: TensorShape | None = None

    @property
    def k_y(self):
        return self.kernel[0]

    @property
    def k_x(self):
        return self.kernel[1]

    def effective_kernel(self) -> tuple[int, int]:
        return ((self.k_y - 1) * self.dilation + 1, (self.k_x - 1) * self.dilation + 1)


@dataclass
class ModelGraph:
    input_id: str
    input_shape: TensorShape
    nodes: list[LayerNode]
    outputs: list[str]
    weights: dict[str, QTensor] = field(default_factory=dict)
    input_frac: int = 12
    seed: int = 0
    name: str = "model"

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def shape_of(self, tensor_id: str) -> TensorShape:
        if tensor_id == self.input_id:
            return self.input_shape
        s = self.node(tensor_id).out_shape
        if s is None:
            raise ShapeError(f"shape of {tensor_id} not inferred")
        return s

    def consumers(self, tensor_id: str) -> list[LayerNode]:
        return [n for n in self.nodes if tensor_id in n.inputs]


def _conv_out(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def infer_node_shape(node: LayerNode, in_shapes: list[TensorShape]) -> TensorShape:
    kind = node.kind
    if kind == LayerKind.ADD:
        a, b = in_shapes
        if a != b:
            raise ShapeError(f"{node.id}: eltwise add shape mismatch {a} vs {b}")
        return a
    (x,) = in_shapes
    if kind in (LayerKind.RELU, LayerKind.RELU6, LayerKind.LINEAR, LayerKind.QUANTIZE, LayerKind.LRN):
        return x
    h, w = x.h, x.w
    if kind == LayerKind.CONV_TRANSPOSED:
        h, w = h * node.upsample, w * node.upsample
    oh = _conv_out(h, node.k_y, node.stride, node.padding, node.dilation)
    ow = _conv_out(w, node.k_x, node.stride, node.padding, node.dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"{node.id}: non-positive output size {oh}x{ow}")
    if kind.is_pool:
        c = x.c
    elif kind == LayerKind.DEPTHWISE:
        c = x.c
    else:
        c = node.out_channels
    return TensorShape(x.n, c, oh, ow)


def _check_node(node: LayerNode, in_shapes: list[TensorShape]):
    if min(node.kernel) < 1 or node.stride < 1 or node.dilation < 1 or node.upsample < 1 or node.groups < 1:
        raise ModelError(f"{node.id}: kernel, stride, dilation, upsample and groups must be >= 1")
    if node.padding < 0:
        raise ModelError(f"{node.id}: negative padding")
    want = 2 if node.kind == LayerKind.ADD else 1
    if len(node.inputs) != want:
        raise ModelError(f"{node.id}: {node.kind.value} takes {want} input(s), got {len(node.inputs)}")
    if node.kind == LayerKind.CONV1X1 and node.kernel != (1, 1):
        raise ModelError(f"{node.id}: conv1x1 needs a 1x1 kernel")
    if node.kind == LayerKind.DEPTHWISE and node.groups not in (1, in_shapes[0].c):
        raise ModelError(f"{node.id}: depthwise groups must equal the channel count")
    if node.kind.is_conv and node.kind != LayerKind.DEPTHWISE:
        if not node.out_channels or node.out_channels < 1:
            raise ModelError(f"{node.id}: out_channels required")
        c_in = in_shapes[0].c
        if c_in % node.groups or node.out_channels % node.groups:
            raise ModelError(f"{node.id}: channels not divisible by groups={node.groups}")
    if node.kind == LayerKind.LINEAR and (node.scale is None or node.shift is None):
        raise ModelError(f"{node.id}: linear needs scale and shift")
    if node.frac is not None and not 0 <= node.frac <= 15:
        raise ModelError(f"{node.id}: frac out of range")


def topo_order(graph: ModelGraph) -> list[LayerNode]:
    """Kahn's algorithm; ready nodes are taken in id order."""
    by_id = {n.id: n for n in graph.nodes}
    pending = {n.id: {i for i in n.inputs if i != graph.input_id} for n in graph.nodes}
    for nid, deps in pending.items():
        missing = deps - by_id.keys()
        if missing:
            raise ModelError(f"{nid}: dangling input reference {sorted(missing)[0]!r}")
    order = []
    while True:
        ready = [nid for nid, deps in pending.items() if not deps]
        if not ready:
            break
        nid = min(ready)
        order.append(by_id[nid])
        del pending[nid]
        for deps in pending.values():
            deps.discard(nid)
    if pending:
        raise ModelError(f"cycle detected among {sorted(pending)}")
    return order


def infer_shapes(graph: ModelGraph) -> ModelGraph:
    """Return a copy of ``graph`` with every node's ``out_shape`` filled in."""
    shapes = {graph.input_id: graph.input_shape}
    done = {}
    for node in topo_order(graph):
        in_shapes = [shapes[i] for i in node.inputs]
        _check_node(node, in_shapes)
        shapes[node.id] = infer_node_shape(node, in_shapes)
        done[node.id] = replace(node, out_shape=shapes[node.id])
    nodes = [done[n.id] for n in graph.nodes]
    return replace(graph, nodes=nodes)


def weight_shape(node: LayerNode, c_in: int) -> tuple[int, int, int, int]:
    if node.kind == LayerKind.DEPTHWISE:
        return (c_in, 1, node.k_y, node.k_x)
    return (node.out_channels, c_in // node.groups, node.k_y, node.k_x)


def random_weights(shape, seed: int, index: int) -> QTensor:
    rng = np.random.default_rng([seed, index])
    fan_in = int(np.prod(shape[1:]))
    w = rng.uniform(-1.0, 1.0, size=shape) * np.sqrt(3.0 / fan_in)
    q = choose_qformat(w)
    return QTensor(quantize_array(w, q), q)


def validate(graph: ModelGraph) -> ModelGraph:
    ids = [n.id for n in graph.nodes]
    if not ids:
        raise ModelError("graph has no nodes")
    if len(set(ids)) != len(ids) or graph.input_id in ids:
        raise ModelError("node ids must be unique and distinct from the input id")
    graph = infer_shapes(graph)
    if not graph.outputs:
        raise ModelError("graph has no outputs")
    for o in graph.outputs:
        if o not in ids:
            raise ModelError(f"output {o!r} is not a node")
    for i, node in enumerate(graph.nodes):
        if node.kind.is_conv:
            shape = weight_shape(node, graph.shape_of(node.inputs[0]).c)
            if node.id not in graph.weights:
                graph.weights[node.id] = random_weights(shape, graph.seed, i)
            elif graph.weights[node.id].shape != shape:
                raise ModelError(f"{node.id}: weight shape {graph.weights[node.id].shape} != {shape}")
    return graph


# ---------------------------------------------------------------- file format

_TOP_KEYS = {"name", "seed", "input", "nodes", "outputs"}
_INPUT_KEYS = {"id", "shape", "frac"}
_NODE_KEYS = {"id", "kind", "inputs", "out_channels", "kernel", "stride", "padding",
              "dilation", "groups", "upsample", "frac", "scale", "shift", "weights"}
_WEIGHT_KEYS = {"frac", "hex"}


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ModelSyntaxError(f"{where}: expected a mapping")
    extra = set(d) - allowed
    if extra:
        raise ModelSyntaxError(f"{where}: unknown key(s) {sorted(extra)}")


def _int(v, where):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ModelSyntaxError(f"{where}: expected an integer, got {v!r}")
    return v


def _kernel(v, where):
    if isinstance(v, int):
        return (v, v)
    if isinstance(v, list) and len(v) == 2:
        return (_int(v[0], where), _int(v[1], where))
    raise ModelSyntaxError(f"{where}: kernel must be an int or [k_y, k_x]")


def decode_weights(blob: dict, shape, where) -> QTensor:
    _reject_unknown(blob, _WEIGHT_KEYS, where)
    try:
        raw = bytes.fromhex("".join(str(blob["hex"]).split()))
    except ValueError:
        raise ModelSyntaxError(f"{where}: weight blob is not valid hex") from None
    if len(raw) % 2:
        raise ModelSyntaxError(f"{where}: weight blob has an odd byte count")
    data = np.frombuffer(raw, dtype="<i2")
    if data.size != int(np.prod(shape)):
        raise ModelSyntaxError(f"{where}: expected {int(np.prod(shape))} weights, got {data.size}")
    return QTensor(data.reshape(shape).astype(np.int16), QFormat(_int(blob["frac"], where)))


def parse_model(text: str) -> ModelGraph:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        pos = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ModelSyntaxError(f"syntax error{pos}: {getattr(e, 'problem', e)}") from None
    _reject_unknown(doc, _TOP_KEYS, "model")
    for key in ("input", "nodes"):
        if key not in doc:
            raise ModelSyntaxError(f"model: missing {key!r}")
    inp = doc["input"]
    _reject_unknown(inp, _INPUT_KEYS, "input")
    try:
        in_shape = TensorShape(*[_int(v, "input.shape") for v in inp["shape"]])
    except TypeError:
        raise ModelSyntaxError("input.shape must have 4 entries [n, c, h, w]") from None
    nodes, blobs = [], {}
    for i, nd in enumerate(doc["nodes"] or []):
        where = f"nodes[{i}]"
        _reject_unknown(nd, _NODE_KEYS, where)
        if "id" not in nd or "kind" not in nd:
            raise ModelSyntaxError(f"{where}: id and kind are required")
        try:
            kind = LayerKind(nd["kind"])
        except ValueError:
            raise ModelSyntaxError(f"{where}: unknown layer kind {nd['kind']!r}") from None
        kw = {}
        for key in ("out_channels", "stride", "padding", "dilation", "groups", "upsample", "frac"):
            if key in nd:
                kw[key] = _int(nd[key], f"{where}.{key}")
        for key in ("scale", "shift"):
            if key in nd:
                kw[key] = float(nd[key])
        if "kernel" in nd:
            kw["kernel"] = _kernel(nd["kernel"], f"{where}.kernel")
        inputs = nd.get("inputs", [])
        if isinstance(inputs, str):
            inputs = [inputs]
        node = LayerNode(id=str(nd["id"]), kind=kind, inputs=tuple(map(str, inputs)), **kw)
        nodes.append(node)
        if "weights" in nd:
            blobs[node.id] = nd["weights"]
    graph = ModelGraph(
        input_id=str(inp.get("id", "input")),
        input_shape=in_shape,
        nodes=nodes,
        outputs=[str(o) for o in doc.get("outputs") or []],
        input_frac=_int(inp.get("frac", 12), "input.frac"),
        seed=_int(doc.get("seed", 0), "seed"),
        name=str(doc.get("name", "model")),
    )
    if not graph.outputs:
        used = {i for n in nodes for i in n.inputs}
        graph.outputs = [n.id for n in nodes if n.id not in used]
    graph = infer_shapes(graph) if nodes else graph
    for nid, blob in blobs.items():
        node = graph.node(nid)
        if not node.kind.is_conv:
            raise ModelSyntaxError(f"{nid}: weights given for a {node.kind.value} node")
        graph.weights[nid] = decode_weights(blob, weight_shape(node, graph.shape_of(node.inputs[0]).c),
                                            f"{nid}.weights")
    return validate(graph)


def emit_model(graph: ModelGraph, include_weights: bool = True) -> str:
    doc = {"name": graph.name, "seed": graph.seed,
           "input": {"id": graph.input_id, "shape": list(graph.input_shape.as_tuple()),
                     "frac": graph.input_frac}}
    nodes = []
    defaults = LayerNode(id="", kind=LayerKind.RELU, inputs=())
    for n in graph.nodes:
        d = {"id": n.id, "kind": n.kind.value, "inputs": list(n.inputs)}
        for key in ("out_channels", "stride", "padding", "dilation", "groups", "upsample",
                    "frac", "scale", "shift"):
            v = getattr(n, key)
            if v != getattr(defaults, key):
                d[key] = v
        if n.kernel != (1, 1):
            d["kernel"] = list(n.kernel)
        if include_weights and n.id in graph.weights:
            w = graph.weights[n.id]
            d["weights"] = {"frac": w.qformat.frac_bits,
                            "hex": w.data.astype("<i2").tobytes().hex()}
        nodes.append(d)
    doc["nodes"] = nodes
    doc["outputs"] = list(graph.outputs)
    return yaml.dump(doc, Dumper=_Dumper, sort_keys=False, width=1 << 20)


def load_model(path) -> ModelGraph:
    with open(path) as f:
        return parse_model(f.read())
