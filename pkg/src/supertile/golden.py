"""Brute-force fixed-point reference executor.

Everything here is written from the layer definitions alone: plain direct
convolution over kernel taps, exact integer sums, exact rational means.  It
shares nothing with the engine datapath except the scalar requantize rule.

Tensor file format (also used by the CLI)::

    offset 0   4 bytes  magic b"STQT"
    offset 4   u8       version (1)
    offset 5   u8       frac_bits
    offset 6   u8       ndim
    offset 7   u8       reserved (0)
    offset 8   ndim x u32 little-endian dimensions
    then       prod(dims) x int16 little-endian payload, C order
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .fixedpoint import INT16_MAX, INT16_MIN, QFormat, QTensor, choose_qformat, requantize_array
from .model_ir import LayerKind, ModelError, ModelGraph, topo_order

MAGIC = b"STQT"


class TensorFileError(ValueError):
    pass


@dataclass
class Wide:
    """Exact integer tensor with an implied fraction width (no 16-bit rounding)."""

    data: np.ndarray
    frac: int

    def __eq__(self, other):
        return (isinstance(other, Wide) and self.frac == other.frac
                and bool(np.array_equal(self.data, other.data)))


def _exact(t) -> Wide:
    if isinstance(t, Wide):
        return t
    return Wide(t.data.astype(np.int64), t.qformat.frac_bits)


def _pad(x, pad, value=0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _conv_int(x, w, stride, pad, dilation, groups):
    """Direct convolution over taps. x: N,C,H,W int64; w: Co,Ci/g,kh,kw."""
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    if c != cig * groups or co % groups:
        raise ModelError(f"conv shape mismatch: input {c} channels, weights {w.shape}, groups {groups}")
    xp = _pad(x, pad)
    oh = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=np.int64)
    cog = co // groups
    w = w.astype(np.int64)
    for g in range(groups):
        xs = xp[:, g * cig:(g + 1) * cig]
        wg = w[g * cog:(g + 1) * cog]
        for ky in range(kh):
            for kx in range(kw):
                y0, x0 = ky * dilation, kx * dilation
                patch = xs[:, :, y0:y0 + stride * (oh - 1) + 1:stride, x0:x0 + stride * (ow - 1) + 1:stride]
                # (N, Ci, oh, ow) x (Co, Ci) -> (N, Co, oh, ow)
                out[:, g * cog:(g + 1) * cog] += np.einsum("nchw,oc->nohw", patch, wg[:, :, ky, kx])
    bound = int(np.abs(w).max(initial=0)) * (1 << 15) * cig * kh * kw
    assert bound < 1 << 62, "oracle int64 headroom exceeded"
    return out


def ref_conv2d(input: QTensor, weights: QTensor, stride=1, padding=0, dilation=1, groups=1) -> Wide:
    return Wide(_conv_int(_exact(input).data, weights.data, stride, padding, dilation, groups),
                _exact(input).frac + weights.qformat.frac_bits)


def upsample_zeros(x: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * factor, w * factor), dtype=x.dtype)
    out[:, :, ::factor, ::factor] = x
    return out


def ref_transposed_conv(input: QTensor, weights: QTensor, upsample=2, stride=1, padding=0,
                        dilation=1, groups=1) -> Wide:
    x = _exact(input)
    up = upsample_zeros(x.data, upsample)
    return Wide(_conv_int(up, weights.data, stride, padding, dilation, groups),
                x.frac + weights.qformat.frac_bits)


def div_round_half_even(num: np.ndarray, den: int) -> np.ndarray:
    q, r = np.divmod(num, den)
    up = (2 * r > den) | ((2 * r == den) & (q % 2 == 1))
    return q + up


def _windows(x, k, stride, pad, fill):
    n, c, h, w = x.shape
    xp = _pad(x, pad, fill)
    oh = (h + 2 * pad - k[0]) // stride + 1
    ow = (w + 2 * pad - k[1]) // stride + 1
    for ky in range(k[0]):
        for kx in range(k[1]):
            yield xp[:, :, ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride]


def ref_pool_pointwise(input, kind: LayerKind, *, kernel=(1, 1), stride=1, padding=0,
                       dilation=1, other=None, weights: QTensor | None = None, scalars=None, out_frac=None):
    """Reference for the filter-like and pointwise operators.

    Returns a :class:`QTensor` when ``out_frac`` is given (or the operator keeps
    its input format), otherwise the exact :class:`Wide` result.
    """
    x = _exact(input)
    if kind == LayerKind.MAXPOOL:
        res = None
        for win in _windows(x.data, kernel, stride, padding, INT16_MIN):
            res = win.copy() if res is None else np.maximum(res, win)
        exact = Wide(res, x.frac)
    elif kind == LayerKind.AVGPOOL:
        total = sum(_windows(x.data, kernel, stride, padding, 0))
        exact = Wide(div_round_half_even(total, kernel[0] * kernel[1]), x.frac)
    elif kind == LayerKind.RELU:
        exact = Wide(np.maximum(x.data, 0), x.frac)
    elif kind == LayerKind.RELU6:
        six = min(6 << x.frac, INT16_MAX)
        exact = Wide(np.clip(x.data, 0, six), x.frac)
    elif kind == LayerKind.LINEAR:
        a, fa, b, fb = scalars
        f = max(fa + x.frac, fb)
        exact = Wide((a * x.data << (f - fa - x.frac)) + (np.int64(b) << (f - fb)), f)
    elif kind == LayerKind.ADD:
        y = _exact(other)
        f = max(x.frac, y.frac)
        exact = Wide((x.data << (f - x.frac)) + (y.data << (f - y.frac)), f)
    elif kind == LayerKind.DEPTHWISE:
        c = x.data.shape[1]
        exact = Wide(_conv_int(x.data, weights.data, stride, padding, dilation, c), x.frac + weights.qformat.frac_bits)
    elif kind == LayerKind.QUANTIZE:
        exact = x
    else:
        raise ModelError(f"no reference for {kind.value}")
    if out_frac is None and kind in _FORMAT_KEEPING and not isinstance(input, Wide):
        out_frac = x.frac
    if out_frac is None:
        return exact
    return QTensor(requantize_array(exact.data, exact.frac, out_frac), QFormat(out_frac))


_FORMAT_KEEPING = (LayerKind.MAXPOOL, LayerKind.AVGPOOL, LayerKind.RELU, LayerKind.RELU6)


def _exact_node(node, graph, vals, scalars):
    x = vals[node.inputs[0]]
    kind = node.kind
    if kind in (LayerKind.CONV, LayerKind.CONV1X1, LayerKind.CONV_DILATED):
        return ref_conv2d(x, graph.weights[node.id], node.stride, node.padding, node.dilation, node.groups)
    if kind == LayerKind.CONV_TRANSPOSED:
        return ref_transposed_conv(x, graph.weights[node.id], node.upsample, node.stride, node.padding,
                                   node.dilation, node.groups)
    if kind == LayerKind.DEPTHWISE:
        return ref_pool_pointwise(x, kind, stride=node.stride, padding=node.padding,
                                  dilation=node.dilation, weights=graph.weights[node.id])
    other = vals[node.inputs[1]] if kind == LayerKind.ADD else None
    r = ref_pool_pointwise(x, kind, kernel=node.kernel, stride=node.stride, padding=node.padding,
                           other=other, scalars=(scalars or {}).get(node.id))
    return _exact(r) if isinstance(r, QTensor) else r


def ref_run_model(graph: ModelGraph, input: QTensor, formats: dict | None = None,
                  wide=(), scalars: dict | None = None):
    """Execute ``graph`` layer by layer.

    ``formats`` maps node id -> output frac bits, or None for a node whose
    result stays at exact precision (a non-final member of a fused chain).
    With ``formats=None`` every narrow format is chosen from the data
    (calibration); the chosen formats are returned alongside the tensors.

    Returns ``(outputs, tensors, formats)``.
    """
    if not graph.nodes:
        raise ModelError("empty graph")
    if input.shape != graph.input_shape.as_tuple():
        raise ModelError(f"input shape {input.shape} != {graph.input_shape.as_tuple()}")
    calibrating = formats is None
    formats = {} if calibrating else dict(formats)
    vals = {graph.input_id: input}
    for node in topo_order(graph):
        if node.kind == LayerKind.LRN:
            raise ModelError(f"{node.id}: lrn has no reference implementation")
        exact = _exact_node(node, graph, vals, scalars)
        if calibrating:
            in_narrow = not isinstance(vals[node.inputs[0]], Wide)
            if node.id in wide:
                frac = None
            elif node.frac is not None:
                frac = node.frac
            elif node.kind in _FORMAT_KEEPING and in_narrow:
                frac = exact.frac
            else:
                frac = choose_qformat(exact.data.astype(np.float64) * 2.0 ** -exact.frac).frac_bits
            formats[node.id] = frac
        frac = formats[node.id]
        vals[node.id] = exact if frac is None else QTensor(requantize_array(exact.data, exact.frac, frac),
                                                           QFormat(frac))
    tensors = {k: v for k, v in vals.items() if k != graph.input_id}
    outputs = {o: tensors[o] for o in graph.outputs}
    return outputs, tensors, formats


# ----------------------------------------------------------------- tensor files

def dump_tensor(t: QTensor) -> bytes:
    head = MAGIC + struct.pack("<BBBB", 1, t.qformat.frac_bits, t.data.ndim, 0)
    head += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
    return head + t.data.astype("<i2").tobytes()


def load_tensor(blob: bytes) -> QTensor:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    version, frac, ndim, _ = struct.unpack_from("<BBBB", blob, 4)
    if version != 1 or frac > 15 or ndim == 0:
        raise TensorFileError(f"unsupported header version={version} frac={frac} ndim={ndim}")
    if len(blob) < 8 + 4 * ndim:
        raise TensorFileError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    payload = blob[8 + 4 * ndim:]
    if len(payload) != 2 * int(np.prod(dims)):
        raise TensorFileError(f"payload is {len(payload)} bytes, expected {2 * int(np.prod(dims))}")
    data = np.frombuffer(payload, dtype="<i2").reshape(dims).astype(np.int16)
    return QTensor(data, QFormat(frac))


def write_tensor(path, t: QTensor):
    with open(path, "wb") as f:
        f.write(dump_tensor(t))


def read_tensor(path) -> QTensor:
    with open(path, "rb") as f:
        return load_tensor(f.read())
