"""Random single-layer and residual-block models for equivalence sweeps."""
from __future__ import annotations

import numpy as np

from .model_ir import ModelGraph, parse_model

KERNELS = (1, 3, 5, 7)
STRIDES = (1, 2)
DILATIONS = (1, 2)
GROUPS = (1, 2)
C_INS = (3, 16, 32, 96, 100)
C_OUTS = (16, 32, 64, 384)


def _yaml(name, seed, c, h, w, nodes, frac=12):
    lines = [f"name: {name}", f"seed: {seed}", f"input: {{id: x, shape: [1, {c}, {h}, {w}], frac: {frac}}}", "nodes:"]
    for nd in nodes:
        lines.append("  - {" + ", ".join(f"{k}: {v}" for k, v in nd.items()) + "}")
    return "\n".join(lines) + "\n"


def random_layer(rng: np.random.Generator, kind: str | None = None) -> ModelGraph:
    """One conv-family layer, optionally with a relu, drawn from the sweep ranges."""
    kind = kind or rng.choice(["conv", "conv", "conv", "conv", "conv_transposed", "depthwise"])
    seed = int(rng.integers(1 << 30))
    k = int(rng.choice(KERNELS))
    s = int(rng.choice(STRIDES))
    d = int(rng.choice(DILATIONS)) if k > 1 else 1
    c_in = int(rng.choice(C_INS))
    c_out = int(rng.choice(C_OUTS))
    g = int(rng.choice(GROUPS)) if c_in % 2 == 0 else 1
    ke = (k - 1) * d + 1
    pad = int(rng.integers(0, ke // 2 + 1))
    if kind == "depthwise":
        h = int(rng.integers(ke, ke + 8))
        w = int(rng.integers(ke, ke + 8))
        node = {"id": "y", "kind": "depthwise", "inputs": "[x]", "out_channels": c_in, "kernel": k,
                "stride": s, "padding": pad, "dilation": d}
        return parse_model(_yaml("rand_dw", seed, c_in, h, w, [node]))
    if kind == "conv_transposed":
        u = 2
        lo = max(2, -(-(ke - 2 * pad) // u))
        h = int(rng.integers(lo, lo + 4))
        w = int(rng.integers(lo, lo + 4))
        node = {"id": "y", "kind": "conv_transposed", "inputs": "[x]", "out_channels": c_out, "kernel": k,
                "stride": 1, "padding": pad, "upsample": u, "groups": g}
        return parse_model(_yaml("rand_tc", seed, c_in, h, w, [node]))
    h = int(rng.integers(max(ke - 2 * pad, 1), max(ke - 2 * pad, 1) + 7))
    w = int(rng.integers(max(ke - 2 * pad, 1), max(ke - 2 * pad, 1) + 7))
    lk = "conv1x1" if k == 1 else ("conv_dilated" if d > 1 else "conv")
    nodes = [{"id": "y", "kind": lk, "inputs": "[x]", "out_channels": c_out, "kernel": k, "stride": s,
              "padding": pad, "dilation": d, "groups": g}]
    if rng.random() < 0.3:
        nodes.append({"id": "r", "kind": "relu", "inputs": "[y]"})
    return parse_model(_yaml("rand_conv", seed, c_in, h, w, nodes))


def random_residual_block(rng: np.random.Generator) -> ModelGraph:
    """conv -> (+ identity) -> relu, the branch being the block input."""
    seed = int(rng.integers(1 << 30))
    c = int(rng.choice((16, 32, 48, 64, 96)))
    k = int(rng.choice((1, 3)))
    h = int(rng.integers(3, 10))
    w = int(rng.integers(3, 10))
    nodes = [{"id": "a", "kind": "conv1x1" if k == 1 else "conv", "inputs": "[x]", "out_channels": c,
              "kernel": k, "padding": k // 2},
             {"id": "s", "kind": "add", "inputs": "[a, x]"}]
    if rng.random() < 0.8:
        nodes.append({"id": "r", "kind": "relu", "inputs": "[s]"})
    return parse_model(_yaml("rand_res", seed, c, h, w, nodes, frac=int(rng.integers(8, 14))))
