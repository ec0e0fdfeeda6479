"""Column-output cascade: slice add -> eltwise add -> relu -> requantize.

Every stage can be bypassed; the order is fixed. Sums stay at accumulator
width until the requantize stage, and inter-slice partials are kept at full
width in the OB partial region.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import align, check_acc, requantize_array
from .mapper import FusionChain
from .memsys import OutputBufferSet


class CascadeError(RuntimeError):
    pass


@dataclass
class CascadeState:
    chain: FusionChain
    conv_frac: int                 # fraction of the raw column sums
    acc_frac: int                  # fraction after eltwise alignment
    out_frac: int | None           # None: write the wide sum (no requantize)
    branch: np.ndarray | None = None   # flat branch tensor, same indexing as the output
    branch_frac: int | None = None

    def stages(self):
        return {s: e for s, e in zip(FusionChain.STAGES, self.chain.enables())}


def configure_cascade(chain: FusionChain, *, out_shape, conv_frac: int, out_frac: int | None,
                      branch: np.ndarray | None = None, branch_frac: int | None = None) -> CascadeState:
    acc_frac = conv_frac
    flat = None
    if chain.eltwise:
        if branch is None or branch_frac is None:
            raise CascadeError("eltwise stage enabled without a branch tensor")
        if tuple(branch.shape) != tuple(out_shape):
            raise CascadeError(f"branch shape {tuple(branch.shape)} != conv output {tuple(out_shape)}")
        acc_frac = max(conv_frac, branch_frac)
        flat = np.asarray(branch, dtype=np.int64).reshape(-1)
    if chain.requantize and out_frac is None:
        raise CascadeError("requantize stage needs an output format")
    return CascadeState(chain, conv_frac, acc_frac, out_frac if chain.requantize else None, flat, branch_frac)


def apply_cascade(acc: np.ndarray, state: CascadeState, position, ob: OutputBufferSet,
                  slice_idx: int = 0, n_slices: int = 1):
    """Run one column-output vector through the cascade.

    ``acc`` is (2n,) or (fu, 2n); ``position`` is (final_addr, partial_addr,
    meta, mask) with one address per leading row. Non-final slices only update
    the partial region. Returns the values written (None for a partial).
    """
    addrs, paddrs, meta, mask = position
    v = np.atleast_2d(np.asarray(acc, dtype=np.int64))
    addrs, paddrs = np.atleast_1d(addrs), np.atleast_1d(paddrs)
    meta, mask = np.atleast_2d(meta), np.atleast_2d(mask)
    if state.chain.slice_add and slice_idx > 0:
        v = v + np.stack([ob.read_partial(int(a)) for a in paddrs])
    check_acc(v, "cascade")
    if slice_idx < n_slices - 1:
        if not state.chain.slice_add:
            raise CascadeError("multi-slice layer without the slice-add stage")
        for a, row in zip(paddrs, v):
            ob.write_partial(int(a), row)
        return None
    if state.chain.eltwise:
        b = np.zeros_like(v)
        b[mask] = state.branch[meta[mask]]
        v = align(v, state.conv_frac, state.acc_frac) + align(b, state.branch_frac, state.acc_frac)
        check_acc(v, "eltwise")
    if state.chain.relu:
        v = np.maximum(v, 0)
    if state.out_frac is not None:
        v = requantize_array(v, state.acc_frac, state.out_frac).astype(np.int64)
    for a, row, mt, mk in zip(addrs, v, meta, mask):
        ob.write_vector(int(a), row, mt, mk)
    return v
