"""Cycle-approximate simulator and mapping compiler for a supertile CNN accelerator."""
from .fixedpoint import QFormat, QTensor, choose_qformat, dequantize, quantize, requantize
from .hwconfig import HwConfig, load_hwconfig, parse_hwconfig
from .mapper import ExecutionPlan, lower_model
from .model_ir import LayerKind, ModelGraph, load_model, parse_model
from .perf import peak_throughput, report_from_sim
from .runtime import simulate

__all__ = [
    "ExecutionPlan", "HwConfig", "LayerKind", "ModelGraph", "QFormat", "QTensor", "choose_qformat",
    "dequantize", "load_hwconfig", "load_model", "lower_model", "parse_hwconfig", "parse_model",
    "peak_throughput", "quantize", "report_from_sim", "requantize", "simulate",
]
