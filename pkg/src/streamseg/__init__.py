"""Streaming fixed-point CNN segmentation toolkit: model IR, bit-accurate
stream kernels, a cycle-level dataflow simulator and an analytic cost model."""

from .fixed_point import FxFormat, FxTensor, FxValue, parse_format, quantize, requantize
from .model_ir import ModelGraph, build_enet, fold_batchnorm, validate
from .dataflow_sim import SimConfig, optimize_fifo_depths, simulate
from .cost_model import buffer_elements, estimate
from .seg_metrics import accuracy, confusion_matrix, miou

__all__ = [
    "FxFormat", "FxTensor", "FxValue", "parse_format", "quantize", "requantize",
    "ModelGraph", "build_enet", "fold_batchnorm", "validate",
    "SimConfig", "optimize_fifo_depths", "simulate",
    "buffer_elements", "estimate",
    "accuracy", "confusion_matrix", "miou",
]
