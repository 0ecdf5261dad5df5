"""Geometry-aware FP8 scale calibration for transformer attention."""

from .bounds import (
    CalibrationResult,
    CalibrationTarget,
    ModelDims,
    alpha_min,
    calibrate,
    interaction_bound,
    naive_bound,
    solve_gamma,
)
from .fp8 import E4M3, DelayedScaleState, decode, encode, geometry_scale, quantize_tensor
from .spectral import AttentionWeights, PowerIterState, cold_start, power_step

__version__ = "0.1.0"
