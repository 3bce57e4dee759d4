"""Predictor-corrector inversion and region-adaptive editing for flow-matching samplers."""
import os

# FLOWINV_THREADS also caps BLAS threads, which only works before numpy loads.
if os.environ.get("FLOWINV_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["FLOWINV_THREADS"])

from .kernels import BACKEND  # noqa: E402
from .tensor_core import NonFiniteError, TimeGrid, uniform_grid  # noqa: E402
from .fields import (AnalyticGaussianField, ConditionalAnalyticField, DDIMAnalyticPredictor,  # noqa: E402
                     TimeOnlyField, ZeroField, make_step_rule)
from .samplers import AT_PREV, AT_TARGET, roundtrip, roundtrip_error, sample, vanilla_invert  # noqa: E402
from .uni_inv import UNI_INV, local_error_study, reconstruct, uni_inv  # noqa: E402
from .uni_edit import EditConfig, reformed_velocity, uni_edit  # noqa: E402
from .metrics import psnr, region_report, ssim  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "NonFiniteError", "TimeGrid", "uniform_grid",
    "AnalyticGaussianField", "ConditionalAnalyticField", "DDIMAnalyticPredictor", "TimeOnlyField", "ZeroField",
    "make_step_rule", "AT_PREV", "AT_TARGET", "roundtrip", "roundtrip_error", "sample", "vanilla_invert",
    "UNI_INV", "local_error_study", "reconstruct", "uni_inv", "EditConfig", "reformed_velocity", "uni_edit",
    "psnr", "region_report", "ssim",
]
