"""Lookup-table super-resolution with companded quantization and dual-path
fused interpolation.

Pipeline: train tiny per-pixel subnetworks (pretrain, then quantization-aware
fine-tuning under a frozen high-precision teacher), calibrate and search the
companding breakpoints, tabulate every subnetwork over its quantized index
grid, and run inference by table fetch + interpolation on top of a bilinear
base image.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DivergenceError, IntegrityError,
                     IqlutError)
from .imaging import (ImagePlane, load_image, luminance, modcrop,
                      rgb_to_ycbcr, save_image, shave, ycbcr_to_rgb)
from .interp import dpfi_eval, fuse, fusion_weight, table_lookup
from .lut import (LutModel, LutStage, LutTable, build_lut, calibrate,
                  convert_model, lut_infer, lut_size_bytes, oracle_bound,
                  quantized_reference, serialize, deserialize,
                  table_region_bytes)
from .metrics import MetricReport, psnr, ssim
from .model import Model, ModelSpec, SubnetParams, init_model, spec_from_name
from .network import (expanded_conv, forward_full, pixel_shuffle,
                      residual_blend, subnet_forward, upsample_block)
from .quantize import (ActRange, NonUniformQuantizer, StageQuant,
                       greedy_search_ab)
from .resize import degrade, resize
from .train import TrainConfig, TrainState, distill, loss_total, train_step

__all__ = [
    "ActRange", "ConfigError", "DataError", "DivergenceError", "ImagePlane",
    "IntegrityError", "IqlutError", "LutModel", "LutStage", "LutTable",
    "MetricReport", "Model", "ModelSpec", "NonUniformQuantizer", "StageQuant",
    "SubnetParams", "TrainConfig", "TrainState", "build_lut", "calibrate",
    "convert_model", "degrade", "deserialize", "distill", "dpfi_eval",
    "expanded_conv", "forward_full", "fuse", "fusion_weight",
    "greedy_search_ab", "init_model", "load_image", "loss_total", "luminance",
    "lut_infer", "lut_size_bytes", "modcrop", "oracle_bound", "pixel_shuffle",
    "psnr", "quantized_reference", "residual_blend", "resize", "rgb_to_ycbcr",
    "save_image", "serialize", "shave", "spec_from_name", "ssim",
    "subnet_forward", "table_lookup", "table_region_bytes", "train_step",
    "upsample_block", "ycbcr_to_rgb",
]
