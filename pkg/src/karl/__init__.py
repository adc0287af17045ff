"""Adaptive 1D image tokenization with loss-conditioned halting.

One encoder pass yields a token sequence plus per-token keep/halt
probabilities; the number of active tokens doubles as a per-image
complexity estimate. See README.md for the CLI and training recipes.
"""

from .config import Config, parse_config, validate
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    DataError,
    InputError,
    KarlError,
)
from .data import Image, make_mixed, make_synthetic
from .base_tokenizer import fit_base, encode2d, decode2d
from .karl_model import (
    EpsilonCondition,
    HaltingVector,
    LatentSequence,
    decode,
    encode,
    init_karl,
    quantize,
    reconstruct,
    select_active,
)
from .training import train
from .kc_analysis import KCEstimate, kc_one_pass, kc_oracle_search
from .metrics import pixel_l1, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "Config", "parse_config", "validate",
    "KarlError", "ConfigError", "InputError", "DataError",
    "CheckpointMismatchError",
    "Image", "make_synthetic", "make_mixed",
    "fit_base", "encode2d", "decode2d",
    "LatentSequence", "HaltingVector", "EpsilonCondition",
    "init_karl", "encode", "quantize", "select_active", "decode",
    "reconstruct",
    "train",
    "KCEstimate", "kc_one_pass", "kc_oracle_search",
    "pixel_l1", "psnr", "ssim",
    "__version__",
]
