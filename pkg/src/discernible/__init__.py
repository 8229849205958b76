"""Binary-bottleneck image codec trained to keep compressed images recognisable.

The codec is an encoder / stochastic binarizer / decoder stack working on
32x32 tiles. Besides pixel error it can be trained against a frozen feature
extractor (a squared feature distance plus a kernel MMD between feature
sets), which keeps downstream classifiers' decisions close to what they
would be on the originals.

Typical use::

    from discernible import CodecModel, compress_image, decompress_image, pack, unpack
    codes = compress_image(model, image)
    blob = pack(codes, image.shape[:2])
"""

from .bitstream import pack, unpack
from .codec import CodecArch, CodecModel, LatentCode, compress_image, decode, decompress_image, encode
from .errors import ConfigError, CorruptionError, DICError, FormatError, NumericError, ShapeError
from .harness import EvalResult, ablation_table, evaluate_downstream, lambda_sweep
from .metrics import QualityReport, bpp, ms_ssim, psnr
from .mmd import KernelMixture, mmd_squared
from .perceptual import Classifier, FeatureExtractor, perceptual_loss
from .trainer import LossBreakdown, TrainConfig, composite_loss, train

__version__ = "0.1.0"

__all__ = [
    "CodecArch", "CodecModel", "LatentCode", "encode", "decode", "compress_image", "decompress_image",
    "pack", "unpack", "bpp", "psnr", "ms_ssim", "QualityReport",
    "KernelMixture", "mmd_squared", "Classifier", "FeatureExtractor", "perceptual_loss",
    "TrainConfig", "LossBreakdown", "composite_loss", "train",
    "EvalResult", "evaluate_downstream", "ablation_table", "lambda_sweep",
    "DICError", "ConfigError", "ShapeError", "FormatError", "CorruptionError", "NumericError",
]
