"""Quantization-aware training toolkit for small speaker-embedding models."""

from .corpus import CorpusConfig, SyntheticCorpus
from .evaluation import compute_eer, evaluate
from .exceptions import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    NonFiniteError,
    SigmaFloorWarning,
    SVQuantError,
    TrainingDivergedError,
    UsageError,
)
from .models import AamHead, ModelConfig, build_model, count_macs, count_params, model_size_bytes
from .packfile import pack, pack_model, unpack
from .quantizer import (
    QuantizerConfig,
    QuantScheme,
    WeightQuantizer,
    dequantize,
    fake_quantize,
    pot_levels,
    project,
    quantize,
    uniform_levels,
)
from .training import QuantizedSpeakerEmbedder, SpeakerEmbedder, TrainConfig, finetune_quantized, train_fp32

__version__ = "0.1.0"

__all__ = [
    "AamHead",
    "ConfigurationError",
    "CorpusConfig",
    "CorruptionError",
    "DimensionError",
    "ModelConfig",
    "NonFiniteError",
    "QuantScheme",
    "QuantizedSpeakerEmbedder",
    "QuantizerConfig",
    "SVQuantError",
    "SigmaFloorWarning",
    "SpeakerEmbedder",
    "SyntheticCorpus",
    "TrainConfig",
    "TrainingDivergedError",
    "UsageError",
    "WeightQuantizer",
    "build_model",
    "compute_eer",
    "count_macs",
    "count_params",
    "dequantize",
    "evaluate",
    "fake_quantize",
    "finetune_quantized",
    "model_size_bytes",
    "pack",
    "pack_model",
    "pot_levels",
    "project",
    "quantize",
    "train_fp32",
    "uniform_levels",
    "unpack",
]
