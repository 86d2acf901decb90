"""Continued pretraining on a small compute budget: bf16 emulation, a tiny LM, tokenizer swaps, and a memory planner."""

from .numerics import (
    BF16,
    FP32,
    WIDE,
    FloatFormat,
    NearestEven,
    Stochastic,
    exact_vanish_threshold,
    heuristic_vanish_threshold,
    quantize,
    ulp,
)
from .precision import MIXED_BF16, PURE_BF16, WIDE_MIXED, WIDE_PURE, PrecisionPolicy
from .model import LayerKind, ModelConfig, init_model
from .tokenizer import BPETokenizer, TokenizerModel, train_bpe
from .embedding_init import EmbeddingInitializer, PPMIEmbedding
from .evaluation import word_normalized_nll
from .planner import HardwareSpec, RunConfigPoint, best_config
from .experiments import ExperimentConfig

__version__ = "0.1.0"

__all__ = [
    "BF16",
    "FP32",
    "WIDE",
    "FloatFormat",
    "NearestEven",
    "Stochastic",
    "quantize",
    "exact_vanish_threshold",
    "heuristic_vanish_threshold",
    "ulp",
    "PrecisionPolicy",
    "PURE_BF16",
    "MIXED_BF16",
    "WIDE_PURE",
    "WIDE_MIXED",
    "LayerKind",
    "ModelConfig",
    "init_model",
    "BPETokenizer",
    "TokenizerModel",
    "train_bpe",
    "EmbeddingInitializer",
    "PPMIEmbedding",
    "word_normalized_nll",
    "HardwareSpec",
    "RunConfigPoint",
    "best_config",
    "ExperimentConfig",
]
