"""Word-level LSTM language models in numpy, with pruning, 8-bit quantization,
low-rank and tensor-train compression, and a compact binary model format."""

from .compress import (
    CompressionReport,
    PruneMask,
    QuantizedTensor,
    compression_report,
    dequantize,
    lowrank_factorize,
    prune,
    prune_model,
    quantize,
    quantize_model,
    tt_compress,
)
from .corpus import split_corpus, synthetic_corpus
from .data import BatchPlan, Vocabulary, batchify, build_vocab, decode, encode, read_corpus
from .errors import *  # noqa: F401,F403
from .linalg import SvdResult, svd, truncated_svd
from .model import (
    LmModel,
    ModelConfig,
    count_params,
    forward,
    init_model,
    model_size_bytes,
    perplexity,
)
from .store import load, save
from .train import TrainConfig, grad_check, train
from .tt import TTConfig, TTMatrix, tt_from_dense, tt_matvec, tt_to_dense

__version__ = "0.1.0"
