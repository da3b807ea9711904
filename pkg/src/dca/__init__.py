"""Deconfounded causal adaptation on a toy decoder."""

from .adapter import AdapterParams, AttentionTrace, augmented_attention, estimate_xg, init_adapters
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .loss import LossReport, causal_loss, total_loss
from .model import ModelConfig, ModelParams, forward, greedy_decode, init_params, plain_attention
from .tasks import Example, Tokenizer, encode_batch, gen_arithmetic, gen_date, gen_letter_concat
from .tensor import Tensor

__version__ = "0.1.0"
