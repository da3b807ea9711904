"""Miniature LLaMA-style decoder: RoPE, RMSNorm, SiLU-gated MLP, pre-norm blocks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 99
    max_seq_len: int = 96
    mlp_dim: int = 192
    adapter_layers: int = 4
    adapter_len: int = 10
    general_len: int = 2
    causal_layers: int = 4
    alpha: float = 1.0
    rope_base: float = 10000.0
    rms_eps: float = 1e-6
    causal_pool: str = "none"

    def __post_init__(self):
        self.validate()

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def first_adapter_layer(self) -> int:
        return self.n_layers - self.adapter_layers

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "max_seq_len", "mlp_dim",
                     "adapter_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if not 0 < self.general_len < self.adapter_len:
            raise ConfigError(
                f"general_len (H={self.general_len}) must satisfy 0 < H < adapter_len (M={self.adapter_len})"
            )
        if not 0 < self.adapter_layers <= self.n_layers:
            raise ConfigError(
                f"adapter_layers (L={self.adapter_layers}) must satisfy 0 < L <= n_layers ({self.n_layers})"
            )
        if not 0 < self.causal_layers <= self.adapter_layers:
            raise ConfigError(
                f"causal_layers (L'={self.causal_layers}) must satisfy 0 < L' <= adapter_layers ({self.adapter_layers})"
            )
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise ConfigError(f"alpha must be a finite nonnegative number, got {self.alpha}")
        if self.rope_base <= 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        if not 0 < self.rms_eps < 1:
            raise ConfigError(f"rms_eps must be a small positive number, got {self.rms_eps}")
        if self.causal_pool not in ("none", "mean"):
            raise ConfigError(f"causal_pool must be 'none' or 'mean', got {self.causal_pool!r}")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LayerParams:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


@dataclass
class ModelParams:
    embed: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    head: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named().items():
                out[f"layers.{i}.{k}"] = v
        out["final_norm"] = self.final_norm
        out["head"] = self.head
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag
            t.grad = None

    @classmethod
    def from_named(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
        layers = [
            LayerParams(**{f.name: Tensor(arrays[f"layers.{i}.{f.name}"]) for f in dataclasses.fields(LayerParams)})
            for i in range(cfg.n_layers)
        ]
        params = cls(Tensor(arrays["embed"]), layers, Tensor(arrays["final_norm"]), Tensor(arrays["head"]))
        check_param_shapes(cfg, params)
        return params


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, f, v = cfg.model_dim, cfg.mlp_dim, cfg.vocab_size
    shapes = {"embed": (v, c)}
    for i in range(cfg.n_layers):
        shapes.update({
            f"layers.{i}.attn_norm": (c,),
            f"layers.{i}.wq": (c, c),
            f"layers.{i}.wk": (c, c),
            f"layers.{i}.wv": (c, c),
            f"layers.{i}.wo": (c, c),
            f"layers.{i}.mlp_norm": (c,),
            f"layers.{i}.w_gate": (c, f),
            f"layers.{i}.w_up": (c, f),
            f"layers.{i}.w_down": (f, c),
        })
    shapes["final_norm"] = (c,)
    shapes["head"] = (c, v)
    return shapes


def check_param_shapes(cfg: ModelConfig, params: ModelParams) -> None:
    want = expected_shapes(cfg)
    got = {k: t.shape for k, t in params.named().items()}
    if want != got:
        bad = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
        raise ConfigError(f"parameter shapes do not match config: {bad[:5]}")


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    c, f, v = cfg.model_dim, cfg.mlp_dim, cfg.vocab_size

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape))

    layers = [
        LayerParams(
            attn_norm=Tensor(np.ones(c)),
            wq=normal(c, c), wk=normal(c, c), wv=normal(c, c), wo=normal(c, c),
            mlp_norm=Tensor(np.ones(c)),
            w_gate=normal(c, f), w_up=normal(c, f), w_down=normal(f, c),
        )
        for _ in range(cfg.n_layers)
    ]
    return ModelParams(normal(v, c), layers, Tensor(np.ones(c)), normal(c, v))


# ---------------------------------------------------------------------
# attention pieces
# ---------------------------------------------------------------------
@lru_cache(maxsize=64)
def rope_tables(seq_len: int, head_dim: int, base: float, offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(offset, offset + seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return cos, sin


@lru_cache(maxsize=64)
def causal_mask(seq_len: int) -> np.ndarray:
    m = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    m.flags.writeable = False
    return m


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, C] -> [B, h, T, d]"""
    b, t, c = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, c // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, h, T, d] -> [B, T, C]"""
    b, h, t, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def project_qkv(x: Tensor, layer: LayerParams, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Head-split query/key/value for normed input ``x``; q and k carry rotary positions."""
    cos, sin = rope_tables(x.shape[1], cfg.head_dim, cfg.rope_base)
    q = T.rotary(split_heads(x @ layer.wq, cfg.n_heads), cos, sin)
    k = T.rotary(split_heads(x @ layer.wk, cfg.n_heads), cos, sin)
    v = split_heads(x @ layer.wv, cfg.n_heads)
    return q, k, v


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    return T.scale(q @ T.transpose(k), 1.0 / math.sqrt(q.shape[-1]))


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Causal softmax over the prompt tokens. Returns (probabilities, mixed values)."""
    probs = T.softmax(attention_scores(q, k), axis=-1, mask=causal_mask(q.shape[2]))
    return probs, probs @ v


def plain_attention(x: Tensor, layer: LayerParams, cfg: ModelConfig) -> Tensor:
    q, k, v = project_qkv(x, layer, cfg)
    _, mixed = vanilla_attention(q, k, v)
    return merge_heads(mixed) @ layer.wo


def mlp(x: Tensor, layer: LayerParams) -> Tensor:
    return (T.silu(x @ layer.w_gate) * (x @ layer.w_up)) @ layer.w_down


# ---------------------------------------------------------------------
# forward / decode
# ---------------------------------------------------------------------
class ForwardResult(NamedTuple):
    logits: Tensor
    traces: list = []
    xg: list = []


def forward(params: ModelParams, adapters, tokens, cfg: ModelConfig, *, trace: bool = False) -> ForwardResult:
    """Run the decoder on integer ``tokens`` of shape [batch, seq].

    With ``adapters`` the topmost ``cfg.adapter_layers`` blocks use gated
    adapter attention and ``xg`` holds one X_G tensor per adapted layer
    (bottom to top). ``trace=True`` additionally records per-head score
    partitions; it needs a single-sample batch.
    """
    from .adapter import augmented_attention

    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ConfigError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ConfigError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ConfigError(f"token ids must lie in [0, {cfg.vocab_size})")
    if trace and tokens.shape[0] != 1:
        raise ConfigError("trace=True requires a batch of exactly one sequence")

    h = T.embedding_lookup(params.embed, tokens)
    traces, xgs = [], []
    first = cfg.first_adapter_layer
    for i, layer in enumerate(params.layers):
        x = T.rms_norm(h, layer.attn_norm, cfg.rms_eps)
        if adapters is not None and i >= first:
            attn, tr, xg = augmented_attention(x, layer, adapters.layers[i - first], cfg, layer_index=i, trace=trace)
            traces.extend(tr)
            xgs.append(xg)
        else:
            attn = plain_attention(x, layer, cfg)
        h = h + attn
        h = h + mlp(T.rms_norm(h, layer.mlp_norm, cfg.rms_eps), layer)
    logits = T.rms_norm(h, params.final_norm, cfg.rms_eps) @ params.head
    return ForwardResult(logits, traces, xgs)


def greedy_decode(params: ModelParams, adapters, prompt, max_new: int, stop_token: int,
                  cfg: ModelConfig) -> list[int]:
    """Append the argmax token until ``stop_token`` (not included) or ``max_new`` tokens."""
    return greedy_decode_batch(params, adapters, [list(prompt)], max_new, stop_token, cfg)[0]


def greedy_decode_batch(params: ModelParams, adapters, prompts, max_new: int, stop_token: int,
                        cfg: ModelConfig) -> list[list[int]]:
    prompts = [list(p) for p in prompts]
    if any(len(p) == 0 for p in prompts):
        raise ConfigError("greedy_decode: prompt must be nonempty")
    results: list[list[int]] = [[] for _ in prompts]
    # equal-length prompts decode together; no padding enters the attention
    groups: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(idx)
    with T.no_grad():
        for length in sorted(groups):
            idxs = groups[length]
            seqs = np.array([prompts[i] for i in idxs], dtype=np.int64)
            active = np.ones(len(idxs), dtype=bool)
            for _ in range(max_new):
                if not active.any() or seqs.shape[1] >= cfg.max_seq_len:
                    break
                logits = forward(params, adapters, seqs, cfg).logits.data[:, -1, :]
                nxt = np.argmax(logits, axis=-1)
                for row, i in enumerate(idxs):
                    if active[row]:
                        if nxt[row] == stop_token:
                            active[row] = False
                        else:
                            results[i].append(int(nxt[row]))
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return results
