"""Segmented adaption prompts with zero-init gated attention.

Each adapted layer owns a general-skill prompt segment (length H), a
problem-specific segment (length M - H) and one gate per head. The
segments are projected by the layer's own key/value weights, scored
against the queries as one M-wide block, softmaxed separately from the
causal token block, gated, and then split back into the two segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import LayerParams, ModelConfig, attention_scores, merge_heads, project_qkv, vanilla_attention
from .tensor import Tensor


@dataclass
class AdapterLayer:
    general: Tensor   # [H, C]
    specific: Tensor  # [M - H, C]
    gate: Tensor      # [n_heads]

    def tensors(self) -> list[Tensor]:
        return [self.general, self.specific, self.gate]


@dataclass
class AdapterParams:
    layers: list[AdapterLayer]
    first_layer: int

    def named(self) -> dict[str, Tensor]:
        out = {}
        for j, a in enumerate(self.layers):
            i = self.first_layer + j
            out[f"adapter.{i}.general"] = a.general
            out[f"adapter.{i}.specific"] = a.specific
            out[f"adapter.{i}.gate"] = a.gate
        return out

    def tensors(self) -> list[Tensor]:
        return [t for a in self.layers for t in a.tensors()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def copy(self) -> AdapterParams:
        return AdapterParams(
            [AdapterLayer(*(Tensor(t.data.copy(), requires_grad=t.requires_grad) for t in a.tensors()))
             for a in self.layers],
            self.first_layer,
        )

    @classmethod
    def from_named(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> AdapterParams:
        first = cfg.first_adapter_layer
        layers = []
        for i in range(first, cfg.n_layers):
            general = arrays[f"adapter.{i}.general"]
            specific = arrays[f"adapter.{i}.specific"]
            gate = arrays[f"adapter.{i}.gate"]
            if (general.shape != (cfg.general_len, cfg.model_dim)
                    or specific.shape != (cfg.adapter_len - cfg.general_len, cfg.model_dim)
                    or gate.shape != (cfg.n_heads,)):
                raise ValueError(f"adapter layer {i} shapes do not match config")
            layers.append(AdapterLayer(Tensor(general, True), Tensor(specific, True), Tensor(gate, True)))
        return cls(layers, first)


@dataclass
class AttentionTrace:
    """Score partition of one head in one adapted layer, for a single sequence."""

    layer: int
    head: int
    s_vanilla: np.ndarray  # [q, q]
    s_adap1: np.ndarray    # [q, H]
    s_adap2: np.ndarray    # [q, M - H]
    xg: np.ndarray         # [q, head_dim]
    adapter_labels: list[str] = field(default_factory=list)

    @property
    def joint(self) -> np.ndarray:
        """Full gated score matrix [S_vanilla | S_adap1 | S_adap2]."""
        return np.concatenate([self.s_vanilla, self.s_adap1, self.s_adap2], axis=1)


def init_adapters(cfg: ModelConfig, seed: int = 0) -> AdapterParams:
    rng = np.random.default_rng(seed)
    h, m, c = cfg.general_len, cfg.adapter_len, cfg.model_dim
    layers = []
    for _ in range(cfg.adapter_layers):
        layers.append(AdapterLayer(
            general=Tensor(rng.normal(0.0, 0.02, size=(h, c)), requires_grad=True),
            specific=Tensor(rng.normal(0.0, 0.02, size=(m - h, c)), requires_grad=True),
            gate=Tensor(np.zeros(cfg.n_heads), requires_grad=True),
        ))
    return AdapterParams(layers, cfg.first_adapter_layer)


def estimate_xg(s_adap1: Tensor, v_adap1: Tensor) -> Tensor:
    """General-skill component: gated general-segment scores times its values."""
    return s_adap1 @ v_adap1


def _prompt_heads(prompt: Tensor, w: Tensor, cfg: ModelConfig) -> Tensor:
    """[len, C] prompt -> [h, len, d], no rotary position."""
    n = prompt.shape[0]
    return T.transpose(T.reshape(prompt @ w, (n, cfg.n_heads, cfg.head_dim)), (1, 0, 2))


def augmented_attention(x: Tensor, layer: LayerParams, adapter: AdapterLayer, cfg: ModelConfig,
                        *, layer_index: int = -1, trace: bool = False):
    """Attention over [tokens; general prompt; specific prompt].

    Returns (output [B, T, C], traces, X_G [B, h, T, d]).
    """
    hlen, m = cfg.general_len, cfg.adapter_len
    if adapter.general.shape[0] != hlen or adapter.specific.shape[0] != m - hlen:
        raise ValueError("adapter segment lengths do not match config (H, M)")
    q, k, v = project_qkv(x, layer, cfg)
    s_vanilla, mixed = vanilla_attention(q, k, v)

    k_adap = T.concat([_prompt_heads(adapter.general, layer.wk, cfg),
                       _prompt_heads(adapter.specific, layer.wk, cfg)], axis=1)
    v_adap1 = _prompt_heads(adapter.general, layer.wv, cfg)
    v_adap2 = _prompt_heads(adapter.specific, layer.wv, cfg)
    gate = T.reshape(adapter.gate, (cfg.n_heads, 1, 1))
    s_adap = T.softmax(attention_scores(q, k_adap), axis=-1) * gate
    s_adap1, s_adap2 = T.split(s_adap, [hlen, m - hlen], axis=-1)

    xg = estimate_xg(s_adap1, v_adap1)
    mixed = mixed + xg + s_adap2 @ v_adap2
    out = merge_heads(mixed) @ layer.wo

    traces = []
    if trace:
        labels = [f"adap_{j}" for j in range(m)]
        for head in range(cfg.n_heads):
            traces.append(AttentionTrace(
                layer=layer_index, head=head,
                s_vanilla=s_vanilla.data[0, head].copy(),
                s_adap1=s_adap1.data[0, head].copy(),
                s_adap2=s_adap2.data[0, head].copy(),
                xg=xg.data[0, head].copy(),
                adapter_labels=labels,
            ))
    return out, traces, xg
