import math

import numpy as np
import pytest

from dca import tensor as T
from dca.errors import ConfigError
from dca.model import (ModelConfig, forward, greedy_decode, init_params, plain_attention, project_qkv,
                       rope_tables, vanilla_attention)
from dca.tensor import Tensor

from conftest import random_tokens


def reference_forward(params, cfg, tokens):
    """Straight numpy decoder with explicit per-position attention loops."""
    def rms(x, w):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + cfg.rms_eps) * w

    def rope(x, pos):
        half = cfg.head_dim // 2
        freqs = cfg.rope_base ** (-np.arange(half) / half)
        ang = pos * freqs
        x1, x2 = x[:half], x[half:]
        return np.concatenate([x1 * np.cos(ang) - x2 * np.sin(ang), x2 * np.cos(ang) + x1 * np.sin(ang)])

    b, t = tokens.shape
    h = params.embed.data[tokens]
    for layer in params.layers:
        x = rms(h, layer.attn_norm.data)
        q, k, v = x @ layer.wq.data, x @ layer.wk.data, x @ layer.wv.data
        out = np.zeros_like(x)
        for bi in range(b):
            for head in range(cfg.n_heads):
                sl = slice(head * cfg.head_dim, (head + 1) * cfg.head_dim)
                for i in range(t):
                    qi = rope(q[bi, i, sl], i)
                    scores = [float(qi @ rope(k[bi, j, sl], j)) / math.sqrt(cfg.head_dim) for j in range(i + 1)]
                    mx = max(scores)
                    w = [math.exp(s - mx) for s in scores]
                    z = sum(w)
                    out[bi, i, sl] = sum((w[j] / z) * v[bi, j, sl] for j in range(i + 1))
        h = h + out @ layer.wo.data
        x = rms(h, layer.mlp_norm.data)
        g = x @ layer.w_gate.data
        h = h + ((g / (1 + np.exp(-g))) * (x @ layer.w_up.data)) @ layer.w_down.data
    return rms(h, params.final_norm.data) @ params.head.data


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="general_len"):
        ModelConfig(adapter_len=4, general_len=4)
    with pytest.raises(ConfigError, match="causal_layers"):
        ModelConfig(adapter_layers=2, causal_layers=3)
    with pytest.raises(ConfigError, match="adapter_layers"):
        ModelConfig(n_layers=2, adapter_layers=3, causal_layers=1)
    with pytest.raises(ConfigError, match="alpha"):
        ModelConfig(alpha=-1.0)


def test_single_token_logits_shape(small_model):
    cfg, params = small_model
    assert forward(params, None, [[3]], cfg).logits.shape == (1, 1, cfg.vocab_size)


def test_forward_rejects_long_sequences_and_bad_ids(small_model):
    cfg, params = small_model
    with pytest.raises(ConfigError, match="max_seq_len"):
        forward(params, None, np.zeros((1, cfg.max_seq_len + 1), int), cfg)
    with pytest.raises(ConfigError, match="token ids"):
        forward(params, None, [[cfg.vocab_size]], cfg)


def test_forward_matches_loop_reference(small_model):
    cfg, params = small_model
    tokens = random_tokens(cfg, 2, 7, seed=1)
    got = forward(params, None, tokens, cfg).logits.data
    np.testing.assert_allclose(got, reference_forward(params, cfg, tokens), rtol=0, atol=1e-10)


def test_batch_permutation_permutes_logits(small_model):
    cfg, params = small_model
    tokens = random_tokens(cfg, 4, 6, seed=2)
    perm = np.array([2, 0, 3, 1])
    a = forward(params, None, tokens, cfg).logits.data
    b = forward(params, None, tokens[perm], cfg).logits.data
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("t", [0, 3, 6])
def test_causality_perturbation(small_model, t):
    cfg, params = small_model
    tokens = random_tokens(cfg, 2, 7, seed=3)
    edited = tokens.copy()
    edited[:, t] = (edited[:, t] + 1) % cfg.vocab_size
    a = forward(params, None, tokens, cfg).logits.data
    b = forward(params, None, edited, cfg).logits.data
    assert np.array_equal(a[:, :t], b[:, :t])
    assert not np.allclose(a[:, t], b[:, t])


def test_plain_attention_single_position_returns_value_row(small_model):
    cfg, params = small_model
    layer = params.layers[0]
    x = Tensor(np.random.default_rng(4).normal(size=(1, 1, cfg.model_dim)))
    out = plain_attention(x, layer, cfg).data
    np.testing.assert_allclose(out, (x.data @ layer.wv.data) @ layer.wo.data, rtol=0, atol=1e-15)


def test_masked_upper_triangle_gets_zero_weight(small_model):
    cfg, params = small_model
    x = Tensor(np.random.default_rng(5).normal(size=(2, 6, cfg.model_dim)))
    probs, _ = vanilla_attention(*project_qkv(x, params.layers[0], cfg))
    upper = ~np.tril(np.ones((6, 6), dtype=bool))
    assert np.all(probs.data[..., upper] == 0.0)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-12)


def test_plain_attention_matches_loop_oracle(small_model):
    cfg, params = small_model
    layer = params.layers[1]
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5, cfg.model_dim))
    got = plain_attention(Tensor(x), layer, cfg).data
    cos, sin = rope_tables(5, cfg.head_dim, cfg.rope_base)
    half = cfg.head_dim // 2
    expected = np.zeros_like(x)
    for b in range(2):
        heads = np.zeros((5, cfg.model_dim))
        for h in range(cfg.n_heads):
            sl = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
            q = (x[b] @ layer.wq.data)[:, sl]
            k = (x[b] @ layer.wk.data)[:, sl]
            v = (x[b] @ layer.wv.data)[:, sl]
            for arr in (q, k):
                a1, a2 = arr[:, :half].copy(), arr[:, half:].copy()
                arr[:, :half] = a1 * cos - a2 * sin
                arr[:, half:] = a2 * cos + a1 * sin
            for i in range(5):
                s = np.array([q[i] @ k[j] / math.sqrt(cfg.head_dim) for j in range(i + 1)])
                w = np.exp(s - s.max())
                w /= w.sum()
                heads[i, sl] = sum(w[j] * v[j] for j in range(i + 1))
        expected[b] = heads @ layer.wo.data
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


@pytest.mark.parametrize("offset", [1, 5, 37])
def test_rotary_scores_depend_only_on_relative_position(offset):
    rng = np.random.default_rng(offset)
    d = 8
    qv, kv = rng.normal(size=d), rng.normal(size=d)

    def score(m, n):
        cos, sin = rope_tables(max(m, n) + 1, d, 10000.0)
        q = T.rotary(Tensor(np.tile(qv, (max(m, n) + 1, 1))), cos, sin).data[m]
        k = T.rotary(Tensor(np.tile(kv, (max(m, n) + 1, 1))), cos, sin).data[n]
        return q @ k

    for m, n in [(3, 1), (2, 2), (7, 0)]:
        assert abs(score(m, n) - score(m + offset, n + offset)) < 1e-9


def test_greedy_decode_stops_immediately_on_stop_token(small_cfg):
    cfg = small_cfg
    params = init_params(cfg, 0)
    # every hidden state is the all-ones embedding; only the stop column scores it
    params.embed.data[:] = 1.0
    for layer in params.layers:
        layer.wo.data[:] = 0.0
        layer.w_down.data[:] = 0.0
    params.head.data[:] = 0.0
    params.head.data[:, 2] = 1.0
    assert greedy_decode(params, None, [1, 4, 5], max_new=5, stop_token=2, cfg=cfg) == []


def test_greedy_decode_is_prefix_stable_and_deterministic(small_model):
    cfg, params = small_model
    prompt = [1, 5, 6, 7]
    long = greedy_decode(params, None, prompt, 6, stop_token=-1, cfg=cfg)
    for n in range(6):
        assert greedy_decode(params, None, prompt, n, stop_token=-1, cfg=cfg) == long[:n]
    assert greedy_decode(params, None, prompt, 6, stop_token=-1, cfg=cfg) == long


def test_greedy_decode_rejects_empty_prompt(small_model):
    cfg, params = small_model
    with pytest.raises(ConfigError):
        greedy_decode(params, None, [], 3, 2, cfg)
