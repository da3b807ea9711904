"""The invariance penalty on X_G, and what one gradient step on it does.

X_G = S_adap1 V_adap1 is the part of each adapted layer's output coming
from the first H adapter slots. The penalty is its population variance
across the batch; pushing it down makes the "general" slots give every
prompt the same contribution.

Run: python demos/02_causal_penalty.py
"""

import numpy as np

from dca import causal_loss, forward, init_adapters, init_params
from dca.model import ModelConfig
from dca.tasks import Tokenizer, encode_batch, gen_letter_concat

tok = Tokenizer()
cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=8, mlp_dim=32, adapter_layers=2, adapter_len=4,
                  general_len=2, causal_layers=2)
params = init_params(cfg, seed=0)
# at the 0.02 init every prompt looks alike; sharpen attention so X_G varies
for layer in params.layers:
    for w in (layer.wq, layer.wk, layer.wv):
        w.data *= 20
adapters = init_adapters(cfg, seed=1)
batch = encode_batch(tok, gen_letter_concat(0, 8), cfg.max_seq_len)

# %% closed gates: X_G is identically zero, so is the penalty
loss, _ = causal_loss(forward(params, adapters, batch.inputs, cfg).xg, batch.valid_mask)
print("penalty with g=0:", loss.item())

# %% open the gates a little and scatter the prompts
rng = np.random.default_rng(2)
for layer in adapters.layers:
    layer.gate.data[:] = rng.normal(0, 0.5, size=layer.gate.shape)
    layer.general.data[:] = rng.normal(0, 0.5, size=layer.general.shape)

for step in range(5):
    loss, per_layer = causal_loss(forward(params, adapters, batch.inputs, cfg).xg, batch.valid_mask)
    print(f"step {step}: penalty {loss.item():.3e}  per layer {[f'{t.item():.2e}' for t in per_layer]}")
    loss.backward()
    # normalized gradient step, so the step size does not depend on the loss scale
    grads = [t.grad for t in adapters.tensors() if t.grad is not None]
    norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
    for t in adapters.tensors():
        if t.grad is not None:
            t.data -= 0.1 * t.grad / norm
        t.grad = None

# %% duplicating every sample leaves population variance unchanged
xg = forward(params, adapters, batch.inputs, cfg).xg
doubled = forward(params, adapters, np.concatenate([batch.inputs, batch.inputs]), cfg).xg
mask2 = np.concatenate([batch.valid_mask, batch.valid_mask])
print("B vs 2B copies:", causal_loss(xg, batch.valid_mask)[0].item(), causal_loss(doubled, mask2)[0].item())
