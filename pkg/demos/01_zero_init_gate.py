"""Zero-init gating: a fresh adapter does not change the model.

Run: python demos/01_zero_init_gate.py
"""

import numpy as np

from dca import init_adapters, init_params, forward
from dca.model import ModelConfig
from dca.tasks import Tokenizer, encode_prompt, letter_prompt

tok = Tokenizer()
cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=8, mlp_dim=32, adapter_layers=2, adapter_len=4,
                  general_len=2, causal_layers=2)
params = init_params(cfg, seed=0)
adapters = init_adapters(cfg, seed=1)  # prompts ~ N(0, 0.02), gates = 0

prompt = letter_prompt(["GALLEGOS", "MORAN"])
ids = np.array([encode_prompt(tok, prompt)])
print(len(prompt), "chars ->", ids.shape[1], "tokens")

# %% gates closed: logits are bit-identical with and without adapters
plain = forward(params, None, ids, cfg).logits.data
gated = forward(params, adapters, ids, cfg).logits.data
print("identical with g=0:", np.array_equal(plain, gated))

# %% open one head's gate and the output moves
adapters.layers[0].gate.data[0] = 0.5
moved = forward(params, adapters, ids, cfg).logits.data
print("max |change| with g=0.5 on one head:", float(np.abs(moved - plain).max()))

# %% the attention trace splits each row into vanilla / general / specific blocks
res = forward(params, adapters, ids, cfg, trace=True)
tr = res.traces[0]
print("head", tr.head, "layer", tr.layer)
print("vanilla row sums  ", np.round(tr.s_vanilla.sum(1)[:4], 12))
print("adapter row sums  ", np.round((tr.s_adap1.sum(1) + tr.s_adap2.sum(1))[:4], 12), "(= gate)")
print("X_G shape per layer", [x.shape for x in res.xg])
