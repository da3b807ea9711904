"""Second-last-letter concatenation on a frozen desk-scale base.

1. pretrain a 4-layer base on the other letter selectors (first, second,
   third, last, third last) with the selector placed just before the answer;
   "second last" is never seen,
2. train adapters with alpha=0 (plain gated adapters) and alpha=1,
3. compare held-out accuracy and the X_G variance,
4. export an attention trace for two prompts that differ only in the
   quoted words.

The base takes about half an hour on one CPU; it is cached under .dca_cache/.
At this scale the adapters do not learn the task (accuracy stays near zero);
the demo still shows the training loop, the X_G variance gap and the traces.
Run: python demos/03_letter_concat.py
"""

from pathlib import Path

from dca import init_adapters
from dca.inspection import adap1_divergence, evaluate, export_attention, xg_variance
from dca.tasks import letter_prompt, make_splits
from dca.training import TrainConfig, Trainer
from dca.zoo import base_checkpoint, default_config

cfg = default_config()
params = base_checkpoint(verbose=True)
train_set, test_set = make_splits("letter_concat", 0, 2000, 300)
print(train_set[0].prompt, "->", train_set[0].answer)

# %% base alone on the unseen selector
print("base only:", evaluate(cfg, params, None, test_set[:100]).accuracy)

# %% two adapter runs, same seed, same data
runs = {}
for alpha in (0.0, 1.0):
    acfg = cfg.replace(alpha=alpha)
    adapters = init_adapters(acfg, seed=0)
    trainer = Trainer(acfg, params, adapters, train_set, TrainConfig(max_steps=1500, seed=0))
    for rec in trainer.run():
        if rec.step % 250 == 0:
            print(f"alpha={alpha} step {rec.step} ce {rec.report.ce:.3f} causal {rec.report.causal:.2e}")
    acc = evaluate(acfg, params, adapters, test_set).accuracy
    var = xg_variance(acfg, params, adapters, test_set[:64])
    runs[alpha] = adapters
    print(f"alpha={alpha}: held-out accuracy {acc:.3f}  Var(X_G) {var:.3e}")

# %% where do the general slots look for two prompts with different words?
out = Path("runs/demo_traces")
out.mkdir(parents=True, exist_ok=True)
for alpha, adapters in runs.items():
    a = export_attention(cfg, params, adapters, letter_prompt(["GALLEGOS", "MORAN"]), out / f"a_{alpha}.json")
    b = export_attention(cfg, params, adapters, letter_prompt(["KIM", "DAVIS"]), out / f"b_{alpha}.json")
    print(f"alpha={alpha}: adap1 divergence {adap1_divergence(a, b)['mean']:.4f}")
print("traces in", out)
