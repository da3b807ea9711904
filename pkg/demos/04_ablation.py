"""Small H and alpha sweeps on the cached base, written as CSV.

Run: python demos/04_ablation.py [steps]
"""

import sys
from pathlib import Path

from dca.inspection import ablate, summarize, sweep_points, write_summary_csv
from dca.tasks import make_splits
from dca.training import TrainConfig
from dca.zoo import base_checkpoint, default_config

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = default_config()
params = base_checkpoint(verbose=True)
train_set, test_set = make_splits("letter_concat", 0, 2000, 200)

points = sweep_points({"H": 2, "alpha": 1.0, "Lprime": cfg.causal_layers},
                      H=[1, 2, 4, 8], alpha=[0.0, 0.1, 1.0, 10.0])
out = Path("runs/demo_ablation")
out.mkdir(parents=True, exist_ok=True)
results = ablate(cfg, params, train_set, test_set, TrainConfig(max_steps=steps), points, seeds=[0],
                 out_path=out / "ablation.csv")
rows = summarize(results)
write_summary_csv(out / "summary.csv", rows)
for r in rows:
    print(f"H={r['H']} alpha={r['alpha']:<5} acc {r['mean']:.3f}  Var(X_G) {r['xg_var']:.2e}")
