"""Exact-match evaluation, attention-trace export and H / alpha / L' sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterParams, AttentionTrace, init_adapters
from .errors import ConfigError, DataError
from .loss import causal_loss
from .model import ModelConfig, ModelParams, forward, greedy_decode_batch
from .tasks import Example, Tokenizer, encode_batch, encode_prompt
from .training import TrainConfig, Trainer

log = logging.getLogger(__name__)

ABLATION_HEADER = ["H", "alpha", "Lprime", "seed", "task", "accuracy"]


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------
@dataclass
class AccuracyReport:
    accuracy: float
    correct: int
    total: int
    per_task: dict[str, dict] = field(default_factory=dict)
    predictions: list[str] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "total": self.total,
                "per_task": self.per_task}


def score(predictions: Sequence[str], dataset: Sequence[Example]) -> AccuracyReport:
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    per_task: dict[str, dict] = {}
    correct = 0
    for pred, ex in zip(predictions, dataset):
        hit = pred == ex.answer
        correct += hit
        t = per_task.setdefault(ex.task, {"correct": 0, "total": 0})
        t["correct"] += hit
        t["total"] += 1
    for t in per_task.values():
        t["accuracy"] = t["correct"] / t["total"]
    return AccuracyReport(correct / len(dataset), correct, len(dataset), per_task, list(predictions))


def predict(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams | None,
            dataset: Sequence[Example], tokenizer: Tokenizer | None = None, max_new: int | None = None) -> list[str]:
    tok = tokenizer or Tokenizer()
    prompts = [encode_prompt(tok, ex.prompt) for ex in dataset]
    if max_new is None:
        max_new = max(len(ex.answer) for ex in dataset) + 1
    outs = greedy_decode_batch(params, adapters, prompts, max_new, tok.EOS, cfg)
    return [tok.decode(o) for o in outs]


def evaluate(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams | None,
             dataset: Sequence[Example], tokenizer: Tokenizer | None = None,
             predictor: Callable[[Sequence[Example]], list[str]] | None = None) -> AccuracyReport:
    """Exact string match of greedy answers; ``predictor`` replaces the model when given."""
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    preds = predictor(dataset) if predictor else predict(cfg, params, adapters, dataset, tokenizer)
    return score(preds, dataset)


def xg_variance(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams,
                dataset: Sequence[Example], batch_size: int = 8) -> float:
    """Mean causal-loss value over consecutive fixed batches of ``dataset``."""
    tok = Tokenizer()
    vals = []
    with T.no_grad():
        for i in range(0, len(dataset) - batch_size + 1, batch_size):
            batch = encode_batch(tok, dataset[i:i + batch_size], cfg.max_seq_len)
            res = forward(params, adapters, batch.inputs, cfg)
            loss, _ = causal_loss(res.xg[-cfg.causal_layers:], batch.valid_mask, cfg.causal_pool)
            vals.append(loss.item())
    if not vals:
        raise DataError(f"need at least {batch_size} examples to measure X_G variance")
    return float(np.mean(vals))


# ---------------------------------------------------------------------
# attention traces
# ---------------------------------------------------------------------
def trace_prompt(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams, prompt: str,
                 tokenizer: Tokenizer | None = None) -> tuple[list[str], list[AttentionTrace]]:
    tok = tokenizer or Tokenizer()
    ids = encode_prompt(tok, prompt)
    with T.no_grad():
        res = forward(params, adapters, np.array([ids]), cfg, trace=True)
    return [tok.label(i) for i in ids], res.traces


def trace_document(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams, prompt: str,
                   tokenizer: Tokenizer | None = None) -> dict:
    labels, traces = trace_prompt(cfg, params, adapters, prompt, tokenizer)
    m, h = cfg.adapter_len, cfg.general_len
    adapter_labels = [f"adap_{j}" for j in range(m)]
    layers: dict[int, dict] = {}
    for tr in traces:
        entry = layers.setdefault(tr.layer, {
            "layer": tr.layer,
            "gate": adapters.layers[tr.layer - adapters.first_layer].gate.data.tolist(),
            "heads": [],
            "xg": [],
        })
        entry["heads"].append({
            "head": tr.head,
            "s_vanilla": tr.s_vanilla.tolist(),
            "s_adap1": tr.s_adap1.tolist(),
            "s_adap2": tr.s_adap2.tolist(),
        })
        entry["xg"].append(tr.xg.tolist())
    return {
        "prompt": prompt,
        "row_labels": labels,
        "col_labels": labels + adapter_labels,
        "adap1_labels": adapter_labels[:h],
        "adap2_labels": adapter_labels[h:],
        "general_len": h,
        "adapter_len": m,
        "layers": [layers[k] for k in sorted(layers)],
    }


def export_attention(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams, prompt: str,
                     path, tokenizer: Tokenizer | None = None) -> dict:
    doc = trace_document(cfg, params, adapters, prompt, tokenizer)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
    return doc


def adap1_divergence(doc_a: dict, doc_b: dict) -> dict:
    """Mean row-wise L2 distance between two traces' general-segment scores.

    Rows are aligned from the end of the prompts, so the shared question
    tail and the answer position are compared even when the quoted strings
    differ in length.
    """
    per = []
    for la, lb in zip(doc_a["layers"], doc_b["layers"]):
        for ha, hb in zip(la["heads"], lb["heads"]):
            a, b = np.asarray(ha["s_adap1"]), np.asarray(hb["s_adap1"])
            n = min(len(a), len(b))
            d = float(np.mean(np.linalg.norm(a[-n:] - b[-n:], axis=1)))
            per.append({"layer": la["layer"], "head": ha["head"], "divergence": d})
    return {"mean": float(np.mean([p["divergence"] for p in per])) if per else 0.0, "per_head": per}


# ---------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------
@dataclass
class RunResult:
    H: int
    alpha: float
    Lprime: int
    seed: int
    task: str
    accuracy: float
    xg_var: float

    def row(self) -> list:
        return [self.H, self.alpha, self.Lprime, self.seed, self.task, f"{self.accuracy:.6f}"]


def sweep_points(base: dict, **axes) -> list[dict]:
    """One-at-a-time sweeps: each axis varies while the others stay at ``base``."""
    points = []
    for name, values in axes.items():
        for v in values:
            p = dict(base)
            p[name] = v
            if p not in points:
                points.append(p)
    return points


def grid_points(**axes) -> list[dict]:
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def run_point(cfg: ModelConfig, params: ModelParams, train_set, test_set, tcfg: TrainConfig,
              point: dict, seed: int) -> RunResult:
    pcfg = cfg.replace(general_len=point.get("H", cfg.general_len),
                       alpha=point.get("alpha", cfg.alpha),
                       causal_layers=point.get("Lprime", cfg.causal_layers))
    adapters = init_adapters(pcfg, seed)
    trainer = Trainer(pcfg, params, adapters, train_set, tcfg.replace(seed=seed, alpha=None))
    trainer.run()
    report = evaluate(pcfg, params, adapters, test_set)
    var = xg_variance(pcfg, params, adapters, test_set[:64])
    task = test_set[0].task if test_set else ""
    return RunResult(pcfg.general_len, pcfg.alpha, pcfg.causal_layers, seed, task, report.accuracy, var)


def ablate(cfg: ModelConfig, params: ModelParams, train_set: Sequence[Example], test_set: Sequence[Example],
           tcfg: TrainConfig, points: Sequence[dict], seeds: Sequence[int], out_path=None,
           workers: int = 1) -> list[RunResult]:
    """Train one adapter per (point, seed) on a frozen base; invalid points are skipped."""
    jobs = []
    for point in points:
        try:
            cfg.replace(general_len=point.get("H", cfg.general_len), alpha=point.get("alpha", cfg.alpha),
                        causal_layers=point.get("Lprime", cfg.causal_layers))
        except ConfigError as exc:
            log.warning("skipping ablation point %s: %s", point, exc)
            continue
        jobs.extend((point, s) for s in seeds)

    def work(job):
        return run_point(cfg, params, train_set, test_set, tcfg, *job)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    if out_path is not None:
        write_ablation_csv(out_path, results)
    return results


def write_ablation_csv(path, results: Sequence[RunResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in results:
            w.writerow(r.row())


def summarize(results: Sequence[RunResult]) -> list[dict]:
    """Mean and sample sd of accuracy (and mean X_G variance) per grid point."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.H, r.alpha, r.Lprime, r.task), []).append(r)
    rows = []
    for (h, a, lp, task), rs in groups.items():
        accs = [r.accuracy for r in rs]
        rows.append({
            "H": h, "alpha": a, "Lprime": lp, "task": task, "n": len(rs),
            "mean": statistics.fmean(accs), "sd": statistics.stdev(accs) if len(accs) > 1 else 0.0,
            "xg_var": statistics.fmean(r.xg_var for r in rs),
        })
    return rows


def write_summary_csv(path, rows: Sequence[dict]) -> None:
    cols = ["H", "alpha", "Lprime", "task", "n", "mean", "sd", "xg_var"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
