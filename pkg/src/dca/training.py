"""AdamW training of adapter prompts (base frozen), base pretraining, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterParams
from .checkpoint import load_arrays, save_arrays
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .loss import LossReport, causal_loss, total_loss
from .model import ModelConfig, ModelParams, forward
from .tasks import Example, Tokenizer, encode_batch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    alpha: float | None = None  # None: use ModelConfig.alpha
    schedule: str = "constant"
    max_steps: int | None = 2000
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha is not None and (self.alpha < 0 or not math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1 or null, got {self.max_steps}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive or null, got {self.clip_norm}")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    report: LossReport
    grad_norm: float
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, with_time: bool = False) -> dict:
        d = {"step": self.step, **self.report.to_dict(), "grad_norm": self.grad_norm}
        if with_time:
            d["wall_time"] = self.wall_time
        return d


# ---------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, lr: float | None = None, no_decay: Sequence[str] = ()) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    lr = cfg.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name in params:
        if name not in state.m or state.m[name].shape != params[name].shape:
            raise ConfigError(f"optimizer state does not match parameter {name!r}")
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if cfg.weight_decay and name not in no_decay:
            p -= lr * cfg.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    return cfg.lr


# ---------------------------------------------------------------------
# data order
# ---------------------------------------------------------------------
def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, n // batch_size)


def total_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch(n, cfg.batch_size)


def batch_indices(n: int, cfg: TrainConfig, step: int) -> np.ndarray:
    """Example indices for global ``step``; a pure function of (seed, step)."""
    per = steps_per_epoch(n, cfg.batch_size)
    epoch, k = divmod(step, per)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    size = min(cfg.batch_size, n)
    return order[k * size:(k + 1) * size]


# ---------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------
def trainable_count(cfg: ModelConfig) -> int:
    """L*(M*C) prompt entries plus L*n_heads gates."""
    return cfg.adapter_layers * cfg.adapter_len * cfg.model_dim + cfg.adapter_layers * cfg.n_heads


class Trainer:
    """Stateful adapter training run; resumable from its checkpoint."""

    def __init__(self, cfg: ModelConfig, params: ModelParams, adapters: AdapterParams,
                 dataset: Sequence[Example], tcfg: TrainConfig, tokenizer: Tokenizer | None = None,
                 metrics_path=None):
        if not dataset:
            raise DataError("training dataset is empty")
        self.cfg, self.params, self.adapters = cfg, params, adapters
        self.dataset = list(dataset)
        self.tcfg = tcfg
        self.tok = tokenizer or Tokenizer()
        self.alpha = cfg.alpha if tcfg.alpha is None else tcfg.alpha
        self.metrics_path = Path(metrics_path) if metrics_path else None
        params.set_trainable(False)
        self.named = adapters.named()
        for t in self.named.values():
            t.requires_grad = True
        self.no_decay = [k for k in self.named if k.endswith(".gate")]
        self.state = AdamState.zeros({k: t.data for k, t in self.named.items()})
        self.records: list[StepRecord] = []
        self.total = total_steps(len(self.dataset), tcfg)

    @property
    def step(self) -> int:
        return self.state.step

    def loss(self, batch_examples: Sequence[Example]):
        batch = encode_batch(self.tok, batch_examples, self.cfg.max_seq_len)
        res = forward(self.params, self.adapters, batch.inputs, self.cfg)
        ce = T.cross_entropy(res.logits, batch.targets, batch.loss_mask)
        causal, per_layer = causal_loss(res.xg[-self.cfg.causal_layers:], batch.valid_mask, self.cfg.causal_pool)
        return total_loss(ce, causal, self.alpha, per_layer)

    def train_step(self) -> StepRecord:
        t0 = time.perf_counter()
        step = self.state.step
        idx = batch_indices(len(self.dataset), self.tcfg, step)
        loss, report = self.loss([self.dataset[i] for i in idx])
        if not math.isfinite(report.total):
            raise NumericError(f"non-finite loss at step {step}: {report}")
        T.zero_grad(self.named.values())
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.named.items()}
        norm = global_norm(grads)
        if not math.isfinite(norm):
            bad = next(k for k, g in grads.items() if not np.all(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for parameter {bad!r} at step {step}")
        if self.tcfg.clip_norm is not None and norm > self.tcfg.clip_norm:
            factor = self.tcfg.clip_norm / norm
            grads = {k: g * factor for k, g in grads.items()}
        adamw_step({k: t.data for k, t in self.named.items()}, grads, self.state, self.tcfg,
                   lr=lr_at(self.tcfg, step, self.total), no_decay=self.no_decay)
        rec = StepRecord(step, report, norm, time.perf_counter() - t0)
        self.records.append(rec)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict()) + "\n")
        return rec

    def run(self, until: int | None = None) -> list[StepRecord]:
        until = self.total if until is None else min(until, self.total)
        while self.state.step < until:
            self.train_step()
        return self.records

    # -- checkpoints ---------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.params, self.adapters, self.state, self.tcfg)

    @classmethod
    def resume(cls, path, dataset, tokenizer=None, metrics_path=None) -> Trainer:
        ck = load_checkpoint(path)
        if ck.adapters is None or ck.opt_state is None or ck.tcfg is None:
            raise CheckpointError(f"{path}: not a resumable training checkpoint")
        trainer = cls(ck.cfg, ck.params, ck.adapters, dataset, ck.tcfg, tokenizer, metrics_path)
        trainer.state = ck.opt_state
        return trainer


def train(cfg: ModelConfig, params: ModelParams, adapters: AdapterParams, dataset: Sequence[Example],
          tcfg: TrainConfig, metrics_path=None) -> tuple[AdapterParams, list[StepRecord]]:
    trainer = Trainer(cfg, params, adapters, dataset, tcfg, metrics_path=metrics_path)
    return trainer.adapters, trainer.run()


# ---------------------------------------------------------------------
# base pretraining
# ---------------------------------------------------------------------
def pretrain(cfg: ModelConfig, params: ModelParams, dataset: Sequence[Example], tcfg: TrainConfig,
             log_every: int = 0, loss_on: str = "answer") -> list[float]:
    """Train every base weight (no adapters). Returns per-step CE.

    ``loss_on="answer"`` scores only the answer span; ``"all"`` is plain
    next-token LM loss over every non-pad token.
    """
    if loss_on not in ("all", "answer"):
        raise ConfigError(f"loss_on must be 'all' or 'answer', got {loss_on!r}")
    tok = Tokenizer()
    named = params.named()
    params.set_trainable(True)
    state = AdamState.zeros({k: t.data for k, t in named.items()})
    no_decay = [k for k in named if k.endswith("norm")]
    n = len(dataset)
    total = total_steps(n, tcfg)
    history = []
    try:
        for step in range(total):
            idx = batch_indices(n, tcfg, step)
            batch = encode_batch(tok, [dataset[i] for i in idx], cfg.max_seq_len)
            logits = forward(params, None, batch.inputs, cfg).logits
            mask = batch.loss_mask if loss_on == "answer" else ~batch.pad_mask[:, 1:]
            ce = T.cross_entropy(logits, batch.targets, mask)
            if not math.isfinite(ce.item()):
                raise NumericError(f"non-finite pretraining loss at step {step}")
            T.zero_grad(named.values())
            ce.backward()
            grads = {k: t.grad for k, t in named.items() if t.grad is not None}
            norm = global_norm(grads)
            if tcfg.clip_norm is not None and norm > tcfg.clip_norm:
                grads = {k: g * (tcfg.clip_norm / norm) for k, g in grads.items()}
            adamw_step({k: t.data for k, t in named.items()}, grads, state, tcfg,
                       lr=lr_at(tcfg, step, total), no_decay=no_decay)
            history.append(ce.item())
            if log_every and step % log_every == 0:
                print(f"pretrain step {step} ce {np.mean(history[-log_every:]):.4f}", flush=True)
    finally:
        params.set_trainable(False)
    return history


# ---------------------------------------------------------------------
# checkpoint round-trip
# ---------------------------------------------------------------------
@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ModelParams
    adapters: AdapterParams | None = None
    opt_state: AdamState | None = None
    tcfg: TrainConfig | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, adapters: AdapterParams | None = None,
                    opt_state: AdamState | None = None, tcfg: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    arrays = {f"model.{k}": t.data for k, t in params.named().items()}
    if adapters is not None:
        arrays.update({k: t.data for k, t in adapters.named().items()})
    meta = {"model_config": cfg.to_dict(), "extra": extra or {}}
    if opt_state is not None:
        meta["opt_step"] = opt_state.step
        arrays.update({f"opt.m.{k}": v for k, v in opt_state.m.items()})
        arrays.update({f"opt.v.{k}": v for k, v in opt_state.v.items()})
    if tcfg is not None:
        meta["train_config"] = tcfg.to_dict()
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_arrays(path)
    try:
        cfg = ModelConfig(**meta["model_config"])
        params = ModelParams.from_named(cfg, {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
        adapters = None
        if any(k.startswith("adapter.") for k in arrays):
            adapters = AdapterParams.from_named(cfg, arrays)
        opt_state = None
        if "opt_step" in meta:
            m = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("opt.m.")}
            v = {k[6:]: a.copy() for k, a in arrays.items() if k.startswith("opt.v.")}
            opt_state = AdamState(int(meta["opt_step"]), m, v)
        tcfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else None
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: manifest does not match this version ({exc})") from None
    return Checkpoint(cfg, params, adapters, opt_state, tcfg, meta.get("extra", {}))
