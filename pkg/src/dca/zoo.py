"""The desk-scale base model: recipe, builder and on-disk cache."""

from __future__ import annotations

import hashlib
import json
import os
import random
from pathlib import Path

from .model import ModelConfig, ModelParams, init_params
from .errors import ConfigError
from .tasks import Example, Tokenizer, gen_letter_concat
from .training import TrainConfig, load_checkpoint, pretrain, save_checkpoint

# "second last" is held out: adapters must learn it
BASE_POSITIONS = ("first", "second", "third", "last", "third last")

# Prompt forms for pretraining the base. "full" is the task template.
# "suffix" and "tail" put the selector right before the answer; a selector
# read from inside the full template did not train at this scale.
FORMS = ("suffix", "tail", "full")

BASE_RECIPE = {
    "seed": 0,
    "lr": 2e-3,
    "batch_size": 16,
    "n_per_position": 20000,
    "positions": list(BASE_POSITIONS),
    "stages": [
        {"forms": ["suffix"], "steps": 5000},
        {"forms": ["suffix", "tail"], "steps": 10000},
    ],
    "steps": None,  # optional cap applied to every stage
}


def default_config(**changes) -> ModelConfig:
    return ModelConfig(vocab_size=Tokenizer().vocab_size).replace(**changes)


def format_prompt(ex: Example, position: str, form: str) -> Example:
    if form == "full":
        return ex
    words = ex.prompt.split('"')[1]
    if form == "suffix":
        prompt = f'"{words}" {position}'
    elif form == "tail":
        prompt = f'Take the letters of the words in "{words}" and concatenate them {position}'
    else:
        raise ConfigError(f"pretrain form must be one of {FORMS}, got {form!r}")
    return Example(prompt, ex.answer, ex.task)


def pretraining_corpus(seed: int, n_per_position: int = 20000, positions=BASE_POSITIONS, forms=("full",)):
    """n_per_position examples per selector, split evenly over the prompt forms."""
    ds = []
    for i, pos in enumerate(positions):
        raw = gen_letter_concat(seed * 100 + i, n_per_position, position=pos)
        for j, ex in enumerate(raw):
            ds.append(format_prompt(ex, pos, forms[j % len(forms)]))
    random.Random(seed).shuffle(ds)
    return ds


def build_base(cfg: ModelConfig, recipe: dict, out_path=None, log_every: int = 0) -> ModelParams:
    recipe = {**BASE_RECIPE, **recipe}
    params = init_params(cfg, recipe["seed"])
    for k, stage in enumerate(recipe["stages"]):
        steps = stage["steps"] if recipe["steps"] is None else min(stage["steps"], recipe["steps"])
        seed = recipe["seed"] * 10 + k
        corpus = pretraining_corpus(seed, recipe["n_per_position"], recipe["positions"], stage["forms"])
        tcfg = TrainConfig(lr=recipe["lr"], batch_size=recipe["batch_size"], max_steps=steps, seed=seed)
        if log_every:
            print(f"stage {k}: forms {stage['forms']}, {steps} steps", flush=True)
        pretrain(cfg, params, corpus, tcfg, log_every=log_every)
    if out_path is not None:
        save_checkpoint(out_path, cfg, params, extra={"kind": "base", "pretrain": recipe})
    return params


def recipe_key(cfg: ModelConfig, recipe: dict) -> str:
    arch = {k: v for k, v in cfg.to_dict().items()
            if k in ("n_layers", "n_heads", "head_dim", "vocab_size", "mlp_dim", "max_seq_len", "rope_base", "rms_eps")}
    blob = json.dumps({"arch": arch, "recipe": {**BASE_RECIPE, **recipe}}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def cache_dir() -> Path:
    return Path(os.environ.get("DCA_CACHE", ".dca_cache"))


def base_checkpoint(cfg: ModelConfig | None = None, recipe: dict | None = None, directory=None,
                    verbose: bool = False) -> ModelParams:
    """Load the base for (cfg, recipe) from the cache, pretraining it on a miss."""
    cfg = cfg or default_config()
    recipe = recipe or {}
    directory = Path(directory) if directory is not None else cache_dir()
    path = directory / f"base-{recipe_key(cfg, recipe)}.ckpt"
    if path.exists():
        return load_checkpoint(path).params
    directory.mkdir(parents=True, exist_ok=True)
    if verbose:
        print(f"pretraining base model -> {path}", flush=True)
    return build_base(cfg, recipe, path, log_every=500 if verbose else 0)
