"""Command-line entry point: ``dca {gen-data,pretrain,train,eval,inspect,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import zoo
from .adapter import init_adapters
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .inspection import (ablate, adap1_divergence, evaluate, export_attention, summarize, sweep_points,
                         write_summary_csv, xg_variance)
from .model import ModelConfig
from .tasks import TASKS, Tokenizer, generate, make_splits, read_jsonl, write_jsonl
from .training import TrainConfig, Trainer, load_checkpoint

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

PRESETS = {
    # lr 1e-3, batch 4, 5 epochs, M=10, H=2, alpha=1; L=20 of 32 layers scaled to the 4-layer model
    "paper-4.1": {
        "model": {"adapter_len": 10, "general_len": 2, "adapter_layers": 3, "causal_layers": 3, "alpha": 1.0},
        "train": {"lr": 1e-3, "batch_size": 4, "epochs": 5, "max_steps": None},
    },
}

log = logging.getLogger("dca")


# ---------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------
def _check_fields(section: str, values: dict, cls) -> None:
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
        want = known[key].type
        if val is None:
            if "None" not in str(want):
                raise ConfigError(f"{section}.{key}: must not be null")
            continue
        if "int" in str(want) and "float" not in str(want) and not (isinstance(val, int) and not isinstance(val, bool)):
            raise ConfigError(f"{section}.{key}: expected an integer, got {val!r}")
        if "float" in str(want) and not isinstance(val, (int, float, list)) or isinstance(val, bool):
            raise ConfigError(f"{section}.{key}: expected a number, got {val!r}")
        if str(want) == "str" and not isinstance(val, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {val!r}")


def resolve_config(args) -> dict:
    """Defaults <- preset <- config file <- command-line flags."""
    model = ModelConfig(vocab_size=Tokenizer().vocab_size).to_dict()
    train = TrainConfig().to_dict()
    data = {"task": "letter_concat", "n_train": 2000, "n_test": 500, "word_len": [3, 6], "n_words": 2}
    pre = {k: v for k, v in zoo.BASE_RECIPE.items()}
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        model.update(PRESETS[args.preset]["model"])
        train.update(PRESETS[args.preset]["train"])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for key in doc:
            if key not in ("model", "train", "data", "pretrain"):
                raise ConfigError(f"{key}: unknown section")
        _check_fields("model", doc.get("model", {}), ModelConfig)
        _check_fields("train", doc.get("train", {}), TrainConfig)
        model.update(doc.get("model", {}))
        train.update(doc.get("train", {}))
        data.update(doc.get("data", {}))
        for key in doc.get("pretrain", {}):
            if key not in zoo.BASE_RECIPE:
                raise ConfigError(f"pretrain.{key}: unknown field")
        pre.update(doc.get("pretrain", {}))
    overrides = {"alpha": ("model", "alpha"), "H": ("model", "general_len"), "lprime": ("model", "causal_layers"),
                 "lr": ("train", "lr"), "steps": ("train", "max_steps"), "batch_size": ("train", "batch_size"),
                 "task": ("data", "task")}
    sections = {"model": model, "train": train, "data": data}
    for flag, (section, key) in overrides.items():
        val = getattr(args, flag, None)
        if val is not None:
            sections[section][key] = val
    train["seed"] = args.seed
    if getattr(args, "base_seed", None) is not None:
        pre["seed"] = args.base_seed
    try:
        ModelConfig(**model)
        TrainConfig.from_dict(train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if data["task"] not in TASKS:
        raise ConfigError(f"data.task: unknown task {data['task']!r}")
    return {"model": model, "train": train, "data": data, "pretrain": pre}


def write_resolved(out_dir: Path, resolved: dict) -> None:
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _task_kwargs(data: dict) -> dict:
    if data["task"] == "letter_concat":
        return {"word_len": tuple(data["word_len"]), "n_words": data["n_words"]}
    return {}


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------
# base model
# ---------------------------------------------------------------------
def build_base(cfg: ModelConfig, pre: dict, out_path: Path):
    return zoo.build_base(cfg, pre, out_path)


def load_base(path, cfg: ModelConfig):
    ck = load_checkpoint(path)
    base_keys = {k: v for k, v in ck.cfg.to_dict().items()
                 if k in ("n_layers", "n_heads", "head_dim", "vocab_size", "mlp_dim", "rope_base", "rms_eps")}
    want = {k: v for k, v in cfg.to_dict().items() if k in base_keys}
    if base_keys != want:
        raise ConfigError(f"base checkpoint architecture {base_keys} does not match config {want}")
    return ck.params


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    resolved = resolve_config(args)
    data = resolved["data"]
    if args.n is not None:
        data["n_train"] = args.n
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.n_test:
        train, test = make_splits(data["task"], args.seed, data["n_train"], args.n_test, **_task_kwargs(data))
        write_jsonl(out / f"{data['task']}_train.jsonl", train)
        write_jsonl(out / f"{data['task']}_test.jsonl", test)
    else:
        write_jsonl(out / f"{data['task']}.jsonl", generate(data["task"], args.seed, data["n_train"],
                                                            **_task_kwargs(data)))
    write_resolved(out, resolved)
    return 0


def _datasets(args, data: dict):
    if args.train_data:
        train = read_jsonl(args.train_data)
        test = read_jsonl(args.test_data) if args.test_data else []
    else:
        train, test = make_splits(data["task"], args.seed, data["n_train"], data["n_test"], **_task_kwargs(data))
    if not train:
        raise DataError("training dataset is empty")
    return train, test


def cmd_pretrain(args) -> int:
    resolved = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig(**resolved["model"])
    if args.steps is not None:
        resolved["pretrain"]["steps"] = args.steps
    build_base(cfg, resolved["pretrain"], out / "base.ckpt")
    write_resolved(out, resolved)
    return 0


def cmd_train(args) -> int:
    resolved = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig(**resolved["model"])
    tcfg = TrainConfig.from_dict(resolved["train"])
    train, test = _datasets(args, resolved["data"])
    write_jsonl(out / "train.jsonl", train)
    if test:
        write_jsonl(out / "test.jsonl", test)
    if args.base:
        params = load_base(args.base, cfg)
    else:
        params = build_base(cfg, resolved["pretrain"], out / "base.ckpt")
    write_resolved(out, resolved)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    trainer = Trainer(cfg, params, init_adapters(cfg, tcfg.seed), train, tcfg, metrics_path=metrics)
    trainer.run()
    trainer.save(out / "adapter.ckpt")
    summary = {
        "steps": trainer.step,
        "train_sha256": file_sha256(out / "train.jsonl"),
        "final": trainer.records[-1].to_dict() if trainer.records else None,
    }
    if test:
        report = evaluate(cfg, params, trainer.adapters, test)
        summary["test"] = report.to_dict()
        summary["test_xg_var"] = xg_variance(cfg, params, trainer.adapters, test[:64])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    dataset = read_jsonl(args.data)
    report = evaluate(ck.cfg, ck.params, ck.adapters, dataset)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if ck.adapters is None:
        raise DataError(f"{args.checkpoint}: no adapter parameters to inspect")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = export_attention(ck.cfg, ck.params, ck.adapters, args.prompt, out / "trace.json")
    if args.compare:
        other = export_attention(ck.cfg, ck.params, ck.adapters, args.compare, out / "trace_compare.json")
        div = adap1_divergence(doc, other)
        (out / "divergence.json").write_text(json.dumps(div, indent=2) + "\n", encoding="utf-8")
        print(json.dumps({"adap1_divergence": div["mean"]}))
    return 0


def cmd_ablate(args) -> int:
    resolved = resolve_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ModelConfig(**resolved["model"])
    tcfg = TrainConfig.from_dict(resolved["train"])
    train, test = _datasets(args, resolved["data"])
    if not test:
        raise DataError("ablation needs a held-out test set")
    params = load_base(args.base, cfg) if args.base else build_base(cfg, resolved["pretrain"], out / "base.ckpt")
    axes = {}
    if args.H_values:
        axes["H"] = args.H_values
    if args.alpha_values:
        axes["alpha"] = args.alpha_values
    if args.lprime_values:
        axes["Lprime"] = args.lprime_values
    if not axes:
        raise ConfigError("ablate: give at least one of --H-values, --alpha-values, --lprime-values")
    base_point = {"H": cfg.general_len, "alpha": cfg.alpha, "Lprime": cfg.causal_layers}
    points = sweep_points(base_point, **axes)
    write_resolved(out, {**resolved, "ablation": {"points": points, "seeds": args.seeds}})
    results = ablate(cfg, params, train, test, tcfg, points, args.seeds, out / "ablation.csv",
                     workers=args.workers)
    write_summary_csv(out / "ablation_summary.csv", summarize(results))
    return 0


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------
def _env_seed() -> int:
    raw = os.environ.get("DCA_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"DCA_SEED must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--seed", type=int, default=None, help="run seed (default: $DCA_SEED or 0)")
        p.add_argument("--out-dir", default="runs/latest")
        p.add_argument("--config", help="JSON config with model/train/data/pretrain sections")
        p.add_argument("--preset", choices=sorted(PRESETS))
        if data:
            p.add_argument("--task", choices=TASKS)

    p = sub.add_parser("gen-data", help="write a JSONL dataset")
    common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--n-test", type=int, default=0, help="also write a disjoint test split")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the frozen base model")
    common(p, data=False)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--base", help="base checkpoint (pretrained on the fly if omitted)")
        p.add_argument("--base-seed", type=int, help="seed of an on-the-fly base (default: pretrain.seed, 0)")
        p.add_argument("--train-data")
        p.add_argument("--test-data")
        p.add_argument("--alpha", type=float)
        p.add_argument("--H", type=int)
        p.add_argument("--lprime", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.set_defaults(func=func)
    ab = sub.choices["ablate"]
    ab.add_argument("--H-values", type=int, nargs="*")
    ab.add_argument("--alpha-values", type=float, nargs="*")
    ab.add_argument("--lprime-values", type=int, nargs="*")
    ab.add_argument("--seeds", type=int, nargs="+", default=[0])
    ab.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="export attention traces for a prompt")
    p.add_argument("checkpoint")
    p.add_argument("prompt")
    p.add_argument("--compare", help="second prompt; writes the adap1 divergence")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="runs/inspect")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is None:
            args.seed = _env_seed()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
