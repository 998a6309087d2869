"""Command-line harness: synth, preprocess, train, grid, kfold, ensemble,
gradcheck.

Configuration is a flat key=value file plus repeatable --set overrides
(the flag wins). Every random stream derives from the single --seed via
child = master XOR sha256(name)[:4]. Each command writes its artifacts and
an experiment manifest into --out-dir.

Exit codes: 0 success; 2 malformed configuration or usage; 3 missing or
malformed input data; 4 invariant/contract violation (incl. gradcheck
failure); 1 unexpected error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import uuid
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, contrastive, encoder, evaldeploy, gradcheck, synthdata, textprep, trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, InputError, ShapeError
from .seeding import derive_seed

# key -> (type, default, help); types: int, float, bool, str, ints, floats
CONFIG_SCHEMA = {
    "prep.max_len": ("int", 64, "sequence length incl. CLS/SEP (presets: hmc2019=64, covid19phm=68, rhmd=215)"),
    "prep.min_count": ("int", 2, "min token frequency for the vocabulary"),
    "prep.keep_hashtag_text": ("bool", False, "strip '#' but keep the hashtag word"),
    "split.train": ("float", 0.8, "train fraction"),
    "split.val": ("float", 0.1, "validation fraction"),
    "split.test": ("float", 0.1, "test fraction"),
    "model.layers": ("int", 2, "encoder layers"),
    "model.dim": ("int", 64, "model width"),
    "model.heads": ("int", 2, "attention heads"),
    "model.ff_dim": ("int", 128, "feed-forward width"),
    "train.epsilon": ("float", 1e-3, "perturbation strength"),
    "train.lambda": ("float", 0.2, "weight between the CE pair and the contrastive term"),
    "train.beta": ("float", 0.005, "redundancy-reduction trade-off"),
    "train.batch_size": ("int", 16, "training batch size"),
    "train.learning_rate": ("float", 1e-3, "step size (1e-5 is the finetuning preset)"),
    "train.epochs": ("int", 40, "max training epochs"),
    "train.patience": ("int", 5, "early-stopping patience in epochs"),
    "train.noise_scale": ("str", "std", "noise scale reading: 'std' or 'variance'"),
    "train.bt_centering": ("bool", False, "mean-center embeddings before the correlation"),
    "train.rwp": ("bool", True, "enable the perturbed stream"),
    "train.cl": ("bool", True, "enable the contrastive term (needs train.rwp)"),
    "train.weight_decay": ("float", 0.01, "decoupled weight decay"),
    "train.clip_norm": ("float", 1.0, "global gradient-norm clip; 0 disables"),
    "train.eval_batch_size": ("int", 64, "evaluation batch size"),
    "grid.batch_sizes": ("ints", (16, 32), "sweep axis: batch sizes"),
    "grid.epsilons": ("floats", (5e-4, 1e-4, 5e-3, 1e-3), "sweep axis: perturbation strengths"),
    "grid.lambdas": ("floats", (0.1, 0.2, 0.3, 0.4, 0.5), "sweep axis: loss weights"),
    "kfold.k": ("int", 10, "number of folds"),
    "kfold.val_fraction": ("float", 0.1, "per-fold early-stopping fraction"),
    "synth.n_examples": ("int", 2000, "synthetic examples"),
    "synth.n_classes": ("int", 2, "synthetic classes"),
    "synth.vocab_size": ("int", 60, "synthetic vocabulary size"),
    "synth.signal_per_class": ("int", 3, "signal tokens per class"),
    "synth.noise_rate": ("float", 0.5, "fraction of noise tokens per text"),
    "synth.flip_rate": ("float", 0.05, "label corruption rate"),
    "synth.min_tokens": ("int", 6, "min tokens per synthetic text"),
    "synth.max_tokens": ("int", 12, "max tokens per synthetic text"),
}


def _parse_value(key: str, raw):
    if key not in CONFIG_SCHEMA:
        raise ConfigError(f"unknown config key {key!r} (see --help for the full list)")
    kind = CONFIG_SCHEMA[key][0]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(x) for x in str(raw).split(","))
        if kind == "floats":
            return tuple(float(x) for x in str(raw).split(","))
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r} expects {kind}, got {raw!r}") from exc


class Config:
    """Defaults overlaid with a key=value file and then --set overrides."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}

    @classmethod
    def load(cls, config_path, overrides) -> "Config":
        values = {k: default for k, (_, default, _) in CONFIG_SCHEMA.items()}
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise InputError(f"config file not found: {path}")
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"malformed config line {lineno} in {path}: {line!r}")
                key, raw = line.split("=", 1)
                values[key.strip()] = _parse_value(key.strip(), raw.strip())
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            key, raw = item.split("=", 1)
            values[key.strip()] = _parse_value(key.strip(), raw.strip())
        return cls(values)

    def train_config(self, seed: int) -> trainer.TrainConfig:
        v = self.values
        return trainer.TrainConfig(
            epsilon=v["train.epsilon"], lam=v["train.lambda"], beta=v["train.beta"],
            batch_size=v["train.batch_size"], learning_rate=v["train.learning_rate"],
            epochs=v["train.epochs"], patience=v["train.patience"], seed=seed,
            noise_scale=v["train.noise_scale"], bt_centering=v["train.bt_centering"],
            rwp=v["train.rwp"], cl=v["train.cl"], weight_decay=v["train.weight_decay"],
            clip_norm=v["train.clip_norm"], eval_batch_size=v["train.eval_batch_size"])

    def encoder_config(self, vocab_size: int, num_classes: int) -> encoder.EncoderConfig:
        v = self.values
        return encoder.EncoderConfig(
            vocab_size=vocab_size, max_len=v["prep.max_len"], num_classes=num_classes,
            layers=v["model.layers"], model_dim=v["model.dim"], heads=v["model.heads"],
            ff_dim=v["model.ff_dim"])


def _config_epilog() -> str:
    lines = ["configuration keys (key = type, default):"]
    for key, (kind, default, help_text) in CONFIG_SCHEMA.items():
        shown = ",".join(str(x) for x in default) if isinstance(default, tuple) else default
        lines.append(f"  {key} = {kind}, default {shown}: {help_text}")
    lines.append("")
    lines.append("exit codes: 0 success; 2 malformed configuration or usage; "
                 "3 missing or malformed input; 4 invariant violation; 1 unexpected error.")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                        help="override one config key (repeatable; wins over --config)")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="parallel trials for grid/kfold (default 1)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded fully reproducible mode (forces --jobs 1)")
    common.add_argument("--out-dir", default="runs", help="artifact directory (default: runs)")

    parser = argparse.ArgumentParser(
        prog="rwpcl",
        description="Train small text classifiers with parameter perturbation and a "
                    "redundancy-reduction contrastive objective.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("out", help="output dataset path (JSONL)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="build vocabulary and token cache")
    p.add_argument("dataset", help="input dataset (JSONL)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one model (or an ablation trio)")
    p.add_argument("dataset", help="input dataset (JSONL)")
    p.add_argument("--ablation", action="store_true",
                   help="run baseline / perturbation-only / full variants and emit the ablation table")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", parents=[common], help="hyperparameter sweep over batch size, epsilon, lambda")
    p.add_argument("dataset", help="input dataset (JSONL)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("kfold", parents=[common], help="k-fold cross-validation")
    p.add_argument("dataset", help="input dataset (JSONL)")
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("ensemble", parents=[common], help="average probability files and predict")
    p.add_argument("probs", nargs="+", help="probability files (JSONL), one per model")
    p.add_argument("--gold", help="dataset whose row order matches the probability indices")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jobs(args) -> int:
    return 1 if args.deterministic else max(1, args.jobs)


def _write_manifest(out: Path, command: str, args, config: Config | None,
                    inputs: dict, outputs: list, started: float) -> None:
    manifest = {
        "run_id": uuid.uuid4().hex,
        "command": command,
        "package_version": __version__,
        "seed": args.seed,
        "jobs": _jobs(args),
        "deterministic": bool(args.deterministic),
        "config": config.as_dict() if config else {},
        "inputs": inputs,
        "outputs": sorted(str(o) for o in outputs),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    (out / f"{command}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _load_and_encode(args, config: Config):
    """Shared pipeline: load dataset, clean, split, build vocab on the train
    portion, tokenize everything."""
    meta, posts = textprep.load_dataset(args.dataset)
    keep_hash = config["prep.keep_hashtag_text"]
    cleaned = [textprep.preprocess(p.text, keep_hashtag_text=keep_hash) for p in posts]
    labels = np.array([p.label for p in posts], dtype=np.int64)
    ratios = (config["split.train"], config["split.val"], config["split.test"])
    tr, va, te = textprep.split(labels, ratios, seed=derive_seed(args.seed, "split"))
    vocab = textprep.Vocabulary.build((cleaned[i] for i in tr), min_count=config["prep.min_count"])
    examples = [textprep.tokenize(text, vocab, config["prep.max_len"], label)
                for text, label in zip(cleaned, labels)]
    full = textprep.collate(examples)
    return meta, full, vocab, (tr, va, te)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    spec = synthdata.SyntheticSpec(
        n_examples=config["synth.n_examples"], n_classes=config["synth.n_classes"],
        vocab_size=config["synth.vocab_size"], signal_per_class=config["synth.signal_per_class"],
        noise_rate=config["synth.noise_rate"], flip_rate=config["synth.flip_rate"],
        seed=derive_seed(args.seed, "synth"), min_tokens=config["synth.min_tokens"],
        max_tokens=config["synth.max_tokens"])
    meta, posts = synthdata.generate(spec)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    textprep.save_dataset(out_path, meta, posts)
    out = _out_dir(args)
    _write_manifest(out, "synth", args, config, {}, [out_path], started)
    print(f"synth: wrote {len(posts)} examples ({meta.num_classes} classes) to {out_path}")
    return 0


def cmd_preprocess(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    meta, posts = textprep.load_dataset(args.dataset)
    keep_hash = config["prep.keep_hashtag_text"]
    cleaned = [textprep.preprocess(p.text, keep_hashtag_text=keep_hash) for p in posts]
    vocab = textprep.Vocabulary.build(cleaned, min_count=config["prep.min_count"])
    examples = [textprep.tokenize(text, vocab, config["prep.max_len"], post.label)
                for text, post in zip(cleaned, posts)]
    batch = textprep.collate(examples)
    out = _out_dir(args)
    vocab_path = out / "vocab.tsv"
    vocab.save(vocab_path)
    cache_path = out / "tokens.npz"
    np.savez(cache_path, ids=batch.ids, mask=batch.mask, labels=batch.labels,
             num_classes=np.int64(meta.num_classes))
    _write_manifest(out, "preprocess", args, config, {args.dataset: _sha256(args.dataset)},
                    [vocab_path, cache_path], started)
    print(f"preprocess: {len(posts)} examples, vocabulary size {len(vocab)} -> {out}")
    return 0


def _train_once(name: str, cfg, model_cfg, data, splits, out: Path):
    tr, va, te = splits
    result = trainer.fit(data.subset(tr), data.subset(va), cfg, model_cfg)
    metrics_path = out / (f"metrics_{name}.jsonl" if name else "metrics.jsonl")
    _write_jsonl(metrics_path, result.log)
    params = trainer.model_from_snapshot(model_cfg, result.checkpoint)
    probs = trainer.predict_dataset(model_cfg, params, data.subset(te), cfg.eval_batch_size)
    report = evaldeploy.score_predictions(data.labels[te], probs.argmax(axis=1), model_cfg.num_classes)
    return result, probs, report, [metrics_path]


ABLATION_VARIANTS = (("baseline", False, False), ("rwp", True, False), ("rwp_cl", True, True))


def cmd_train(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    meta, data, vocab, splits = _load_and_encode(args, config)
    model_cfg = config.encoder_config(len(vocab), meta.num_classes)
    base_cfg = config.train_config(seed=derive_seed(args.seed, "trial"))
    out = _out_dir(args)
    outputs = []
    vocab_path = out / "vocab.tsv"
    vocab.save(vocab_path)
    outputs.append(vocab_path)

    if args.ablation:
        table = {}
        for name, rwp, cl in ABLATION_VARIANTS:
            cfg = replace(base_cfg, rwp=rwp, cl=cl)
            result, probs, report, paths = _train_once(name, cfg, model_cfg, data, splits, out)
            outputs.extend(paths)
            ckpt_path = out / f"checkpoint_{name}.rwpc"
            save_checkpoint(ckpt_path, result.checkpoint)
            outputs.append(ckpt_path)
            table[name] = report.macro_f1
            print(f"train[{name}]: best val F1 {result.best_f1:.4f} at epoch {result.best_epoch}, "
                  f"test macro-F1 {report.macro_f1:.4f}")
        ablation_path = out / "ablation.json"
        ablation_path.write_text(json.dumps({"dataset": meta.name, "macro_f1": table},
                                            indent=2, sort_keys=True) + "\n", encoding="utf-8")
        text = ["variant   " + "  ".join(f"{n:>10}" for n, _, _ in ABLATION_VARIANTS),
                "macro_f1  " + "  ".join(f"{table[n]:>10.4f}" for n, _, _ in ABLATION_VARIANTS)]
        table_path = out / "ablation_table.txt"
        table_path.write_text("\n".join(text) + "\n", encoding="utf-8")
        outputs.extend([ablation_path, table_path])
    else:
        result, probs, report, paths = _train_once("", base_cfg, model_cfg, data, splits, out)
        outputs.extend(paths)
        ckpt_path = out / "checkpoint.rwpc"
        save_checkpoint(ckpt_path, result.checkpoint)
        probs_path = out / "probs_test.jsonl"
        evaldeploy.save_probabilities(probs_path, f"train-seed{args.seed}", probs)
        report_path = out / "test_report.json"
        report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
        outputs.extend([ckpt_path, probs_path, report_path])
        print(f"train: best val F1 {result.best_f1:.4f} at epoch {result.best_epoch}, "
              f"test macro-F1 {report.macro_f1:.4f}")
    _write_manifest(out, "train", args, config, {args.dataset: _sha256(args.dataset)}, outputs, started)
    return 0


def cmd_grid(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    meta, data, vocab, (tr, va, _) = _load_and_encode(args, config)
    model_cfg = config.encoder_config(len(vocab), meta.num_classes)
    base_cfg = config.train_config(seed=args.seed)
    spec = trainer.GridSpec(batch_sizes=config["grid.batch_sizes"],
                            epsilons=config["grid.epsilons"], lambdas=config["grid.lambdas"])
    result = trainer.grid_search(data.subset(tr), data.subset(va), base_cfg, model_cfg,
                                 spec, master_seed=args.seed, jobs=_jobs(args))
    out = _out_dir(args)
    cells = [{"batch_size": t.batch_size, "epsilon": t.epsilon, "lambda": t.lam,
              "val_macro_f1": t.val_macro_f1, "best_epoch": t.best_epoch, "seed": t.seed,
              "error": t.error} for t in result.trials]
    best = result.best
    results_path = out / "grid_results.json"
    results_path.write_text(json.dumps({
        "dataset": meta.name,
        "axes": {"batch_sizes": list(spec.batch_sizes), "epsilons": list(spec.epsilons),
                 "lambdas": list(spec.lambdas)},
        "cells": cells,
        "best": {"batch_size": best.batch_size, "epsilon": best.epsilon, "lambda": best.lam,
                 "val_macro_f1": best.val_macro_f1},
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table_path = out / "sweep_table.txt"
    table_path.write_text(trainer.grid_table(result), encoding="utf-8")
    best_cfg_path = out / "best_config.txt"
    best_cfg_path.write_text(
        f"train.batch_size={best.batch_size}\ntrain.epsilon={best.epsilon:g}\n"
        f"train.lambda={best.lam:g}\n", encoding="utf-8")
    _write_manifest(out, "grid", args, config, {args.dataset: _sha256(args.dataset)},
                    [results_path, table_path, best_cfg_path], started)
    print(f"grid: {len(cells)} cells; best b={best.batch_size} eps={best.epsilon:g} "
          f"lambda={best.lam:g} val macro-F1 {best.val_macro_f1:.4f}")
    return 0


def cmd_kfold(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    meta, posts = textprep.load_dataset(args.dataset)
    keep_hash = config["prep.keep_hashtag_text"]
    cleaned = [textprep.preprocess(p.text, keep_hashtag_text=keep_hash) for p in posts]
    labels = np.array([p.label for p in posts], dtype=np.int64)
    vocab = textprep.Vocabulary.build(cleaned, min_count=config["prep.min_count"])
    examples = [textprep.tokenize(text, vocab, config["prep.max_len"], label)
                for text, label in zip(cleaned, labels)]
    data = textprep.collate(examples)
    plan = textprep.kfold(labels, config["kfold.k"], seed=derive_seed(args.seed, "folds"))
    model_cfg = config.encoder_config(len(vocab), meta.num_classes)
    base_cfg = config.train_config(seed=args.seed)
    result = evaldeploy.kfold_evaluate(data, plan, base_cfg, model_cfg, master_seed=args.seed,
                                       jobs=_jobs(args), val_fraction=config["kfold.val_fraction"])
    out = _out_dir(args)
    report_path = out / "folds_report.json"
    payload = result.to_dict()
    payload["dataset"] = meta.name
    payload["k"] = plan.k
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "kfold", args, config, {args.dataset: _sha256(args.dataset)},
                    [report_path], started)
    print(f"kfold: k={plan.k} macro-F1 {result.macro_f1_mean:.4f} +/- {result.macro_f1_std:.4f} "
          f"({result.completed} folds completed)")
    return 0


def cmd_ensemble(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    matrices = [evaldeploy.load_probabilities(path) for path in args.probs]
    result = evaldeploy.ensemble(matrices)
    out = _out_dir(args)
    pred_path = out / "predictions.jsonl"
    _write_jsonl(pred_path, ({"index": i, "label": int(lab), "probs": [float(x) for x in row]}
                             for i, (lab, row) in enumerate(zip(result.labels, result.probs))))
    payload = {"models": result.model_ids, "n_examples": int(result.probs.shape[0])}
    if args.gold:
        meta, posts = textprep.load_dataset(args.gold)
        gold = np.array([p.label for p in posts], dtype=np.int64)
        if len(gold) != result.probs.shape[0]:
            raise InputError(f"gold dataset has {len(gold)} rows but probabilities have "
                             f"{result.probs.shape[0]}")
        payload["metrics"] = evaldeploy.score_predictions(gold, result.labels, meta.num_classes).to_dict()
    report_path = out / "ensemble_report.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "ensemble", args, config,
                    {p: _sha256(p) for p in args.probs}, [pred_path, report_path], started)
    summary = f"ensemble: {len(matrices)} models, {result.probs.shape[0]} examples"
    if "metrics" in payload:
        summary += f", macro-F1 {payload['metrics']['macro_f1']:.4f}"
    print(summary)
    return 0


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    config = Config.load(args.config, args.overrides)
    report = gradcheck.run_suite(seed=args.seed)
    out = _out_dir(args)
    report_path = out / "gradcheck_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for check in report["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status} {check['name']}: max_rel_err={check['max_rel_err']:.3e} "
              f"(tol {check['tolerance']:g})")
    print(f"gradcheck: max_rel_err={report['max_rel_err']:.3e} in {report['seconds']:.1f}s")
    _write_manifest(out, "gradcheck", args, config, {}, [report_path], started)
    return 0 if report["passed"] else 4


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error kind=config: {exc}", file=sys.stderr)
        return 2
    except (InputError, ShapeError) as exc:
        print(f"error kind=input: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error kind=input: {exc}", file=sys.stderr)
        return 3
    except (ContractError, trainer.TrialDivergedError) as exc:
        print(f"error kind=contract: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"error kind=unexpected: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
