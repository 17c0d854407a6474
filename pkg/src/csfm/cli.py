"""Command-line interface: ``csfm <subcommand> [--config FILE] [overrides]``.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numeric failure (NaN/Inf during training).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, NumericError, VocabularyError
from .experiments import Strategy, ablation_run, generate_records
from .heads import (
    HeadType,
    TaskSpec,
    evaluate,
    extract_embeddings,
    finetune_transfer,
    rhythm_qa_items,
    task_examples,
)
from .metrics import mae, rmse
from .model import config_family, load_checkpoint, model_grad_check, prepare_example, save_checkpoint, CSFM
from .signals import (
    SyntheticConfig,
    make_corpus,
    parse_channel_list,
    read_manifest,
    save_record,
    subset_channels,
)
from .tokens import MaskMode
from .training import TrainConfig, pretrain

logger = logging.getLogger("csfm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4

DEFAULTS: dict[str, dict] = {
    "synth": {"n_records": 100, "ratios": [0.8, 0.1, 0.1], "af_fraction": 0.5, "kinds": None, "synthetic": {}},
    "pretrain": {"corpus": None, "model": {"size": "TINY"}, "train": {"n_steps": 1000, "lr": 1e-3},
                 "mask_mode": "MIXED", "mask_ratio": 0.75},
    "finetune": {"corpus": None, "checkpoint": None, "task": None, "fraction": 1.0,
                 "train": {"n_steps": 300, "lr": 1e-3, "warmup_steps": 20}, "eval_split": "test", "model": {"size": "TINY"}},
    "eval": {"corpus": None, "checkpoint": None, "task": None, "split": "test"},
    "embed": {"corpus": None, "checkpoint": None, "split": "test", "channels": None},
    "reconstruct": {"corpus": None, "checkpoint": None, "split": "test"},
    "ablate": {"n_downstream": 120, "n_pretrain": 150, "duration_s": 10.0, "downstream_noise_std": 0.02, "mask_mode": "MIXED", "strategies": [s.value for s in Strategy],
               "lead_configs": ["12-lead", "6-lead", "2-lead", "1-lead"], "seeds": [0, 1, 2, 3, 4], "fraction": 1.0,
               "pretrain": {"n_steps": 300, "lr": 1e-3}, "finetune": {"n_steps": 100, "lr": 1e-3, "warmup_steps": 10}},
    "gradcheck": {},
}

DEFAULT_TASK = {"task_name": "rhythm", "head": "CLASSIFY", "channel_subset": ["II"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csfm", description="Channel-agnostic masked-autoencoding models for cardiac signals.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("synth", "generate a synthetic corpus"),
        ("pretrain", "masked-autoencoder pretraining"),
        ("finetune", "fine-tune a task head"),
        ("eval", "evaluate a fine-tuned checkpoint"),
        ("embed", "export pooled embeddings"),
        ("reconstruct", "generate waveforms with a dense head"),
        ("ablate", "pretraining-corpus ablation"),
        ("gradcheck", "end-to-end gradient check on the micro config"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--corpus", type=Path, help="corpus directory or manifest.jsonl")
        p.add_argument("--channels", help="comma-separated channel kinds, e.g. II,V5")
        p.add_argument("--fraction", type=float)
        p.add_argument("--n", type=int, help="record count for synth / step count for training commands")
    return parser


# ---------------------------------------------------------------- config merging


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {str(path)!r} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then command-line overrides."""
    cfg = json.loads(json.dumps(DEFAULTS[args.command]))
    file_cfg = _load_config(args.config)
    unknown = set(file_cfg) - set(cfg) - {"seed", "out"}
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    for key, value in file_cfg.items():
        if isinstance(cfg.get(key), dict) and isinstance(value, dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "out")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = str(args.out)
    if args.checkpoint is not None:
        cfg["checkpoint"] = str(args.checkpoint)
    if args.corpus is not None:
        cfg["corpus"] = str(args.corpus)
    if args.fraction is not None:
        cfg["fraction"] = args.fraction
    if args.channels is not None:
        cfg["channels"] = [k.value for k in parse_channel_list(args.channels)]
    if args.n is not None:
        if args.command == "synth":
            cfg["n_records"] = args.n
        elif "train" in cfg:
            train_cfg = cfg["train"]
            train_cfg["n_steps"] = args.n
            train_cfg["warmup_steps"] = min(train_cfg.get("warmup_steps", TrainConfig.warmup_steps), args.n)
    return cfg


def _require(cfg: dict, key: str):
    if not cfg.get(key):
        raise ConfigError(f"{key!r} is required (config file or --{key})")
    return cfg[key]


def _corpus(cfg: dict, split: str | None = None):
    path = Path(_require(cfg, "corpus"))
    if path.is_dir():
        path = path / "manifest.jsonl"
    entries = read_manifest(path)
    if split is not None:
        entries = [e for e in entries if e.split == split]
        if not entries:
            raise DataError(f"corpus {str(path)!r} has no {split!r} records")
    return [e.record for e in entries]


def _task(cfg: dict) -> TaskSpec:
    task = TaskSpec.from_dict(cfg.get("task") or DEFAULT_TASK)
    if cfg.get("channels"):
        task = task.with_channels(parse_channel_list(",".join(cfg["channels"])))
    return task


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg.get("train", {}), "seed": cfg["seed"]})


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg: dict, out: Path) -> list[Path]:
    template = SyntheticConfig.from_dict(cfg["synthetic"])
    kinds = parse_channel_list(",".join(cfg["kinds"])) if cfg.get("kinds") else None
    corpus_dir = out / "corpus"
    make_corpus(int(cfg["n_records"]), template, tuple(cfg["ratios"]), cfg["seed"], cfg["af_fraction"], kinds, corpus_dir)
    return sorted(corpus_dir.iterdir())


def cmd_pretrain(cfg: dict, out: Path) -> list[Path]:
    records = _corpus(cfg, "train")
    model_cfg = dict(cfg["model"])
    config = config_family(model_cfg.pop("size", "TINY"), **model_cfg)
    if cfg.get("channels"):
        kinds = parse_channel_list(",".join(cfg["channels"]))
        records = [subset_channels(r, kinds) for r in records]
    model = CSFM(config, seed=cfg["seed"])
    examples = [prepare_example(r, config) for r in records]
    result = pretrain(model, examples, _train_config(cfg), MaskMode(cfg["mask_mode"]), cfg["mask_ratio"])
    ckpt, curve = out / "checkpoint.ckpt", out / "loss_curve.csv"
    save_checkpoint(model, ckpt)
    result.save_curve(curve)
    print(f"initial loss {result.loss_curve[0]:.5f}  final loss {result.loss_curve[-1]:.5f}")
    return [ckpt, curve]


def _qa_items(task: TaskSpec, records):
    return rhythm_qa_items(records) if task.head is HeadType.QA else None


def _write_report(report, out: Path, stem: str = "metrics") -> list[Path]:
    paths = [out / f"{stem}.json", out / f"{stem}.csv"]
    paths[0].write_text(report.to_json() + "\n")
    paths[1].write_text(report.to_csv())
    for name, value in sorted(report.values.items()):
        print(f"{name} {value:.6f}")
    return paths


def cmd_finetune(cfg: dict, out: Path) -> list[Path]:
    task = _task(cfg)
    train_records = _corpus(cfg, "train")
    eval_records = _corpus(cfg, cfg["eval_split"])
    checkpoint = cfg.get("checkpoint")
    model_cfg = dict(cfg.get("model") or {})
    model_config = config_family(model_cfg.pop("size", "TINY"), **model_cfg) if checkpoint is None else None
    result = finetune_transfer(checkpoint, task, train_records, cfg["fraction"], _train_config(cfg), cfg["seed"],
                               eval_records, _qa_items(task, train_records), _qa_items(task, eval_records), model_config)
    ckpt, curve = out / "finetuned.ckpt", out / "loss_curve.csv"
    save_checkpoint(result.model, ckpt)
    _write_csv(curve, ["step", "loss"], [[i, repr(v)] for i, v in enumerate(result.loss_curve)])
    return [ckpt, curve] + _write_report(result.metrics, out)


def cmd_eval(cfg: dict, out: Path) -> list[Path]:
    model = load_checkpoint(_require(cfg, "checkpoint"))
    if model.head is None:
        raise ConfigError("eval needs a fine-tuned checkpoint with a head")
    task = _task(cfg)
    records = _corpus(cfg, cfg["split"])
    report = evaluate(model, task, task_examples(records, task, model.config, _qa_items(task, records)),
                      seed=cfg["seed"], split=cfg["split"])
    report.config = {"task": task.to_dict(), "checkpoint": str(cfg["checkpoint"])}
    return _write_report(report, out)


def cmd_embed(cfg: dict, out: Path) -> list[Path]:
    model = load_checkpoint(_require(cfg, "checkpoint"))
    records = _corpus(cfg, cfg["split"])
    if cfg.get("channels"):
        kinds = parse_channel_list(",".join(cfg["channels"]))
        records = [subset_channels(r, kinds) for r in records]
    emb = extract_embeddings(model, [prepare_example(r, model.config, include_text=False) for r in records])
    path = out / "embeddings.csv"
    _write_csv(path, ["record_id", "condition"] + [f"e{i}" for i in range(emb.shape[1])],
               [[r.record_id, r.labels.get("condition", "")] + [repr(float(v)) for v in row] for r, row in zip(records, emb)])
    return [path]


def cmd_reconstruct(cfg: dict, out: Path) -> list[Path]:
    model = load_checkpoint(_require(cfg, "checkpoint"))
    if model.head is None or not hasattr(model.head, "target_kinds"):
        raise ConfigError("reconstruct needs a checkpoint with a dense head")
    records = _corpus(cfg, cfg["split"])
    targets = model.head.target_kinds
    sources = parse_channel_list(",".join(cfg["channels"])) if cfg.get("channels") else None
    if sources is None:
        sources = tuple(k for k in records[0].kinds if k not in targets)
    generated = generate_records(model, records, sources)
    gen_dir = out / "generated"
    gen_dir.mkdir(parents=True, exist_ok=True)
    paths, errors = [], []
    for rec, gen in zip(records, generated):
        path = gen_dir / f"{rec.record_id}.cwb"
        save_record(gen, path)
        paths.append(path)
        if all(k in rec.channels for k in targets):
            errors.append((rec, gen))
    if errors:
        y = np.concatenate([np.concatenate([r.channels[k][: g.length] for k in targets]) for r, g in errors])
        yh = np.concatenate([np.concatenate([g.channels[k] for k in targets]) for _, g in errors])
        summary = {"mae": mae(y, yh), "rmse": rmse(y, yh), "n_records": len(errors)}
        path = out / "metrics.json"
        path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        paths.append(path)
        print(f"mae {summary['mae']:.6f}  rmse {summary['rmse']:.6f}")
    return paths


def cmd_ablate(cfg: dict, out: Path) -> list[Path]:
    seed = cfg["seed"]
    template = SyntheticConfig(duration_s=cfg["duration_s"], noise_std=cfg["downstream_noise_std"], with_report=False)
    train, _, test = make_corpus(int(cfg["n_downstream"]), template, (0.5, 0.0, 0.5), seed + 1000)
    report = ablation_run(cfg["strategies"], cfg["lead_configs"], cfg["seeds"],
                          TrainConfig.from_dict({**cfg["pretrain"], "seed": seed}),
                          TrainConfig.from_dict(cfg["finetune"]), n_pretrain=int(cfg["n_pretrain"]),
                          downstream_train=[e.record for e in train], downstream_test=[e.record for e in test],
                          fraction=cfg["fraction"], pretrain_seed=seed, pretrain_duration_s=cfg["duration_s"],
                          mask_mode=cfg["mask_mode"])
    path = out / "ablation.csv"
    path.write_text(report.to_csv())
    print(report.to_csv(), end="")
    return [path]


def cmd_gradcheck(cfg: dict, out: Path) -> list[Path]:
    err = model_grad_check(seed=cfg["seed"])
    path = out / "gradcheck.json"
    path.write_text(json.dumps({"max_relative_error": err, "tolerance": GRADCHECK_TOLERANCE}, indent=2) + "\n")
    print(f"max relative error {err:.3e}")
    if err >= GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE}", op="grad_check")
    return [path]


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "reconstruct": cmd_reconstruct,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def run(args: argparse.Namespace) -> int:
    started = _now()
    cfg = resolve_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = COMMANDS[args.command](cfg, out)
    manifest = {
        "command": args.command,
        "config": cfg,
        "inputs": {k: cfg[k] for k in ("corpus", "checkpoint") if cfg.get(k)},
        "outputs": [str(p) for p in outputs],
        "seed": cfg["seed"],
        "started_at": started,
        "finished_at": _now(),
        "hashes": {str(p): _sha256(p) for p in outputs if p.is_file()},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, VocabularyError, ContractError) as exc:
        print(f"csfm {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"csfm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"csfm {args.command}: numeric failure{where} in {exc.op}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
