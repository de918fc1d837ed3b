"""Command-line entry point.

Subcommands cover the whole lifecycle: ``gen`` (synthetic dataset to disk),
``train`` (checkpoint + training-log CSV), ``eval`` (metric report + CSV
row), ``gradcheck`` (finite-difference verification per operation family),
``serve`` (stage workers + gateway until interrupted), ``bench`` (latency
CSV against a gateway), and ``demo`` (one sample through the model, with
the adaptation directive it triggers).

Conventions shared by every subcommand:

- configuration precedence is flags > config file > defaults;
- the fully resolved run configuration is written to the output directory
  as ``run_config.json``, sufficient to reproduce the run bit-for-bit
  (wall-clock timings excepted);
- all randomness flows from ``--seed``;
- exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime
  failure — errors print a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import (
    DEFAULT_LABELS,
    ConvLayer,
    DataConfig,
    ModelConfig,
    TrainConfig,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_dataset, load_dataset, save_dataset
from .errors import CmtError, ConfigError, InputError
from .fusion import CmtModel
from .gradcheck import standard_suite
from .metrics import CSV_HEADER as METRICS_CSV_HEADER
from .metrics import evaluate
from .serving.adapt import adapt_response
from .serving.bench import bench_gateway, bench_remote, compare_sequential
from .serving.config import load_serving_config, parse_listen
from .serving.gateway import Gateway
from .trainer import train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration of one CLI run, written to the output
    directory so the run can be reproduced from the file alone."""

    command: str
    seed: int
    out_dir: str | None = None
    model: dict | None = None
    train: dict | None = None
    data: dict | None = None
    serving: dict | None = None

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "run_config.json"
        body = {k: v for k, v in asdict(self).items() if v is not None}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


class _Parser(argparse.ArgumentParser):
    """argparse with single-line errors and the documented usage exit code."""

    def error(self, message: str):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} file {path} is not valid JSON: {e}") from None


def _config_section(args, section: str) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    body = _load_json(args.config, "config")
    if not isinstance(body, dict):
        raise ConfigError(f"config file {args.config} must hold a JSON object")
    sub = body.get(section, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    return dict(sub)


def _apply_flag_overrides(base: dict, args, mapping: dict[str, str]) -> dict:
    """Overlay non-None flag values (flags > file > defaults)."""
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            base[key] = value
    return base


def _default_labels(num_classes: int) -> tuple[str, ...]:
    if num_classes == len(DEFAULT_LABELS):
        return DEFAULT_LABELS
    return tuple(f"class{i}" for i in range(num_classes))


def model_config_for_dataset(data_cfg: DataConfig, overrides: dict) -> ModelConfig:
    """Model dimensions derived from the dataset's shape, then overridden
    by the config file's ``model`` section."""
    base = dict(
        image_height=data_cfg.image_height,
        image_width=data_cfg.image_width,
        image_channels=data_cfg.image_channels,
        patch_size=data_cfg.patch_size,
        audio_samples=data_cfg.audio_samples,
        sample_rate=data_cfg.sample_rate,
        vocab_size=data_cfg.vocab_size,
        max_text_len=data_cfg.text_len,
        num_classes=data_cfg.num_classes,
        labels=_default_labels(data_cfg.num_classes),
    )
    base.update(overrides)
    if "conv_layers" in base and base["conv_layers"] \
            and not isinstance(base["conv_layers"][0], ConvLayer):
        base["conv_layers"] = tuple(
            ConvLayer(**c) for c in base["conv_layers"])
    if "labels" in base:
        base["labels"] = tuple(base["labels"])
    return ModelConfig(**base)


def _model_from_checkpoint(path: str) -> tuple[CmtModel, dict]:
    arrays, config = load_checkpoint(path)
    if not config or "model" not in config:
        raise ConfigError(
            f"checkpoint {path} carries no model configuration")
    cfg = ModelConfig.from_dict(config["model"])
    model = CmtModel.init(cfg, seed=0)
    model.load_arrays(arrays)
    return model, config


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    section = _config_section(args, "data")
    _apply_flag_overrides(section, args, {
        "classes": "num_classes",
        "train_per_class": "train_per_class",
        "val_per_class": "val_per_class",
        "test_per_class": "test_per_class",
        "noise": "noise",
        "coupling": "coupling",
        "seed": "seed",
    })
    data_cfg = DataConfig.from_dict(section)
    ds = generate_dataset(data_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    RunConfig(command="gen", seed=data_cfg.seed, out_dir=str(out),
              data=data_cfg.to_dict()).write(out)
    total = len(ds.train) + len(ds.val) + len(ds.test)
    print(f"generated {total} samples ({len(ds.train)} train / "
          f"{len(ds.val)} val / {len(ds.test)} test) in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    model_cfg = model_config_for_dataset(ds.config,
                                         _config_section(args, "model"))

    train_section = _config_section(args, "train")
    _apply_flag_overrides(train_section, args, {
        "optimizer": "optimizer",
        "lr": "learning_rate",
        "batch_size": "batch_size",
        "max_epochs": "max_epochs",
        "patience": "patience",
        "workers": "workers",
        "seed": "seed",
    })
    train_cfg = TrainConfig.from_dict(train_section)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig(command="train", seed=train_cfg.seed, out_dir=str(out),
                    model=model_cfg.to_dict(), train=train_cfg.to_dict(),
                    data=ds.config.to_dict())
    run.write(out)

    model = CmtModel.init(model_cfg, seed=train_cfg.seed)

    def on_epoch(rec):
        print(f"epoch {rec.epoch}: train_loss {rec.train_loss:.4f} "
              f"val_loss {rec.val_loss:.4f} val_acc {rec.val_accuracy:.4f}",
              flush=True)

    log = train(model, ds.train, ds.val, train_cfg,
                on_epoch=on_epoch if args.verbose else None)

    (out / "training_log.csv").write_text(log.to_csv())
    ckpt = out / "model.cmtc"
    save_checkpoint(ckpt, {k: p.data for k, p in model.params.items()},
                    {"model": model_cfg.to_dict(),
                     "train": train_cfg.to_dict(),
                     "data": ds.config.to_dict()})
    best = log.records[log.best_epoch]
    stop = "stopped early" if log.stopped_early else "ran to max epochs"
    print(f"trained {len(log.records)} epochs ({stop}); best epoch "
          f"{log.best_epoch}: val_loss {best.val_loss:.4f}, "
          f"val_accuracy {best.val_accuracy:.4f}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if model.cfg.num_classes != ds.config.num_classes:
        raise ConfigError(
            f"class count mismatch: checkpoint has {model.cfg.num_classes} "
            f"classes, dataset has {ds.config.num_classes}")
    samples = ds.split(args.split)
    report, _ = evaluate(model, samples)
    print(report.text(model.cfg.labels))
    row = report.csv_row(args.model_name)
    print(METRICS_CSV_HEADER)
    print(row)
    if args.out:
        Path(args.out).write_text(f"{METRICS_CSV_HEADER}\n{row}\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    suite = standard_suite(eps=args.eps, tol=args.tol, seed=args.seed,
                           composition_coords=args.coords or None)
    failed = []
    for name, report in suite:
        status = "OK" if report.ok else "FAIL"
        print(f"gradcheck {name}: {status} "
              f"(max rel error {report.max_rel_error:.3e}, "
              f"{report.checked} coordinates)")
        if not report.ok:
            failed.append(name)
            for f in report.failures[:5]:
                print(f"  {f.param}{list(f.index)}: analytic {f.analytic:.6e} "
                      f"vs numeric {f.numeric:.6e} (rel {f.rel_error:.3e})")
    if failed:
        print(f"error: gradient check failed for {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = load_serving_config(args.config)
    gateway = Gateway(cfg, mode=args.mode)
    gateway.start(listener=True)
    try:
        print(f"LISTEN {gateway.host}:{gateway.port}", flush=True)
        try:
            import time as time_mod
            while True:
                time_mod.sleep(3600)
        except KeyboardInterrupt:
            pass
    finally:
        gateway.close()
    return EXIT_OK


def cmd_bench(args) -> int:
    if (args.target is None) == (args.config is None):
        raise ConfigError("bench needs exactly one of --target or --config")
    ds = load_dataset(args.data)
    samples = ds.split(args.split)

    if args.target is not None:
        host, port = parse_listen(args.target)
        stats = bench_remote(host, port, samples,
                             num_requests=args.requests,
                             concurrency=args.concurrency,
                             sequential=args.sequential_baseline)
        if args.sequential_baseline:
            print("note: --sequential-baseline against --target measures "
                  "the sequential path only")
    else:
        cfg = load_serving_config(args.config)
        with Gateway(cfg, mode=args.mode).start() as gateway:
            if args.sequential_baseline:
                conc, seq, speedup = compare_sequential(
                    gateway, samples, num_requests=args.requests,
                    concurrency=args.concurrency)
                print(f"concurrent: {conc.summary()}")
                print(f"sequential: {seq.summary()}")
                print(f"fan-out speedup: {speedup:.2f}x")
                stats = conc
            else:
                stats = bench_gateway(gateway, samples,
                                      num_requests=args.requests,
                                      concurrency=args.concurrency)
    print(stats.summary())
    if args.out:
        Path(args.out).write_text(stats.to_csv())
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_demo(args) -> int:
    from .encoders import encode_audio, encode_text, encode_visual

    model, _ = _model_from_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    samples = ds.split(args.split)
    if not 0 <= args.index < len(samples):
        raise InputError(f"sample index {args.index} outside split "
                         f"{args.split!r} of {len(samples)} samples")
    sample = samples[args.index]

    zv = encode_visual(sample.visual, model.params, model.cfg)
    za = encode_audio(sample.audio, model.params, model.cfg)
    zt = encode_text(sample.text, model.params, model.cfg)
    dist = model.forward_fused(zv, za, zt)
    labels = model.cfg.labels
    directive = adapt_response(dist.argmax, labels)

    print(f"sample {sample.id} (true label: {labels[sample.label]})")
    order = np.argsort(-dist.probs.data)
    for k in order:
        marker = " <- predicted" if k == dist.argmax else ""
        print(f"  {labels[k]:<12s} {dist.probs.data[k]:.4f}{marker}")
    print("adaptation directive:")
    for key, value in directive.to_dict().items():
        print(f"  {key}: {value}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="cmt",
                     description="multimodal emotion model: data, training, "
                                 "evaluation, serving, benchmarking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset",
                       description="Generate the synthetic multimodal "
                                   "dataset and write it to a directory.")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON config file (data section)")
    p.add_argument("--classes", type=int, dest="classes")
    p.add_argument("--train-per-class", type=int, dest="train_per_class")
    p.add_argument("--val-per-class", type=int, dest="val_per_class")
    p.add_argument("--test-per-class", type=int, dest="test_per_class")
    p.add_argument("--noise", type=float)
    p.add_argument("--coupling", choices=("independent", "xor"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset",
                       description="Train on a dataset directory; writes "
                                   "model.cmtc, training_log.csv, and "
                                   "run_config.json to --out.")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (model/train sections)")
    p.add_argument("--optimizer", choices=("sgd", "adamw"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true",
                   help="print one line per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split",
                       description="Print the metric report and a CSV row "
                                   "for a checkpoint on one dataset split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val",
                   choices=("train", "val", "test"))
    p.add_argument("--model-name", default="cmt", dest="model_name",
                   help="name for the CSV row")
    p.add_argument("--out", help="write the CSV to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="verify gradients against finite differences",
                       description="Finite-difference check per operation "
                                   "family plus the full model composition.")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=4,
                   help="coordinates probed per parameter tensor in the "
                        "composition check (default: 4; 0 sweeps all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the serving pipeline",
                       description="Start stage replicas and the gateway; "
                                   "prints LISTEN host:port, runs until "
                                   "interrupted.")
    p.add_argument("--config", required=True, help="serving topology JSON")
    p.add_argument("--mode", default="process",
                   choices=("process", "thread"),
                   help="replica isolation (default: process)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="benchmark a gateway",
                       description="Closed-loop latency benchmark; writes "
                                   "a per-request CSV breakdown.")
    p.add_argument("--target", help="gateway address host:port")
    p.add_argument("--config",
                   help="serving topology JSON to self-host for the run")
    p.add_argument("--mode", default="process",
                   choices=("process", "thread"))
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val",
                   choices=("train", "val", "test"))
    p.add_argument("--requests", type=int, default=50)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--sequential-baseline", action="store_true",
                   dest="sequential_baseline",
                   help="also run encoders one-by-one and report speedup")
    p.add_argument("--out", help="write the latency CSV to this path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("demo", help="classify one stored sample",
                       description="Run one dataset sample through the "
                                   "model; print the emotion distribution "
                                   "and the adaptation directive.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="val",
                   choices=("train", "val", "test"))
    p.add_argument("--index", type=int, default=0,
                   help="sample position within the split")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CmtError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return 130


__all__ = ["main", "build_parser", "RunConfig", "model_config_for_dataset",
           "EXIT_OK", "EXIT_USAGE", "EXIT_CONFIG", "EXIT_RUNTIME"]
