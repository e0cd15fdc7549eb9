"""Command-line surface: generate toy samples, train correctors, apply
them, evaluate closure and run the quantile-mapping baseline.

Every command reads one JSON config, writes its outputs under a run
directory with a manifest, and is deterministic given the config's
seeds.  Exit codes: 0 success (all invariant audits passed), 1 runtime
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluation as ev
from . import models as md
from . import training as tr
from .config import ConfigError, RunConfig
from .dataset import DatasetError, fit_standardizer, generate_toy_pair, read_events, write_events

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _thread_cap() -> int:
    """RC_THREADS caps internal parallelism; the pipeline is sequential,
    so this is recorded for provenance and honored as an upper bound."""
    raw = os.environ.get("RC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"RC_THREADS must be an integer, got {raw!r}")


def _run_dir(args) -> str:
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out_dir, command, config: RunConfig, outputs, extra=None):
    doc = {
        "command": command,
        "seed": config.seed,
        "threads": _thread_cap(),
        "config": config.to_dict(),
        "outputs": sorted(outputs),
    }
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def _load_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    config = RunConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    return config


def _resolve(config, key, override=None, required=True):
    path = override or config.paths.get(key)
    if required and not path:
        raise ConfigError(f"no {key!r} path in the config and no override given")
    return path


def cmd_generate(args) -> int:
    config = _load_config(args)
    if config.toy_source is None or config.toy_target is None:
        raise ConfigError("generate requires toy_source and toy_target in the config")
    out_dir = _run_dir(args)
    source, target = generate_toy_pair(
        config.toy_source, config.toy_target, config.toy_n, config.schema
    )
    src_path = os.path.join(out_dir, "source.bin")
    tgt_path = os.path.join(out_dir, "target.bin")
    write_events(source, src_path)
    write_events(target, tgt_path)
    _write_manifest(out_dir, "generate", config, [src_path, tgt_path])
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    mode = args.mode or config.train.mode
    source = read_events(_resolve(config, "source"), schema=config.schema)
    target = read_events(_resolve(config, "target"), schema=config.schema)
    out_dir = _run_dir(args)

    import dataclasses

    train_cfg = dataclasses.replace(config.train, mode=mode, seed=config.seed)
    checkpoint = os.path.join(out_dir, "checkpoint.json")
    if mode == "global":
        model, std, log = tr.train_global(
            source, target, train_cfg,
            observable_specs=config.observables,
            checkpoint_path=checkpoint,
            resume=args.resume,
        )
    else:
        model, std, log, _ = tr.train_twostep(
            source, target, train_cfg,
            observable_specs=config.observables,
            objects=config.objects,
        )
    model_path = os.path.join(out_dir, "model.json")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    md.save_model(model, model_path, standardizer=std)
    log.write_jsonl(log_path)
    print(f"best epoch {log.best_epoch}, stop: {log.stop_reason}", file=sys.stderr)
    _write_manifest(out_dir, "train", config, [model_path, log_path], {"mode": mode})
    return EXIT_OK


def cmd_transform(args) -> int:
    config = _load_config(args)
    model, std = md.load_model(args.model or _resolve(config, "model"), schema=config.schema)
    if std is None:
        raise ConfigError("model file carries no standardizer; cannot transform raw events")
    events = read_events(args.events or _resolve(config, "source"), schema=config.schema)
    out_dir = _run_dir(args)

    z = std.transform(events.rows)
    z_prime = model.transform(z)
    rows = std.inverse(z_prime)
    transformed = events.with_rows(rows, provenance="transformed")

    # boundedness audit: max |delta| / alpha per feature in standardized space
    audit = {}
    violated = False
    for j, feat in enumerate(config.schema.features):
        ratio = float(np.max(np.abs(z_prime[:, j] - z[:, j])) / max(feat.alpha, 1e-8))
        audit[feat.name] = ratio
        if feat.mask and ratio > 1.0 + 1e-9:
            violated = True
    out_path = os.path.join(out_dir, "transformed.bin")
    write_events(transformed, out_path)
    _write_manifest(
        out_dir, "transform", config, [out_path], {"boundedness_audit": audit}
    )
    print(f"boundedness audit (max |delta|/alpha): {json.dumps(audit)}", file=sys.stderr)
    if violated:
        print("boundedness violated", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    target = read_events(_resolve(config, "target"), schema=config.schema)
    transformed = read_events(args.transformed or _resolve(config, "transformed"), schema=config.schema)
    source_path = args.source or config.paths.get("source")
    source = read_events(source_path, schema=config.schema) if source_path else None
    out_dir = _run_dir(args)

    report = ev.build_report(
        target, transformed, source=source,
        observable_specs=config.observables,
        classifier_spec=config.classifier if args.classifier else None,
        seed=config.seed,
        config_echo=config.to_dict(),
    )
    report_path = os.path.join(out_dir, "report.json")
    report.write_json(report_path)
    panels_dir = os.path.join(out_dir, "panels")
    report.write_csv_panels(panels_dir)
    _write_manifest(out_dir, "evaluate", config, [report_path, panels_dir])
    return EXIT_OK


def cmd_quantile_baseline(args) -> int:
    config = _load_config(args)
    source = read_events(_resolve(config, "source"), schema=config.schema)
    target = read_events(_resolve(config, "target"), schema=config.schema)
    out_dir = _run_dir(args)
    features = args.features.split(",") if args.features else None
    transformed = ev.quantile_baseline(
        source, target, features=features, exclude_sentinels=args.exclude_sentinels
    )
    out_path = os.path.join(out_dir, "baseline.bin")
    write_events(transformed, out_path)
    _write_manifest(out_dir, "quantile-baseline", config, [out_path])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rescorr",
        description="Residual corrections matching marginals and derived observables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="run directory (default ./run)")

    p = sub.add_parser("generate", help="produce the toy source/target samples")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a corrector")
    common(p)
    p.add_argument("--mode", choices=("global", "twostep"), default=None)
    p.add_argument("--resume", action="store_true", help="resume from the run checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", help="apply a trained model to events")
    common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--events", default=None)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("evaluate", help="closure report: target vs transformed")
    common(p)
    p.add_argument("--transformed", default=None)
    p.add_argument("--source", default=None, help="enables the transfer classifier test")
    p.add_argument("--classifier", action="store_true", help="run the two-sample classifier test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("quantile-baseline", help="per-feature quantile mapping baseline")
    common(p)
    p.add_argument("--features", default=None, help="comma-separated subset of feature names")
    p.add_argument("--exclude-sentinels", action="store_true")
    p.set_defaults(func=cmd_quantile_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tr.TrainingError, ev.EvaluationError, md.ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
