"""Command-line entry point: ``refground <subcommand> [flags]``.

Every ExperimentConfig field has a matching flag (``K_retrieval`` becomes
``--k-retrieval``). A JSON file given with ``--config`` sets the base values
and explicit flags override it. Commands that read a checkpoint start from the
config stored inside it, so architecture flags rarely need repeating.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 file-format error. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import CLASS_NAMES, domain_params, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, FileFormatError, PartitionViolation, RefgroundError
from .metrics import format_report, report_json
from .pipeline import build_reference_gallery, evaluate, predict
from .store import load_gallery, save_gallery
from .train import (
    audit_isolation,
    load_checkpoint,
    new_state,
    read_checkpoint_config,
    run_epochs,
    save_checkpoint,
)

log = logging.getLogger("refground")

PATH_KEYS = ("dataset", "gallery", "checkpoint", "report")
EXIT_RUNTIME, EXIT_CONFIG, EXIT_FORMAT = 1, 2, 3


def flag_name(field: str) -> str:
    return "--" + field.lower().replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("experiment config")
    group.add_argument("--config", help="JSON file with ExperimentConfig fields")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "paths":
            continue
        if f.type in ("bool", bool):
            group.add_argument(flag_name(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float, "str": str}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            group.add_argument(flag_name(f.name), dest=f.name, type=kind, default=None, metavar=f.name.upper())
    for key in PATH_KEYS:
        group.add_argument(f"--{key}", dest=f"path_{key}", default=None)


def resolve_config(args, checkpoint_base: bool = False) -> ExperimentConfig:
    """Base (checkpoint header, else --config, else defaults), then explicit flags."""
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    elif checkpoint_base and args.path_checkpoint and Path(args.path_checkpoint).exists():
        cfg = read_checkpoint_config(args.path_checkpoint)
    else:
        cfg = ExperimentConfig()
    changes = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(ExperimentConfig)
        if f.name != "paths" and getattr(args, f.name, None) is not None
    }
    cfg = dataclasses.replace(cfg, **changes)
    cfg.paths = {**cfg.paths, **{k: getattr(args, f"path_{k}") for k in PATH_KEYS if getattr(args, f"path_{k}")}}
    return cfg.validate()


def require(cfg: ExperimentConfig, key: str) -> Path:
    value = cfg.paths.get(key)
    if not value:
        raise ConfigError(f"--{key} is required for this command")
    return Path(value)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_reports(metrics: dict, report_dir: Path, name: str) -> None:
    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / f"{name}.txt").write_text(format_report(metrics))
    (report_dir / f"{name}.json").write_text(report_json(metrics) + "\n")


def _dataset(cfg):
    return load_dataset(require(cfg, "dataset"))


def _model(cfg):
    return load_checkpoint(require(cfg, "checkpoint"), cfg).params


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    n = cfg.n_train + cfg.n_test
    samples, records = generate_dataset(
        cfg.seed, n, cfg.manipulation_rate, domain_params(cfg.domain, cfg.image_size, cfg.channels),
        test_fraction=cfg.n_test / n, mixed=cfg.mixed, L=cfg.L,
    )
    meta = {"seed": cfg.seed, "domain": cfg.domain, "manipulation_rate": cfg.manipulation_rate, "mixed": cfg.mixed}
    out = save_dataset(require(cfg, "dataset"), samples, records, meta)
    print(json.dumps({"dataset": str(out), "samples": len(samples), "references": len(records)}))
    return 0


def cmd_gallery(args) -> int:
    cfg = resolve_config(args, checkpoint_base=True)
    records = _dataset(cfg).records("gallery")
    gallery = build_reference_gallery(_model(cfg), cfg, records)
    path = require(cfg, "gallery")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_gallery(gallery, path)
    print(json.dumps({"gallery": str(path), "records": gallery.count, "dim": gallery.dim}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, checkpoint_base=args.resume)
    ds = _dataset(cfg)
    problems = audit_isolation(ds)
    print(json.dumps({"audit_violations": len(problems), "train_samples": len(ds.train)}))
    if problems:
        raise PartitionViolation(f"{len(problems)} training samples are paired with gallery records")
    if args.audit_only:
        return 0
    ckpt = require(cfg, "checkpoint")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(ckpt, cfg) if args.resume and ckpt.exists() else new_state(cfg)

    def on_epoch(st, summary):
        print(json.dumps({k: round(v, 6) for k, v in summary.items()}), flush=True)
        save_checkpoint(ckpt, st, cfg)

    state = run_epochs(state, cfg, ds, on_epoch=on_epoch)
    save_checkpoint(ckpt, state, cfg)
    if state.history:
        from .plotting import plot_loss_curve

        report = require(cfg, "report")
        report.mkdir(parents=True, exist_ok=True)
        (report / "loss_history.json").write_text(json.dumps(state.history, indent=1) + "\n")
        plot_loss_curve(state.history, report / "loss_curve.png")
    return 0


def _load_gallery(cfg, path=None):
    return load_gallery(path or require(cfg, "gallery"), cfg.index_kind, cfg.num_partitions, cfg.seed)


def cmd_eval(args) -> int:
    from .plotting import plot_roc

    cfg = resolve_config(args, checkpoint_base=True)
    ds = _dataset(cfg)
    result = evaluate(_model(cfg), cfg, ds.test, _load_gallery(cfg))
    report = require(cfg, "report")
    write_reports(result.metrics, report, args.name)
    if "AUC" in result.metrics:
        labels = [s.binary_label for s in ds.test]
        plot_roc([p.score for p in result.predictions], labels, report / f"{args.name}_roc.png", result.metrics["AUC"])
    sys.stdout.write(format_report(result.metrics))
    return 0


def cmd_verify(args) -> int:
    cfg = resolve_config(args, checkpoint_base=True)
    ds = _dataset(cfg)
    pool = {s.id: s for s in ds.test + ds.train}
    if args.sample_id not in pool:
        raise ConfigError(f"sample {args.sample_id} is not in the dataset")
    sample = pool[args.sample_id]
    (p,) = predict(_model(cfg), cfg, [sample], _load_gallery(cfg))
    out = {
        "sample_id": p.sample_id,
        "verdict": "manipulated" if p.verdict else "authentic",
        "score": round(p.score, 6),
        "class_probs": {name: round(float(v), 6) for name, v in zip(CLASS_NAMES, p.class_probs)},
        "box": [round(float(v), 6) for v in p.box],
        "flagged_tokens": [int(i) for i in np.nonzero(p.token_mask)[0]],
        "retrieved": [[int(i), round(float(s), 6)] for i, s in p.retrieved],
        "anchor_id": int(p.anchor_id),
    }
    print(json.dumps(out))
    return 0


def cmd_adapt(args) -> int:
    """Evaluate one checkpoint against the current gallery and a replacement gallery."""
    from .plotting import plot_adapt_bars

    cfg = resolve_config(args, checkpoint_base=True)
    ckpt = require(cfg, "checkpoint")
    digest_before = file_digest(ckpt)
    params = _model(cfg)
    ds = _dataset(cfg)
    before = evaluate(params, cfg, ds.test, _load_gallery(cfg)).metrics
    after = evaluate(params, cfg, ds.test, _load_gallery(cfg, args.new_gallery)).metrics
    digest_after = file_digest(ckpt)
    if digest_after != digest_before:
        raise RefgroundError("checkpoint changed during adaptation")
    report = require(cfg, "report")
    write_reports(before, report, f"{args.name}_before")
    write_reports(after, report, f"{args.name}_after")
    summary = {"checkpoint_sha256": digest_before, "checkpoint_unchanged": True, "before": before, "after": after}
    (report / f"{args.name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plot_adapt_bars(before, after, report / f"{args.name}_bars.png")
    rows = [f"{k}\t{before[k]:.6f}\t{after[k]:.6f}" for k in before if isinstance(before[k], float) and k in after]
    sys.stdout.write("metric\tbefore\tafter\n" + "\n".join(rows) + "\ncheckpoint unchanged\t" + digest_before + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refground", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gallery", help="embed a dataset's gallery partition and save the index")
    p.set_defaults(func=cmd_gallery)

    p = sub.add_parser("train", help="train and checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--audit-only", action="store_true", help="run the isolation audit and stop")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate the test split and write reports")
    p.add_argument("--name", default="eval", help="report file stem")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="verdict for one query")
    p.add_argument("--sample-id", type=int, required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("adapt", help="swap in another gallery without touching the checkpoint")
    p.add_argument("--new-gallery", required=True, help="replacement gallery file")
    p.add_argument("--name", default="adapt", help="report file stem")
    p.set_defaults(func=cmd_adapt)

    for action in sub.choices.values():
        add_config_flags(action)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (FileFormatError, FileNotFoundError, IsADirectoryError)):
        return EXIT_FORMAT
    return EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (RefgroundError, ValueError, OSError, ArithmeticError) as exc:
        code = exit_code_for(exc)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
