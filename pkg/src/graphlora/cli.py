"""Command-line entry point. Exit codes: 0 ok, 1 verification failure, 2 usage or format error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .graphio import FormatError, ProtocolError, SynthSpec, gen_synth, load_graph, save_graph
from .mpnn import TrainingError
from .numerics import ContractError, InvalidInputError
from .theory import TheoryConfig, reports_to_json, verify_expressivity

log = logging.getLogger("graphlora")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
COMMANDS = ("pretrain", "finetune", "eval", "ablate", "theory", "gradcheck", "export-embeddings",
            "gen-synth")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphlora")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, JSON values)")
        p.add_argument("--source")
        p.add_argument("--target")
        p.add_argument("--checkpoint")
        p.add_argument("--model")
        p.add_argument("--output-dir")
        p.add_argument("--split-name")
        p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")])
        p.add_argument("--quiet", action="store_true")
    return parser


def load_config(args) -> pl.RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    raw = pl.apply_overrides(raw, args.set)
    for key in ("source", "target", "checkpoint", "model", "output_dir", "split_name", "seeds"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    try:
        return pl.RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def _out(cfg: pl.RunConfig) -> Path:
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, default=_json_default))
    tmp.replace(path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _checkpoint_path(cfg: pl.RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else cfg.resolved_output_dir() / "checkpoint"


def _model_path(cfg: pl.RunConfig) -> Path:
    return Path(cfg.model) if cfg.model else cfg.resolved_output_dir() / "model"


def _source(cfg):
    return pl.load_or_generate(cfg.source, cfg.synth_source)


def _target(cfg):
    return pl.load_or_generate(cfg.target, cfg.synth_target)


def cmd_gen_synth(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    out = _out(cfg)
    written = {}
    for role, spec in (("source", cfg.synth_source), ("target", cfg.synth_target)):
        if spec is None:
            continue
        g = gen_synth(SynthSpec(**spec))
        save_graph(g, out / role)
        written[role] = {"path": str(out / role), "nodes": g.n, "edges": g.num_edges}
    if not written:
        raise UsageError("gen-synth needs synth_source and/or synth_target in the config")
    return EXIT_OK, written


def cmd_pretrain(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    cfg.check_paths("source")
    pre = pl.pretrain(_source(cfg), cfg)
    path = pl.save_pretrained(pre, _checkpoint_path(cfg))
    return EXIT_OK, {"checkpoint": str(path), **pre.manifest}


def cmd_finetune(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    cfg.check_paths("target", "checkpoint")
    pre = pl.load_pretrained(_checkpoint_path(cfg))
    target = _target(cfg)
    out = _out(cfg)
    variant = cfg.variant
    ctx = pl.TargetContext.build(target, cfg.diffusion_config)
    steps_path = out / "steps.jsonl"
    runs = []
    with steps_path.open("w") as steps:
        for seed in cfg.seeds:
            def on_step(rec, seed=seed):
                line = json.dumps({"seed": seed, **rec})
                steps.write(line + "\n")
                if cfg.log_steps:
                    print(line, file=sys.stderr)
            runs.append(pl.finetune(pre, target, pl.splits_for(target, cfg, seed), cfg, seed, variant,
                                    ctx, on_step=on_step))
    report = pl.MetricsReport.from_runs(runs, cfg.seeds, notes={
        "source_feature_rows": int(pre.source_features.shape[0]), "variant": asdict(variant)})
    freeze_ok = all(r.frozen_digest_before == r.frozen_digest_after
                    and np.array_equal(r.probe_before, r.probe_after) for r in runs)
    pl.save_model(runs[0].model, _model_path(cfg), {"seed": cfg.seeds[0]})
    body = {**report.as_dict(), "freeze_audit": {"passed": freeze_ok,
                                                 "digest": runs[0].frozen_digest_after}}
    _write_json(out / "finetune_report.json", body)
    return (EXIT_OK if freeze_ok else EXIT_FAIL), body


def cmd_eval(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    cfg.check_paths("target", "model")
    model = pl.load_model(_model_path(cfg))
    target = _target(cfg)
    splits = pl.splits_for(target, cfg, cfg.seeds[0])
    try:
        idx = getattr(splits, cfg.split_name)
    except AttributeError as exc:
        raise UsageError(f"unknown split {cfg.split_name!r}") from exc
    preds, _ = pl.predict(model, pl.TargetContext(target, pl.sym_norm_adj(target, sparse=True), None))
    acc = pl.accuracy(preds, target.labels, idx)
    body = {"split": cfg.split_name, "accuracy": acc, "count": int(np.asarray(idx).size),
            "trainable_fraction": pl.trainable_parameter_fraction(model)}
    return EXIT_OK, body


def cmd_ablate(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    cfg.check_paths("target", "checkpoint")
    pre = pl.load_pretrained(_checkpoint_path(cfg))
    body = pl.ablate(pre, _target(cfg), cfg)
    _write_json(_out(cfg) / "ablation_report.json", body)
    ok = all(v["passed"] for v in body["isolation"].values())
    return (EXIT_OK if ok else EXIT_FAIL), body


def cmd_theory(cfg: pl.RunConfig, bound_hook=None, **_) -> tuple[int, dict]:
    reports = verify_expressivity(TheoryConfig.from_dict(cfg.theory), bound_hook=bound_hook)
    body = {"reports": json.loads(reports_to_json(reports)),
            "failed": sum(not r.passed for r in reports),
            "skipped": sum(r.skipped is not None for r in reports)}
    _write_json(_out(cfg) / "theory_report.json", body)
    return (EXIT_OK if body["failed"] == 0 else EXIT_FAIL), body


def cmd_gradcheck(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    body = pl.gradcheck_suite(cfg.seeds, tol=cfg.gradcheck_tol)
    _write_json(_out(cfg) / "gradcheck_report.json", body)
    return (EXIT_OK if body["passed"] else EXIT_FAIL), body


def cmd_export_embeddings(cfg: pl.RunConfig, **_) -> tuple[int, dict]:
    cfg.check_paths("target", "model")
    model = pl.load_model(_model_path(cfg))
    target = _target(cfg)
    root = pl.export_embeddings(model, target, _out(cfg) / "embeddings")
    return EXIT_OK, {"path": str(root), "rows": target.n}


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "theory": cmd_theory,
    "gradcheck": cmd_gradcheck,
    "export-embeddings": cmd_export_embeddings,
    "gen-synth": cmd_gen_synth,
}


def main(argv=None, *, bound_hook=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        if not args.quiet:
            print(json.dumps({"effective_config": cfg.to_dict()}, default=_json_default), file=sys.stderr)
        code, body = HANDLERS[args.command](cfg, bound_hook=bound_hook)
    except (UsageError, FormatError, ProtocolError, InvalidInputError, FileNotFoundError,
            ContractError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(body, default=_json_default, indent=2))
    return code


if __name__ == "__main__":
    sys.exit(main())
