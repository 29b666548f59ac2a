"""Command-line entry points: gen-data, train, eval, analyze, sweep.

Exit status is 0 when every output was written, 2 for invalid input
(config, dataset, checkpoint), 1 for anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .analysis import export_features, smoothing_profile
from .attention import model_forward
from .config import ConfigError, RunConfig, load_config, load_sweep
from .episodes import CapacityError, FeatureFileError, save_features_csv
from .training import (
    CheckpointError,
    TrainState,
    draw_task,
    evaluate,
    frozen,
    load_checkpoint,
    save_checkpoint,
    train,
)

USAGE_ERRORS = (ConfigError, FeatureFileError, CheckpointError, CapacityError, FileNotFoundError)

ANALYSIS_STREAM = 3


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> str:
    out = getattr(args, "out", None) or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _load_trained(cfg: RunConfig, checkpoint: str, d: int) -> TrainState:
    return load_checkpoint(checkpoint, d, cfg.train, cfg.attention)


def _format_ci(ci: Optional[float]) -> str:
    return "NA" if ci is None else f"{ci:.4f}"


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    if cfg.dataset.source != "synthetic":
        raise ConfigError("gen-data needs dataset.source = 'synthetic'")
    ds = cfg.dataset.generate()
    out = _out_dir(args, cfg)
    path = os.path.join(out, "features.csv")
    save_features_csv(ds, path)
    print(f"wrote {path}: classes={ds.n_classes} samples={len(ds)} d={ds.d}")
    return 0


def run_training(cfg: RunConfig, out: str, resume: Optional[str] = None) -> dict:
    train_ds, eval_ds = cfg.dataset.load()
    state = _load_trained(cfg, resume, train_ds.d) if resume else None
    result = train(train_ds, cfg.train, cfg.attention, eval_ds=eval_ds, state=state)
    save_checkpoint(os.path.join(out, "checkpoint.json"), result.state, cfg.to_dict())
    metrics_path = os.path.join(out, "metrics.jsonl")
    if resume and os.path.exists(metrics_path):
        with open(metrics_path, "a") as fh:
            for rec in result.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    else:
        _write_jsonl(metrics_path, result.log)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.dumps())
    return result.log[-1] if result.log else {}


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    last = run_training(cfg, out, resume=args.checkpoint)
    if last:
        print(f"episode {last['episode']}: mean_loss={last['mean_loss']:.6f} "
              f"eval_accuracy={last['eval_accuracy']:.4f}")
    print(f"wrote {out}/checkpoint.json and {out}/metrics.jsonl")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    train_ds, eval_ds = cfg.dataset.load()
    state = _load_trained(cfg, args.checkpoint, train_ds.d)
    acc, ci = evaluate(state.params, eval_ds, cfg.train, cfg.attention)
    out = _out_dir(args, cfg)
    record = {"episodes": cfg.train.eval_episodes, "accuracy": acc, "ci95": ci}
    with open(os.path.join(out, "eval.json"), "w") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"accuracy {acc:.4f} +/- {_format_ci(ci)} over {cfg.train.eval_episodes} episodes")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    train_ds, eval_ds = cfg.dataset.load()
    state = _load_trained(cfg, args.checkpoint, train_ds.d)
    out = _out_dir(args, cfg)
    an = cfg.analysis
    rank = an.rank or cfg.train.n_way
    params = frozen(state.params)
    records, summary = [], []
    for t in range(an.tasks):
        task = draw_task(eval_ds, cfg.train, cfg.attention,
                         np.random.default_rng([cfg.seed, ANALYSIS_STREAM, t]))
        _, layers = model_forward(task, params, cfg.attention, return_layers=True)
        prof = smoothing_profile(layers, an.epsilon, rank)
        for rec in prof.records():
            records.append({"task": t, **rec})
        summary.append({"task": t, "smoothing_layer": prof.smoothing_layer, "theta": prof.theta})
        if (an.export_features or args.export_features) and t == 0:
            export_features(layers, task, os.path.join(out, "features"))
    _write_jsonl(os.path.join(out, "profile.jsonl"), records)
    _write_jsonl(os.path.join(out, "smoothing_summary.jsonl"), summary)
    print(f"wrote {len(records)} profile records for {an.tasks} tasks "
          f"(epsilon={an.epsilon}, rank={rank}; rank-M subspace is an interpretation of the feature-subspace family)")
    if args.beta_sweep:
        sweep = []
        for beta in an.betas:
            acfg = cfg.attention.__class__(**{**cfg.attention.to_dict(), "beta": beta})
            acc, ci = evaluate(state.params, eval_ds, cfg.train, acfg)
            sweep.append({"beta": beta, "accuracy": acc, "ci95": ci})
            print(f"beta={beta:.2f} accuracy {acc:.4f} +/- {_format_ci(ci)}")
        _write_jsonl(os.path.join(out, "beta_sweep.jsonl"), sweep)
    return 0


def cmd_sweep(args) -> int:
    _, variants = load_sweep(args.config)
    out = args.out or "runs/sweep"
    os.makedirs(out, exist_ok=True)
    rows = []
    for name, cfg in variants.items():
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        vdir = os.path.join(out, name)
        os.makedirs(vdir, exist_ok=True)
        run_training(cfg, vdir)
        train_ds, eval_ds = cfg.dataset.load()
        state = _load_trained(cfg, os.path.join(vdir, "checkpoint.json"), train_ds.d)
        acc, ci = evaluate(state.params, eval_ds, cfg.train, cfg.attention)
        rows.append({"variant": name, "query_dist": cfg.train.query_dist, "accuracy": acc, "ci95": ci})
        print(f"{name:<24} query_dist={cfg.train.query_dist:<8} accuracy {acc:.4f} +/- {_format_ci(ci)}")
    _write_jsonl(os.path.join(out, "sweep.jsonl"), rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attentive-gnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint: bool):
        p.add_argument("--config", required=True, help="run config (JSON)")
        p.add_argument("--out", help="output directory (default: output_dir from config)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")

    p = sub.add_parser("gen-data", help="write the synthetic feature dataset as CSV")
    common(p, False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="episodic training; writes checkpoint and metrics log")
    common(p, False)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy with 95%% CI on sampled test episodes")
    common(p, True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-layer smoothing profile and optional beta sweep")
    common(p, True)
    p.add_argument("--beta-sweep", action="store_true", help="evaluate accuracy for each analysis.betas value")
    p.add_argument("--export-features", action="store_true", help="dump per-layer node features as CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="train and evaluate every variant of a sweep file")
    p.add_argument("--config", required=True, help="sweep file {base, variants}")
    p.add_argument("--out", help="output directory (default: runs/sweep)")
    p.add_argument("--seed", type=int, help="overrides every variant's seed")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
