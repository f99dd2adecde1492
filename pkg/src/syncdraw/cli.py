"""Command-line entry point: ``syncdraw <command> [flags]``.

Every command prints line-delimited JSON records and exits non-zero on error.
A ``--config`` file of ``key=value`` lines supplies defaults; explicit flags
override it. ``SDRW_SEED`` is the fallback seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import captions as cap
from . import data
from .evaluation import UndefinedMotionError, eval_nll, oracle_agreement
from .exports import EXPORT_FORMATS, export_canvas_sheet, export_gif, export_png_grid
from .rvae import CUBOID, SYNC, Conditioning, ConfigError, ModelConfig
from .training import (CheckpointError, TrainConfig, Trainer, TrainingError, grad_check,
                       load_checkpoint, MICRO_CONFIG)
from .rvae import SyncDraw


class UsageError(ValueError):
    pass


def emit(record: dict):
    print(json.dumps(record), flush=True)


def default_seed() -> int:
    raw = os.environ.get("SDRW_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SDRW_SEED must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    glyphs = None
    if args.mnist_images or args.mnist_labels:
        if not (args.mnist_images and args.mnist_labels):
            raise UsageError("--mnist-images and --mnist-labels go together")
        glyphs = data.load_mnist_idx(args.mnist_images, args.mnist_labels)
    spec = data.DatasetSpec(count=args.count, digits=args.digits, seed=args.seed,
                            N=args.frames, A=args.size, B=args.size)
    ds = data.synthesize_dataset(spec, glyphs)
    out = Path(args.out)
    summary = {"command": "synth", "count": len(ds), "shape": list(ds.videos.shape[1:])}
    if args.split == "motion-disjoint":
        train, test = data.split_motion_disjoint(ds, args.seed)
        data.save_dataset(out.with_name(out.name + ".train.sdv"), train)
        data.save_dataset(out.with_name(out.name + ".test.sdv"), test)
        summary.update(train=len(train), test=len(test),
                       paths=[str(out.with_name(out.name + s)) for s in (".train.sdv", ".test.sdv")])
    else:
        data.save_dataset(out, ds)
        summary["paths"] = [str(out)]
    emit(summary)


def _load_data(path):
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return data.load_dataset(path)


def cmd_train(args):
    ds = _load_data(args.data)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       clip_threshold=args.clip, clip_mode=args.clip_mode)
    if args.resume:
        trainer = Trainer.load(args.resume, tcfg)
        mcfg = trainer.model.cfg
    else:
        mcfg = ModelConfig(A=ds.videos.shape[2], B=ds.videos.shape[3], N=ds.videos.shape[1],
                           K=args.grid, T=args.steps, z_dim=args.z_dim, enc_hidden=args.hidden,
                           dec_hidden=args.hidden, conditional=args.conditional,
                           caption_encoder=args.caption_encoder, s_dim=args.s_dim,
                           variant=args.variant, K_t=args.temporal_grid)
        trainer = Trainer.fresh(mcfg, tcfg)
    if mcfg.conditional and not ds.captions:
        raise UsageError("--conditional needs a dataset with a captions sidecar")
    if ds.videos.shape[1:] != (mcfg.N, mcfg.A, mcfg.B):
        raise UsageError(f"dataset shape {ds.videos.shape[1:]} does not match checkpoint config")
    log_fh = open(args.log, "a", encoding="utf-8") if args.log else None

    def log(rep):
        rec = rep.record()
        emit(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    try:
        remaining = args.epochs - trainer.epoch if args.resume else args.epochs
        trainer.run(ds, max(remaining, 0), log)
    finally:
        if log_fh:
            log_fh.close()
    trainer.save(args.out)
    emit({"command": "train", "checkpoint": str(args.out), "epoch": trainer.epoch})


def _model_from(path) -> SyncDraw:
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    return SyncDraw(ck.model_config, ck.weights)


def cmd_generate(args):
    model = _model_from(args.checkpoint)
    cfg = model.cfg
    if args.variant and args.variant != cfg.variant:
        raise UsageError(f"checkpoint is a {cfg.variant} model, not {args.variant}")
    if args.caption and not cfg.conditional:
        raise UsageError("unconditional model cannot take --caption")
    if cfg.conditional and not args.caption:
        raise UsageError("conditional model needs --caption")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cond = None
    texts = []
    if args.caption:
        cap.parse_caption(args.caption)
        texts = [args.caption] * args.count
        cond = Conditioning.from_texts(cfg, texts)
    rng = np.random.default_rng(args.seed)
    eps = rng.standard_normal((cfg.T, args.count, cfg.z_dim))
    probs, history = model.generate(eps, cond, return_canvases=True)
    out = Path(args.out)
    data.save_dataset(out, data.Dataset(probs, texts))
    written = [str(out)]
    if args.gif:
        for i in range(args.count):
            p = Path(args.gif).with_name(f"{Path(args.gif).stem}_{i}.gif")
            export_gif(probs[i], p, args.delay)
            written.append(str(p))
    if args.png_grid:
        export_png_grid(probs, args.png_grid)
        written.append(args.png_grid)
    if args.canvas_sheet:
        export_canvas_sheet(history[1:], args.canvas_sheet, sample=0)
        written.append(args.canvas_sheet)
    emit({"command": "generate", "count": args.count, "files": written})


def cmd_eval_nll(args):
    model = _model_from(args.checkpoint)
    ds = _load_data(args.data)
    cfg = model.cfg
    if ds.videos.shape[1:] != (cfg.N, cfg.A, cfg.B):
        raise UsageError(f"dataset shape {ds.videos.shape[1:]} does not match model {(cfg.N, cfg.A, cfg.B)}")
    if cfg.conditional and not ds.captions:
        raise UsageError("conditional model needs a captioned dataset")
    report = eval_nll(model, ds)
    if args.out:
        report.write(args.out)
    if args.per_video:
        for rec in report.records():
            emit(rec)
    emit({"command": "eval-nll", **report.summary()})


def cmd_oracle(args):
    ds = _load_data(args.data)
    if not ds.captions:
        raise UsageError("oracle needs a captioned dataset")
    result = oracle_agreement(ds.videos, ds.captions)
    emit({"command": "oracle", "count": len(result.predicted), "agreement": result.agreement})


def cmd_export(args):
    if args.format not in EXPORT_FORMATS:
        raise UsageError(f"unknown export format {args.format!r}")
    if args.format == "canvas-sheet":
        raise UsageError("canvas sheets are written by 'generate --canvas-sheet'")
    ds = _load_data(args.data)
    if args.format == "gif":
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} out of range for {len(ds)} videos")
        export_gif(ds.videos[args.index], args.out, args.delay)
    else:
        export_png_grid(ds.videos[:args.limit], args.out)
    emit({"command": "export", "format": args.format, "path": str(args.out)})


def cmd_grad_check(args):
    cfg = ModelConfig(**MICRO_CONFIG, variant=args.variant, conditional=args.conditional,
                      caption_encoder=args.caption_encoder, s_dim=args.s_dim or 6)
    report = grad_check(cfg, tolerance=args.tolerance, seed=args.seed)
    for name, err in report.errors.items():
        emit({"group": name, "rel_err": err, "ok": err <= args.tolerance})
    emit({"command": "grad-check", "passed": report.passed, "failures": report.failures})
    if not report.passed:
        raise TrainingError(f"gradient check failed for {', '.join(report.failures)}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="syncdraw", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="file of key=value defaults")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a Bouncing-MNIST dataset")
    s.add_argument("--count", type=int, default=12000)
    s.add_argument("--digits", type=int, choices=(1, 2), default=1)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--split", choices=("none", "motion-disjoint"), default="none")
    s.add_argument("--mnist-images")
    s.add_argument("--mnist-labels")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=(SYNC, CUBOID), default=SYNC)
    t.add_argument("--conditional", action="store_true")
    t.add_argument("--caption-encoder", choices=("onehot", "recurrent"), default="onehot")
    t.add_argument("--s-dim", type=int, default=0)
    t.add_argument("--grid", type=int, default=5)
    t.add_argument("--temporal-grid", type=int, default=0)
    t.add_argument("--steps", type=int, default=10)
    t.add_argument("--z-dim", type=int, default=100)
    t.add_argument("--hidden", type=int, default=256)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--clip", type=float, default=10.0)
    t.add_argument("--clip-mode", choices=("global", "element"), default="global")
    t.add_argument("--resume")
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample videos from a trained model")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--caption")
    g.add_argument("--variant", choices=(SYNC, CUBOID))
    g.add_argument("--out", required=True)
    g.add_argument("--gif")
    g.add_argument("--png-grid")
    g.add_argument("--canvas-sheet")
    g.add_argument("--delay", type=int, default=100)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval-nll", help="variational-bound NLL of a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--per-video", action="store_true")
    e.set_defaults(func=cmd_eval_nll)

    o = sub.add_parser("oracle", help="motion-oracle agreement with captions")
    o.add_argument("--data", required=True)
    o.set_defaults(func=cmd_oracle)

    x = sub.add_parser("export", help="export stored videos as images")
    x.add_argument("--data", required=True)
    x.add_argument("--format", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--limit", type=int, default=16)
    x.add_argument("--delay", type=int, default=100)
    x.set_defaults(func=cmd_export)

    c = sub.add_parser("grad-check", help="finite-difference check on the micro config")
    c.add_argument("--variant", choices=(SYNC, CUBOID), default=SYNC)
    c.add_argument("--conditional", action="store_true")
    c.add_argument("--caption-encoder", choices=("onehot", "recurrent"), default="onehot")
    c.add_argument("--s-dim", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    for sp in sub.choices.values():
        if "--seed" not in sp._option_string_actions:
            sp.add_argument("--seed", type=int, default=None)
    return p


def read_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _install_config(parser, argv):
    """Install config-file values as defaults of the chosen subcommand; returns remaining argv."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return rest
    values = read_config_file(known.config)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in subs), None)
    if command is None:
        return rest
    sub = subs[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {command}")
        if action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(raw) if action.type else raw
        action.required = False
    sub.set_defaults(**defaults)
    return rest


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_install_config(parser, argv))
        if args.seed is None:
            args.seed = default_seed()
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, ConfigError, TrainingError, CheckpointError, data.DataFormatError,
            data.SplitError, cap.CaptionParseError, UndefinedMotionError, ValueError, OSError) as exc:
        emit({"error": type(exc).__name__, "message": str(exc)})
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
