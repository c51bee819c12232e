"""Command-line entry point: gen, pretrain, grpo, eval, report.

Exit codes: 0 ok, 2 config or input error, 3 external judge failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_overrides, dump_config, load_config, parse_set
from .errors import ConfigError, FormatError, IxError, JudgeUnavailable
from .flowcore import EncodedDataset, VelocityNet, checkpoint_of, load_checkpoint, pretrain, save_checkpoint
from .grpo import train_grpo
from .judge import make_judge
from .metrics import EvalReport, alignment_report
from .rng import derive_seed
from .scenegen import generate_dataset, read_dataset, write_dataset

log = logging.getLogger("ixgrpo")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_JUDGE = 3
WORKERS_ENV = "IXGRPO_WORKERS"


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, parse_set(args.set))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _read_samples(path):
    if not Path(path).is_file():
        raise ConfigError(f"dataset not found: {path}")
    return read_dataset(path)


def _load_net(path) -> VelocityNet:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path).net()


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: RunConfig) -> int:
    count = args.count if args.count is not None else cfg.count
    if count < 1:
        raise ConfigError("count must be >= 1")
    scfg = cfg.scenegen if args.resolution is None else replace(cfg.scenegen, resolution=args.resolution)
    scfg.validate()
    seeds = [derive_seed(cfg.seed, "gen", i) for i in range(count)]
    samples = generate_dataset(seeds, scfg, workers=_workers())
    write_dataset(samples, args.out)
    log.info("wrote %d scenes to %s", count, args.out)
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    if args.steps is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, steps=args.steps))
    cfg.validate()
    samples = _read_samples(args.data)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.arch != cfg.arch:
            raise ConfigError("resume checkpoint architecture differs from the configured one")
    net = VelocityNet(cfg.arch, seed=cfg.seed)
    start = resume.step if resume is not None else 0
    net, losses = pretrain(
        net,
        EncodedDataset(samples),
        cfg.pretrain.to_config(),
        seed=cfg.seed,
        checkpoint_path=args.out,
        resume=resume,
        stop_after=args.stop_after,
    )
    curve = args.loss_csv or f"{args.out}.loss.csv"
    mode = "a" if resume is not None and Path(curve).exists() else "w"
    with open(curve, mode, newline="") as fh:
        wr = csv.writer(fh)
        if mode == "w":
            wr.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            wr.writerow([start + i, repr(float(loss))])
    log.info("pretrained %d steps -> %s", len(losses), args.out)
    return EXIT_OK


def cmd_grpo(args, cfg: RunConfig) -> int:
    g = cfg.grpo
    if args.reward is not None:
        g = replace(g, reward=args.reward)
    if args.beta is not None:
        g = replace(g, beta=args.beta)
    if args.interleave:
        g = replace(g, interleave_flow_matching=True)
    if args.epochs is not None:
        g = replace(g, epochs=args.epochs)
    if args.lr is not None:
        g = replace(g, lr=args.lr)
    jcfg = cfg.judge if args.judge is None else replace(cfg.judge, kind=args.judge)
    cfg = replace(cfg, grpo=g, judge=jcfg)
    cfg.validate()

    net = _load_net(args.checkpoint)
    samples = _read_samples(args.data)
    synthetic = None
    if g.interleave_flow_matching:
        if not args.synthetic:
            raise ConfigError("--interleave needs --synthetic <pretraining dataset>")
        synthetic = EncodedDataset(_read_samples(args.synthetic))

    # information barrier: ground truth goes to the judge and nowhere else
    images = [(i, s.rgb) for i, s in enumerate(samples)]
    judge = None
    if g.reward == "judge":
        judge = make_judge(jcfg, dict(enumerate(samples)))
    pixel_scale = cfg.scenegen.pixel_depth_scale

    log_path = args.log or f"{args.out}.metrics.ndjson"
    judge_skips = 0
    try:
        with open(log_path, "w") as fh:

            def on_record(rec):
                nonlocal judge_skips
                fh.write(rec.to_json() + "\n")
                judge_skips += rec.reason == "JudgeUnavailable"

            net, records = train_grpo(
                net, images, judge, g, seed=cfg.seed, judge_cfg=jcfg, synthetic=synthetic, on_record=on_record, pixel_scale=pixel_scale
            )
    finally:
        if judge is not None:
            judge.close()
    if records and judge_skips * 2 > len(records):
        raise JudgeUnavailable(f"judge failed on {judge_skips} of {len(records)} steps")
    meta = {"phase": "grpo", "seed": cfg.seed, "config": dump_config(cfg)}
    save_checkpoint(args.out, checkpoint_of(net, None, len(records), meta))
    done = [r for r in records if not r.skipped]
    log.info("grpo: %d steps, %d skipped -> %s", len(records), len(records) - len(done), args.out)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    pre = _load_net(args.pre)
    post = _load_net(args.post or args.pre)
    samples = dict(enumerate(_read_samples(args.data)))
    judge = make_judge(cfg.judge, samples)
    try:
        report = alignment_report(pre, post, samples, judge, cfg.eval, cfg.judge)
    finally:
        judge.close()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    report.write_csv(out / "rows.csv")
    print(format_report(report))
    return EXIT_OK


def format_report(report: EvalReport) -> str:
    lines = [f"{'quantity':<28}{'pre':>10}{'post':>10}{'delta':>10}"]
    for m, v in report.rewards.items():
        lines.append(f"{'reward/' + m:<28}{v['pre']:>10.4f}{v['post']:>10.4f}{v['post'] - v['pre']:>+10.4f}")
    for k in report.metrics["pre"]:
        a, b = report.metrics["pre"][k], report.metrics["post"][k]
        lines.append(f"{k:<28}{a:>10.4f}{b:>10.4f}{b - a:>+10.4f}")
    return "\n".join(lines)


def summarize_log(path) -> str:
    by_mod = defaultdict(list)
    kls = []
    skipped = 0
    n = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            n += 1
            if rec["skipped"]:
                skipped += 1
                continue
            by_mod[rec["modality"] or "dn"].append(rec["mean_reward"])
            kls.append(rec["kl"])
    lines = [f"{n} steps, {skipped} skipped"]
    for m, rs in sorted(by_mod.items()):
        k = max(1, len(rs) // 4)
        lines.append(f"{m:<12} n={len(rs):<5} first-quarter {np.mean(rs[:k]):.4f}  last-quarter {np.mean(rs[-k:]):.4f}")
    if kls:
        k = max(1, len(kls) // 4)
        lines.append(f"kl           last-quarter mean {np.mean(kls[-k:]):.4f}")
    return "\n".join(lines)


def cmd_report(args, cfg: RunConfig) -> int:
    for path in args.paths:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"no such file: {path}")
        print(f"== {path}")
        if p.suffix == ".json":
            try:
                report = EvalReport.from_json(p.read_text())
            except (ValueError, TypeError, KeyError) as e:
                raise ConfigError(f"not an eval report: {path}: {e}") from e
            print(format_report(report))
        else:
            try:
                print(summarize_log(p))
            except (ValueError, KeyError) as e:
                raise ConfigError(f"not a metrics log: {path}: {e}") from e
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (see config.example)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    common.add_argument("--log-level", help="debug, info, warning or error")

    p = argparse.ArgumentParser(prog="ixgrpo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic scenes")
    g.add_argument("--count", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", parents=[common], help="flow-matching pretraining")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many total steps")
    t.add_argument("--loss-csv")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("grpo", parents=[common], help="GRPO fine-tuning against a judge")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True, help="training images (ground truth only reaches the judge)")
    r.add_argument("--out", required=True)
    r.add_argument("--log", help="metrics NDJSON path")
    r.add_argument("--reward", choices=["judge", "dn"])
    r.add_argument("--beta", type=float)
    r.add_argument("--lr", type=float)
    r.add_argument("--epochs", type=int)
    r.add_argument("--interleave", action="store_true", help="alternate flow-matching batches")
    r.add_argument("--synthetic", help="dataset for interleaved flow matching")
    r.add_argument("--judge", choices=["oracle", "noisy", "external"])
    r.set_defaults(func=cmd_grpo)

    e = sub.add_parser("eval", parents=[common], help="pre/post alignment report")
    e.add_argument("--pre", required=True)
    e.add_argument("--post")
    e.add_argument("--data", required=True)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="summarize reports and metrics logs")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_cfg(args)
        level = (args.log_level or cfg.log_level).upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"unknown log level {level.lower()!r}")
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, cfg)
    except JudgeUnavailable as e:
        log.error("judge failure: %s", e)
        return EXIT_JUDGE
    except (ConfigError, FormatError, ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_INPUT
    except IxError as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
