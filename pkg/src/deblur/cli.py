"""Command-line entry point.

Subcommands: train, infer, eval, mine, arch. Every run echoes its effective
config so it can be reproduced. Exit codes: 0 ok, 1 config error, 2 data
error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from . import dataio, metrics, trainer
from .config import ConfigError, resolve
from .model import NAMED_CONFIGS, CheckpointError, load, param_count, restore
from .tensor import NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _load_settings(args):
    text = ""
    source = "<defaults>"
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text()
        source = str(path)
    return resolve(text, args.override or (), source)


def _echo_config(settings, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_effective.cfg").write_text(settings.echo())


def cmd_train(args):
    settings = _load_settings(args)
    data_cfg = settings.data
    if not data_cfg["root"]:
        raise ConfigError("data.root must point at the training pairs")
    root = Path(data_cfg["root"])
    if not root.exists():
        raise dataio.DatasetError(f"dataset root {root} does not exist")
    dataset = dataio.scan_pairs(root, data_cfg["layout"])
    val_dataset = None
    if data_cfg["val_root"]:
        val_dataset = dataio.scan_pairs(Path(data_cfg["val_root"]), data_cfg["val_layout"])

    out_dir = Path(args.out)
    _echo_config(settings, out_dir)
    options = trainer.TrainOptions(
        val_interval=settings.train["val_interval"],
        checkpoint_interval=settings.train["checkpoint_interval"],
        grad_clip=settings.train["grad_clip"],
        stop_at_psnr=settings.train["stop_at_psnr"],
        augment_cfg=settings.augment,
        augment_enabled=settings.train["augment"],
        out_dir=out_dir,
        val_dataset=val_dataset,
    )
    result = trainer.train(
        settings.model, settings.loss, settings.schedule, dataset,
        seed=args.seed, options=options,
    )
    print(f"trained {result.stopped_at} iterations; "
          f"best PSNR {result.best_psnr:.3f} dB; "
          f"checkpoint: {result.last_checkpoint}")
    return EXIT_OK


def cmd_infer(args):
    params = load(args.checkpoint)
    in_dir, out_dir = Path(args.input_dir), Path(args.output_dir)
    if not in_dir.is_dir():
        raise dataio.DatasetError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in in_dir.iterdir() if p.is_file())
    if not files:
        raise dataio.DatasetError(f"no input images in {in_dir}")
    for path in files:
        img = dataio.load_image(path)
        out = restore(params, img.data)
        dataio.save_image(out, out_dir / path.name)
    print(f"restored {len(files)} images -> {out_dir}")
    return EXIT_OK


def _matched_pairs(restored_dir, gt_dir):
    restored = {p.name: p for p in Path(restored_dir).iterdir() if p.is_file()}
    gt = {p.name: p for p in Path(gt_dir).iterdir() if p.is_file()}
    if restored.keys() != gt.keys():
        odd = sorted(restored.keys() ^ gt.keys())
        raise dataio.DatasetError(f"unmatched files between directories: {odd}")
    if not restored:
        raise dataio.DatasetError("no files to evaluate")
    return [(name, restored[name], gt[name]) for name in sorted(restored)]


def cmd_eval(args):
    pairs = _matched_pairs(args.restored_dir, args.gt_dir)
    records = []
    for name, rpath, gpath in pairs:
        r = dataio.load_image(rpath).data
        g = dataio.load_image(gpath).data
        try:
            records.append(metrics.evaluate_pair(name, r, g))
        except ValueError as exc:
            raise dataio.DatasetError(f"cannot evaluate {name!r}: {exc}") from exc
    report = metrics.mine_hard(records, args.lo, args.hi)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv())
    summary = report.summary_table()
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def cmd_mine(args):
    path = Path(args.report)
    if not path.is_file():
        raise dataio.DatasetError(f"report file {path} not found")
    ids, psnrs = [], []
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("id,psnr"):
        raise dataio.DatasetError(f"{path}: not an eval report (missing header)")
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise dataio.DatasetError(f"{path}:{lineno}: malformed row {line!r}")
        ids.append(parts[0])
        try:
            psnrs.append(math.inf if parts[1] == "inf" else float(parts[1]))
        except ValueError as exc:
            raise dataio.DatasetError(
                f"{path}:{lineno}: bad psnr value {parts[1]!r}") from exc

    if args.lo >= args.hi:
        raise ConfigError(f"--lo ({args.lo}) must be < --hi ({args.hi})")
    positives = [i for i, p in zip(ids, psnrs) if p > args.hi]
    negatives = [i for i, p in zip(ids, psnrs) if p < args.lo]
    print(f"hard_positives {len(positives)}")
    print(f"hard_negatives {len(negatives)}")
    print(f"total {len(ids)}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "hard_positives.txt").write_text("".join(f"{i}\n" for i in positives))
        (out_dir / "hard_negatives.txt").write_text("".join(f"{i}\n" for i in negatives))
        (out_dir / "counts.txt").write_text(
            f"hard_positives {len(positives)}\n"
            f"hard_negatives {len(negatives)}\n"
            f"total {len(ids)}\n"
        )
    return EXIT_OK


def _config_by_name_or_path(spec):
    if spec in NAMED_CONFIGS:
        return NAMED_CONFIGS[spec], spec
    path = Path(spec)
    if path.is_file():
        settings = resolve(path.read_text(), (), str(path))
        return settings.model, path.stem
    raise ConfigError(f"{spec!r} is neither a named config {sorted(NAMED_CONFIGS)} nor a file")


def _pct(new, old):
    return 100.0 * (new - old) / old


def cmd_arch(args):
    cfg_a, name_a = _config_by_name_or_path(args.config_a)
    cfg_b, name_b = _config_by_name_or_path(args.config_b)
    rep_a, rep_b = param_count(cfg_a), param_count(cfg_b)

    print(f"{'stage':<10}{'ch A':>6}{'ch B':>6}{'blk A':>7}{'blk B':>7}"
          f"{'heads A':>9}{'heads B':>9}{'params A':>12}{'params B':>12}")
    for sa, sb in zip(rep_a.stages, rep_b.stages):
        print(f"{sa.name:<10}{sa.channels:>6}{sb.channels:>6}{sa.blocks:>7}{sb.blocks:>7}"
              f"{sa.heads:>9}{sb.heads:>9}{sa.params:>12}{sb.params:>12}")
    print()
    print(f"total params   {name_a}: {rep_a.total_params:>12}  "
          f"{name_b}: {rep_b.total_params:>12}  "
          f"delta: {_pct(rep_b.total_params, rep_a.total_params):+.2f}%")
    print(f"total blocks   {name_a}: {rep_a.total_blocks:>12}  "
          f"{name_b}: {rep_b.total_blocks:>12}  "
          f"delta: {_pct(rep_b.total_blocks, rep_a.total_blocks):+.2f}%")
    print(f"fp32 size      {name_a}: {rep_a.fp32_bytes / 2**20:>9.2f} MB  "
          f"{name_b}: {rep_b.fp32_bytes / 2**20:>9.2f} MB  "
          f"ratio: {rep_b.fp32_bytes / rep_a.fp32_bytes:.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deblur",
        description="Motion deblurring: training, inference, evaluation, "
                    "hard-example mining and architecture accounting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the optimization loop")
    p_train.add_argument("--config", help="config file path")
    p_train.add_argument("--override", action="append", metavar="SEC.KEY=VAL",
                         help="config override, repeatable")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="restore a directory of images")
    p_infer.add_argument("checkpoint")
    p_infer.add_argument("input_dir")
    p_infer.add_argument("output_dir")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="full-reference metrics for restored vs ground truth")
    p_eval.add_argument("restored_dir")
    p_eval.add_argument("gt_dir")
    p_eval.add_argument("--out", required=True, help="report directory")
    p_eval.add_argument("--lo", type=float, default=metrics.HARD_NEGATIVE_DB)
    p_eval.add_argument("--hi", type=float, default=metrics.HARD_POSITIVE_DB)
    p_eval.set_defaults(func=cmd_eval)

    p_mine = sub.add_parser("mine", help="hard examples from an eval report")
    p_mine.add_argument("report", help="report.csv from eval")
    p_mine.add_argument("--lo", type=float, default=metrics.HARD_NEGATIVE_DB)
    p_mine.add_argument("--hi", type=float, default=metrics.HARD_POSITIVE_DB)
    p_mine.add_argument("--out", help="directory for id lists")
    p_mine.set_defaults(func=cmd_mine)

    p_arch = sub.add_parser("arch", help="compare two architectures")
    p_arch.add_argument("config_a", help="named config (baseline/improved/toy) or file")
    p_arch.add_argument("config_b")
    p_arch.set_defaults(func=cmd_arch)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.ImageFormatError, dataio.DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.NumericAbort, NonFiniteError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
