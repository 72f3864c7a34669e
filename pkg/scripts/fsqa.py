"""
Command-Line Interface

Subcommands:
    generate   Write a phantom dataset (images, annotations, manifest)
    train      Train the multi-task network on a generated dataset
    eval       Evaluate a checkpoint on a dataset split
    assess     Assess a single image and write the report and overlay
    selfcheck  Run the gradient, normalization and metric-oracle checks

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numerical failure.

Example:
    $ fsqa generate --sections head --count 100 --seed 7 --out data/phantoms
    $ fsqa train --data data/phantoms --out runs/exp1
    $ fsqa eval --checkpoint runs/exp1/checkpoint.joblib --data data/phantoms --out runs/exp1/eval
    $ fsqa assess --checkpoint runs/exp1/checkpoint.joblib --image img.png --section head --out runs/assess
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from loguru import logger

from data.dataset import PhantomDataset, write_json
from data.image_io import read_image, write_image
from data.phantom import generate_dataset
from models.assessment import QualityAssessor, annotate
from models.checkpoint import load_checkpoint
from models.config import SECTIONS, RunConfig, load_config, setup_logging
from models.errors import EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, exit_code_for
from models.evaluation import Evaluator, write_evaluation
from models.metrics import is_defined
from models.network import QualityNet
from models.selfcheck import run_selfcheck
from models.trainer import train


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser exiting with the usage code (1) instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sections(value: str) -> List[str]:
    sections = [s.strip() for s in value.split(",") if s.strip()]
    unknown = [s for s in sections if s not in SECTIONS]
    if unknown or not sections:
        raise argparse.ArgumentTypeError(f"unknown section(s) {unknown}; choose from {', '.join(SECTIONS)}")
    return sections


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML or JSON config file")
    common.add_argument("--seed", type=int, default=None, help="Run seed (overrides random_seed)")

    parser = UsageErrorParser(prog="fsqa", description="Fetal sonographic plane quality assessment")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageErrorParser)

    p = sub.add_parser("generate", parents=[common], help="Generate a phantom dataset")
    p.add_argument("--out", type=str, required=True, help="Dataset directory")
    p.add_argument("--sections", type=_sections, default=None, help="Comma-separated sections")
    p.add_argument("--count", type=int, default=None, help="Samples per section")

    p = sub.add_parser("train", parents=[common], help="Train on a generated dataset")
    p.add_argument("--data", type=str, required=True, help="Dataset directory (with manifest.json)")
    p.add_argument("--out", type=str, required=True, help="Run directory for checkpoint and metrics")
    p.add_argument("--sections", type=_sections, default=None, help="Restrict training to these sections")
    p.add_argument("--resume", action="store_true", help="Continue from the checkpoint in --out")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default=None)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("assess", parents=[common], help="Assess one image")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--section", choices=SECTIONS, required=True)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("selfcheck", parents=[common], help="Run the self-verification suite")
    p.add_argument("--trials", type=int, default=500, help="Random instances per oracle check")
    p.add_argument("--out", type=str, default=None, help="Optional directory for selfcheck.json")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict = {}
    if args.seed is not None:
        overrides["random_seed"] = args.seed
    config = load_config(args.config, overrides)
    if args.command == "generate" and (args.sections or args.count is not None):
        sections = args.sections or list(config.phantom.counts)
        counts = {s: args.count if args.count is not None else config.phantom.counts.get(s, 300) for s in sections}
        config = dataclasses.replace(config, phantom=dataclasses.replace(config.phantom, counts=counts))
    return config


def cmd_generate(args, config: RunConfig) -> int:
    manifest = generate_dataset(config.phantom, config.random_seed, args.out)
    counts = {}
    for entry in manifest["samples"]:
        key = (entry["section"], entry["plane_label"])
        counts[key] = counts.get(key, 0) + 1
    print(f"Generated {len(manifest['samples'])} samples in {args.out}")
    for (section, label), n in sorted(counts.items()):
        print(f"  {section:<10} {label:<13} {n}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    dataset = PhantomDataset(args.data, sections=args.sections)
    result = train(config, dataset, args.out, resume=args.resume)
    print(f"Checkpoint: {result.checkpoint_path}")
    print(f"Metrics log: {result.metrics_path}")
    if len(result.history):
        last = result.history.iloc[-1]
        print(f"Final epoch {int(last['epoch'])}: loss {last['loss_total']:.4f}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    net = QualityNet.from_checkpoint(load_checkpoint(args.checkpoint))
    split = args.split or config.evaluation.split
    samples = PhantomDataset(args.data, sections=net.sections).split(split)
    evaluator = Evaluator(net, dataclasses.replace(net.config, evaluation=config.evaluation))
    summary, timing = evaluator.evaluate(samples)
    write_evaluation(summary, timing, args.out, boxplot=config.evaluation.boxplot)

    print(f"Evaluation on split '{split}' ({len(samples)} images)")
    for name, m in sorted(summary.sections.items()):
        plane = m.plane.to_dict()
        keys = ("acc", "spec", "sen", "prec", "f1", "auc")
        shown = {k: ("n/a" if plane[k] is None else f"{plane[k]:.4f}") for k in keys}
        print(f"  {name}: mAP {m.map:.4f}" if is_defined(m.map) else f"  {name}: mAP n/a")
        print("    " + "  ".join(f"{k.upper()} {v}" for k, v in shown.items()))
        if m.iou is not None:
            q = m.iou
            print(f"    IoU min {q.minimum:.3f} Q1 {q.q1:.3f} median {q.median:.3f} Q3 {q.q3:.3f} max {q.maximum:.3f}")
    mean_s = timing.to_dict()["mean_s"]
    if mean_s is not None:
        print(f"  {mean_s:.3f} s per frame")
    return EXIT_OK


def cmd_assess(args, config: RunConfig) -> int:
    assessor = QualityAssessor.from_checkpoint(args.checkpoint)
    image = read_image(args.image)
    report = assessor.assess(image, args.section)
    out = Path(args.out)
    stem = Path(args.image).stem
    report.save(out / f"{stem}_report.json")
    if config.report.annotate:
        write_image(annotate(image, report, config.report), out / f"{stem}_annotated.png")

    print(f"{args.section} plane: {report.verdict} ({report.timing_s:.3f} s)")
    for s in report.structures:
        state = "detected" if s.detected else "missing"
        print(f"  {s.structure_id:<4} flag {s.flag}  {state:<8} confidence {s.confidence:.3f}")
    if report.failing:
        print(f"  flag 0: {', '.join(report.failing)}")
    return EXIT_OK


def cmd_selfcheck(args, config: RunConfig) -> int:
    report = run_selfcheck(seed=config.random_seed, trials=args.trials)
    for line in report.lines():
        print(line)
    if args.out:
        write_json(
            Path(args.out) / "selfcheck.json",
            {
                "passed": report.passed,
                "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in report.results],
            },
        )
    return EXIT_OK if report.passed else EXIT_NUMERICAL


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "assess": cmd_assess,
    "selfcheck": cmd_selfcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        setup_logging(config.logging)
        logger.info(f"Resolved configuration: {json.dumps(config.to_dict(), sort_keys=True)}")
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        logger.warning("Interrupted by user")
        return EXIT_USAGE
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{type(e).__name__}: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
