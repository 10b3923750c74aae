"""Command-line entry point tying the pipeline together.

Subcommands: build-dataset, train-metric, eval-metric, score, bd-rate,
stats. Commands that produce files also write a `.stamp.json` sidecar with
the configuration, seeds, and package versions of the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .backbones import BackendUnavailableError, get_backbone
from .config import ProjectConfig, write_stamp
from .dataset import (
    DatasetError,
    SamplerConfig,
    build_dataset,
    compute_stats,
    load_manifest,
)
from .distortions import DistortionError, load_image, load_library
from .evaluation import (
    EvaluationError,
    RateTaskCurve,
    bd_rate,
    evaluate_metric,
    iter_eval_pairs,
    load_labeled_pairs,
    resolve_metric,
)
from .metric import CheckpointError, load_checkpoint, save_checkpoint, score
from .training import TrainConfig, TrainingError, train
from .voting import default_voter_pool, load_voters

logger = logging.getLogger(__name__)

_HANDLED_ERRORS = (
    DatasetError,
    DistortionError,
    CheckpointError,
    TrainingError,
    EvaluationError,
    BackendUnavailableError,
    ValueError,
    FileNotFoundError,
    OSError,
)


def _stamp_path(out: Path) -> Path:
    return out.with_name(out.stem + ".stamp.json")


def _add_backbone_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", default="synthetic", help="backbone config key")
    p.add_argument(
        "--backbone-path", default=None, help="weights path for production backbones"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpiq",
        description="Machine-preference image quality pipeline",
    )
    parser.add_argument("--version", action="version", version=f"mpiq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="sample and label PSNR-matched pairs")
    p.add_argument("--refs", required=True, help="directory of reference PNGs")
    p.add_argument("--library", default=None, help="distortion library config (JSON)")
    p.add_argument("--voters", default=None, help="voter pool config (JSON)")
    p.add_argument("--delta", type=float, default=0.5, help="PSNR tolerance in dB")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument(
        "--max-pairs", type=int, default=None, help="per-reference pair budget"
    )
    p.add_argument("--out", required=True, help="output manifest path (JSONL)")

    p = sub.add_parser("train-metric", help="train the metric head on a manifest")
    p.add_argument("--manifest", required=True)
    _add_backbone_args(p)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=123)
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--hard-labels", action="store_true")
    p.add_argument("--keep-ties", action="store_true")
    p.add_argument("--branch", choices=["both", "token", "global"], default="both")
    p.add_argument(
        "--layer-weighting",
        choices=["grouped", "uniform", "per_layer"],
        default="grouped",
    )
    p.add_argument(
        "--cache-dir",
        default=None,
        help="feature bundle cache directory (MPIQ_CACHE_DIR overrides the default)",
    )

    p = sub.add_parser("eval-metric", help="evaluate a metric on labeled pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--metric", required=True, help="psnr | ms-ssim | global | checkpoint path"
    )
    _add_backbone_args(p)
    p.add_argument("--out", default=None, help="optional report path (JSON)")

    p = sub.add_parser("score", help="score one image pair with a trained metric")
    p.add_argument("--ref", required=True)
    p.add_argument("--dist", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--backbone-path", default=None)
    p.add_argument("--out", default=None, help="optional result path (JSON)")

    p = sub.add_parser("bd-rate", help="BD-rate between two rate-task curves")
    p.add_argument("--anchor", required=True, help="anchor curve CSV (bpp,score)")
    p.add_argument("--test", required=True, help="test curve CSV (bpp,score)")
    p.add_argument("--out", default=None, help="optional result path (JSON)")

    p = sub.add_parser("stats", help="recompute manifest statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="optional stats path (JSON)")

    return parser


# ---------------------------------------------------------------------------
# Command handlers
# ---------------------------------------------------------------------------


def _cmd_build_dataset(args) -> int:
    refs_dir = Path(args.refs)
    paths = sorted(refs_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG references found in {refs_dir}")
    references = [(p.stem, load_image(p)) for p in paths]
    library = load_library(args.library)
    voters = load_voters(args.voters) if args.voters else default_voter_pool()
    cfg = SamplerConfig(
        delta_db=args.delta,
        max_pairs_per_reference=args.max_pairs,
        rng_seed=args.seed,
    )
    out = Path(args.out)
    manifest = build_dataset(references, library, voters, cfg, out)
    stats = compute_stats(manifest)
    print(
        f"wrote {len(manifest.records)} pairs to {out} "
        f"({stats['n_ties']} ties, {len(manifest.voter_ids)} voters)"
    )
    project = ProjectConfig(
        refs_dir=str(refs_dir),
        output_dir=str(out.parent),
        voters_path=args.voters,
        library_path=args.library,
        sampler=cfg,
    )
    write_stamp(_stamp_path(out), "build-dataset", project.to_dict())
    return 0


def _cmd_train_metric(args) -> int:
    manifest = load_manifest(args.manifest, validate_files=True)
    cache_dir = args.cache_dir or os.environ.get("MPIQ_CACHE_DIR")
    backbone = get_backbone(args.backbone, args.backbone_path, cache_dir=cache_dir)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        split_fraction=args.split_fraction,
        rng_seed=args.seed,
        drop_ties=not args.keep_ties,
        hard_labels=args.hard_labels,
        branch=args.branch,
        layer_weighting=args.layer_weighting,
        cache_dir=cache_dir,
    )
    report = train(manifest, backbone, cfg)
    out = Path(args.out)
    save_checkpoint(report.final_params, report.backbone_id, out)
    report.save(out.with_name(out.stem + ".report.json"))
    last = report.epochs[-1]
    print(
        f"trained {report.backbone_id} head on {report.n_train} pairs "
        f"({report.n_val} validation): "
        f"val_loss={last.val_loss:.6f} val_accuracy={last.val_accuracy:.4f}"
    )
    project = ProjectConfig(
        cache_dir=cache_dir,
        output_dir=str(out.parent),
        backbone=args.backbone,
        sampler=manifest.sampler,
        train=cfg,
    )
    write_stamp(_stamp_path(out), "train-metric", project.to_dict())
    return 0


def _cmd_eval_metric(args) -> int:
    backbone = get_backbone(args.backbone, args.backbone_path)
    metric = resolve_metric(args.metric, backbone)
    first = json.loads(Path(args.manifest).open().readline())
    if first.get("kind") == "mpiq-pair-manifest":
        pairs = iter_eval_pairs(load_manifest(args.manifest, validate_files=True))
    else:
        pairs = load_labeled_pairs(args.manifest)
    summary = evaluate_metric(metric, pairs)
    print(f"metric:    {summary.metric_id}")
    print(f"pairs:     {summary.n_pairs} ({summary.n_non_tie} non-tie)")
    print(f"accuracy:  {summary.accuracy:.4f}")
    print(f"srcc:      {summary.srcc:.4f}")
    print(f"krcc:      {summary.krcc:.4f}")
    print(f"plcc:      {summary.plcc:.4f}")
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
        write_stamp(
            _stamp_path(out),
            "eval-metric",
            {"manifest": args.manifest, "metric": args.metric, "backbone": args.backbone},
        )
    return 0


def _cmd_score(args) -> int:
    params, backbone_id = load_checkpoint(args.ckpt)
    backbone = get_backbone(backbone_id, args.backbone_path)
    ref = load_image(args.ref)
    dist = load_image(args.dist)
    breakdown = score(backbone.extract(ref), backbone.extract(dist), params)
    print(f"S = {breakdown.score:.6f}")
    if args.out:
        out = Path(args.out)
        doc = {
            "ref": args.ref,
            "dist": args.dist,
            "score": breakdown.score,
            "token_score": breakdown.token_score,
            "global_score": breakdown.global_score,
            "gate": breakdown.gate,
        }
        out.write_text(json.dumps(doc, indent=2) + "\n")
        write_stamp(_stamp_path(out), "score", {"ckpt": args.ckpt})
    return 0


def _cmd_bd_rate(args) -> int:
    anchor = RateTaskCurve.from_csv(args.anchor)
    test = RateTaskCurve.from_csv(args.test)
    value = bd_rate(anchor, test)
    print(f"{value:.2f}%")
    if args.out:
        out = Path(args.out)
        out.write_text(
            json.dumps({"anchor": args.anchor, "test": args.test, "bd_rate_percent": value})
            + "\n"
        )
        write_stamp(_stamp_path(out), "bd-rate", {"anchor": args.anchor, "test": args.test})
    return 0


def _cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    stats = compute_stats(manifest)
    text = json.dumps(stats, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


_COMMANDS = {
    "build-dataset": _cmd_build_dataset,
    "train-metric": _cmd_train_metric,
    "eval-metric": _cmd_eval_metric,
    "score": _cmd_score,
    "bd-rate": _cmd_bd_rate,
    "stats": _cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _HANDLED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
