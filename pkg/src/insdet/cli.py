"""Command-line interface: the full pipeline as subcommands.

Every run prints its resolved configuration, writes outputs atomically, and
is reproducible given the same inputs, seed and thread count. Diagnosed
failures exit with status 2 and a single machine-parsable stderr line
``ERROR <code>: <message>``; unexpected failures exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import augment, evaluator, matcher, store, synthgen, trainer
from .errors import EngineError

log = logging.getLogger("insdet")


def _print_config(command: str, args: argparse.Namespace) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"config {command} {json.dumps(resolved, sort_keys=True)}")


def _train_aug(args) -> augment.AugmentationConfig:
    views = getattr(args, "aug_train", 0)
    return augment.AugmentationConfig(
        use_synthetic_in_train=views > 0,
        synth_per_instance_train=views,
        seed=args.seed,
    )


def _test_aug(args, views: int | None = None) -> augment.AugmentationConfig:
    if views is None:
        views = getattr(args, "aug_test", 0)
    return augment.AugmentationConfig(
        use_synthetic_in_test=views > 0,
        synth_per_instance_test=views,
        seed=args.seed,
    )


def _triplet_config(args) -> trainer.TripletConfig:
    return trainer.TripletConfig(
        margin=args.alpha,
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        epochs=args.epochs,
        distractors_per_batch=args.distractors_per_batch,
        seed=args.seed,
        loss=args.loss,
        decoupled_weight_decay=not args.coupled_wd,
    )


def cmd_gen_synth(args) -> int:
    config = synthgen.SynthConfig(
        n_instances=args.instances,
        refs_per_instance=args.refs_per_instance,
        synth_views_per_instance=args.synth_views,
        dim=args.dim,
        scenes=args.scenes,
        proposals_per_scene=args.proposals_per_scene,
        distractor_count=args.distractors,
        ref_noise=args.ref_noise,
        proposal_noise=args.proposal_noise,
        shift_rotation=args.shift_rotation,
        shift_scale_spread=args.shift_scale,
        clutter_fraction=args.clutter,
        seed=args.seed,
    )
    world = synthgen.generate(config, args.out)
    print(f"wrote {world.manifest_path}")
    return 0


def cmd_validate(args) -> int:
    manifest = store.load_manifest(args.manifest)
    n_gt = sum(len(s.ground_truth) for s in manifest.scenes)
    print(
        f"ok dim={manifest.dim} references={len(manifest.references)} "
        f"scenes={len(manifest.scenes)} proposals={manifest.proposal_matrix.shape[0]} "
        f"ground_truth={n_gt} distractors={len(manifest.distractors) if manifest.distractors else 0}"
    )
    return 0


def cmd_train(args) -> int:
    manifest = store.load_manifest(args.manifest)
    pool = manifest.distractors if args.distractors else None
    if args.distractors and pool is None:
        raise EngineError("NoDistractors", "manifest has no distractor pool but --distractors was given")
    result = trainer.train(manifest, pool, _triplet_config(args), _train_aug(args))
    store.write_adapter_checkpoint(result.adapter.weight, result.adapter.bias, args.out)
    trace_path = args.trace or Path(args.out).with_suffix(".trace.csv")
    trainer.write_loss_trace(result.trace, trace_path)
    if result.trace:
        last = result.trace[-1]
        print(f"trained epochs={last.epoch} mean_loss={last.mean_loss:.6f} -> {args.out}")
    else:
        print(f"trained epochs=0 -> {args.out}")
    return 0


def _load_adapter(args, manifest) -> trainer.Adapter:
    if args.adapter:
        weight, bias = store.read_adapter_checkpoint(args.adapter)
        return trainer.Adapter(weight, bias)
    return trainer.identity_adapter(manifest.dim)


def cmd_match(args) -> int:
    manifest = store.load_manifest(args.manifest)
    adapter = _load_adapter(args, manifest)
    detections = matcher.run_inference(
        manifest, adapter, _test_aug(args), threshold=args.threshold, threads=args.threads
    )
    matcher.write_detections(detections, args.out)
    print(f"matched {len(detections)} detections -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = store.load_manifest(args.manifest)
    detections = matcher.read_detections(args.detections)
    report = evaluator.evaluate(detections, manifest)
    evaluator.write_metrics(report, args.out)
    shown = report.to_dict()["ap"]
    print(f"ap_avg={shown['avg']} ap50={shown['ap50']} ap75={shown['ap75']} -> {args.out}")
    return 0


def cmd_distractor_stats(args) -> int:
    manifest = store.load_manifest(args.manifest)
    if manifest.distractors is None or len(manifest.distractors) == 0:
        raise EngineError("NoDistractors", "manifest has no distractor pool")
    real_rows = [r.row for r in manifest.references if r.origin == "real"]
    refs = manifest.reference_matrix[real_rows]
    avg, peak = augment.distractor_correlation(manifest.distractors, refs)
    augment.write_distractor_stats(avg, peak, args.out)
    print(f"wrote stats for {len(avg)} distractors -> {args.out}")
    return 0


def cmd_pr_curve(args) -> int:
    manifest = store.load_manifest(args.manifest)
    detections = matcher.read_detections(args.detections)
    curve = evaluator.pr_curve(detections, manifest, iou_t=args.iou)
    evaluator.write_pr_curve(curve, args.out)
    print(f"wrote precision-recall curve at IoU {args.iou} -> {args.out}")
    return 0


def _parse_grid(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError:
        raise EngineError("BadConfig", f"{flag} must be a comma-separated list of integers, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise EngineError("BadConfig", f"{flag} values must be non-negative integers")
    return values


def cmd_sweep_aug(args) -> int:
    manifest = store.load_manifest(args.manifest)
    pool = manifest.distractors if args.distractors else None
    train_grid = _parse_grid(args.train_views, "--train-views")
    test_grid = _parse_grid(args.test_views, "--test-views")
    rows = []
    base_ap = None
    for train_views in train_grid:
        aug_train = augment.AugmentationConfig(
            use_synthetic_in_train=train_views > 0,
            synth_per_instance_train=train_views,
            seed=args.seed,
        )
        result = trainer.train(manifest, pool, _triplet_config(args), aug_train)
        for test_views in test_grid:
            detections = matcher.run_inference(
                manifest,
                result.adapter,
                _test_aug(args, views=test_views),
                threshold=args.threshold,
                threads=args.threads,
            )
            report = evaluator.evaluate(detections, manifest)
            ap = (report.ap_avg or 0.0) * 100.0
            if base_ap is None:
                base_ap = ap
            rows.append((train_views, test_views, ap, ap - base_ap))
            log.info("sweep train_views=%d test_views=%d ap_avg=%.2f", train_views, test_views, ap)
    lines = ["train_views,test_views,ap_avg,ap_delta"]
    for tv, sv, ap, delta in rows:
        lines.append(f"{tv},{sv},{ap:.4f},{delta:.4f}")
    with store.atomic_output(args.out) as tmp:
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} sweep rows -> {args.out}")
    return 0


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--alpha", type=float, default=0.5, help="margin of the triplet objective")
    parser.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    parser.add_argument("--weight-decay", type=float, default=0.5, help="L2 weight decay in Adam")
    parser.add_argument(
        "--coupled-wd",
        action="store_true",
        help="fold weight decay into the Adam moments (classic L2) instead of the decoupled default",
    )
    parser.add_argument("--batch", type=int, default=100, help="anchors per training batch")
    parser.add_argument("--epochs", type=int, default=10, help="passes over the reference set")
    parser.add_argument(
        "--distractors", action="store_true", help="mine negatives from the manifest's distractor pool too"
    )
    parser.add_argument(
        "--distractors-per-batch", type=int, default=100, help="fresh distractor sample size per batch"
    )
    parser.add_argument(
        "--loss", choices=("triplet", "contrastive", "ce"), default="triplet", help="training objective"
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness in this run")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-scene work")
    common.add_argument(
        "--log-level", default="warning", choices=("debug", "info", "warning", "error"), help="stderr log level"
    )

    parser = argparse.ArgumentParser(prog="insdet", description="Feature-space instance detection engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic world with ground truth")
    defaults = synthgen.SynthConfig()
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--instances", type=int, default=defaults.n_instances)
    p.add_argument("--refs-per-instance", type=int, default=defaults.refs_per_instance)
    p.add_argument(
        "--synth-views", type=int, default=defaults.synth_views_per_instance,
        help="held-out synthetic views per instance",
    )
    p.add_argument("--dim", type=int, default=defaults.dim)
    p.add_argument("--scenes", type=int, default=defaults.scenes)
    p.add_argument("--proposals-per-scene", type=int, default=defaults.proposals_per_scene)
    p.add_argument("--distractors", type=int, default=defaults.distractor_count, help="distractor pool size")
    p.add_argument("--ref-noise", type=float, default=defaults.ref_noise)
    p.add_argument("--proposal-noise", type=float, default=defaults.proposal_noise)
    p.add_argument("--shift-rotation", type=float, default=defaults.shift_rotation)
    p.add_argument("--shift-scale", type=float, default=defaults.shift_scale_spread)
    p.add_argument(
        "--clutter", type=float, default=defaults.clutter_fraction,
        help="share of proposals without ground truth",
    )
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("validate", parents=[common], help="validate a dataset manifest and its files")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", parents=[common], help="adapt the embedding map on the references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="adapter checkpoint path")
    p.add_argument("--trace", default=None, help="loss trace CSV path (default: next to the checkpoint)")
    p.add_argument("--aug-train", type=int, default=0, help="synthetic views per instance during training")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", parents=[common], help="run matching inference over all scenes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapter", default=None, help="adapter checkpoint (identity map if omitted)")
    p.add_argument("--threshold", type=float, default=matcher.DEFAULT_THRESHOLD, help="acceptance threshold")
    p.add_argument("--aug-test", type=int, default=0, help="synthetic views per instance in the reference set")
    p.add_argument("--out", required=True, help="detections JSON path")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common], help="score detections against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distractor-stats", parents=[common], help="distractor/reference similarity statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_distractor_stats)

    p = sub.add_parser("pr-curve", parents=[common], help="export a precision-recall curve")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_pr_curve)

    p = sub.add_parser("sweep-aug", parents=[common], help="sweep synthetic-view counts and log AP deltas")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-views", default="0", help="comma-separated synthetic view counts for training")
    p.add_argument("--test-views", default="0", help="comma-separated synthetic view counts for testing")
    p.add_argument("--threshold", type=float, default=matcher.DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True, help="CSV path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_aug)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        print("ERROR BadConfig: --threads must be >= 1", file=sys.stderr)
        return 2
    _print_config(args.command, args)
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"ERROR {exc.code}: {exc.message}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(f"ERROR Internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
