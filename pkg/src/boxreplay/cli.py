"""Command-line operator surface.

Verbs:
  gen-shapes       write a synthetic shapes dataset
  protocol-split   show how a task plan partitions a manifest
  train            run the incremental protocol into a run directory
  eval             score a checkpoint against a manifest split
  buffer-inspect   summarize a saved replay buffer
  augment-preview  render composed replay samples as images

Exit codes: 0 success, 2 usage or config errors, 1 anything else, always
with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import MixupParams, mixup_replay, mosaic_replay, render_preview
from .buffer import BUFFER_FORMAT, inspect_buffer, load_buffer, sample_boxes
from .config import ConfigError, find_profile, parse_thresholds, \
    resolve_config, save_snapshot
from .evaluation import manifest_groundtruths, map_report
from .geometry import AnnotatedImage
from .manifest import ManifestError, load_manifest, save_manifest
from .model import CHECKPOINT_FORMAT, load_checkpoint
from .protocol import ProtocolError, resolve_plan, split_tasks
from .shapes import generate_shapes_dataset
from .trainer import TrainConfig, TrainerError, run_protocol


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxreplay",
        description="incremental object detection with box replay")
    parser.add_argument("--version", action="version",
                        version=f"boxreplay {__version__} "
                                f"(formats: {CHECKPOINT_FORMAT}, {BUFFER_FORMAT})")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p):
        p.add_argument("--config", help="config file path or shipped profile name")
        p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        return p

    p = with_config(sub.add_parser("train", help="run the task protocol"))
    p.add_argument("--run-dir", required=True)
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=...")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after-task", type=int)

    p = with_config(sub.add_parser("eval", help="score a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--data", help="manifest path, overrides --split lookup")
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("buffer-inspect", help="summarize a saved buffer")
    p.add_argument("--buffer", required=True)

    p = with_config(sub.add_parser("augment-preview",
                                   help="render replay compositions"))
    p.add_argument("--buffer", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--kind", choices=("mixup", "mosaic"), default="mixup")
    p.add_argument("--image", help="background image manifest entry; "
                                   "defaults to a flat canvas")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("protocol-split", help="partition a manifest by plan")
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out-dir", help="also write one manifest per task")

    p = sub.add_parser("gen-shapes", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--images-per-class", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolved(args) -> dict:
    config_file = find_profile(args.config) if args.config else None
    sets = list(args.sets)
    if getattr(args, "seed", None) is not None and args.verb == "train":
        sets.append(f"train.seed={args.seed}")
    return resolve_config(config_file, sets)


def _manifest_for(config: dict, split: str):
    key = f"data.{split}_manifest"
    path = config[key]
    if not path:
        raise ConfigError(f"key '{key}' is not set")
    return load_manifest(path)


def _cmd_train(args) -> int:
    config = _resolved(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_snapshot(config, run_dir / "config.cfg")
    manifest = _manifest_for(config, "train")
    test = None
    if config["data.test_manifest"]:
        test = load_manifest(config["data.test_manifest"])
    records = run_protocol(
        manifest, config["protocol.plan"], TrainConfig.from_mapping(config),
        run_dir, test_manifest=test, resume=args.resume,
        stop_after_task=args.stop_after_task,
        progress=lambda msg: print(msg, flush=True))
    for record in records:
        all_map = record.metrics["group_map"]["all"]
        shown = {t: (None if v is None else round(v, 4))
                 for t, v in all_map.items()}
        print(f"task {record.task_index}: classes={list(record.seen_classes)} "
              f"mAP={shown} checkpoint={record.checkpoint}")
    return 0


def _groups_for_checkpoint(config: dict, manifest, seen, payload) -> dict:
    groups = {"all": sorted(seen)}
    task_index = payload.get("extra", {}).get("task")
    if task_index is None:
        return groups
    try:
        plan = resolve_plan(config["protocol.plan"], manifest)
    except (ProtocolError, ManifestError):
        return groups
    new = [c for t in plan.tasks if t.index == task_index
           for c in t.new_classes]
    old = [c for c in seen if c not in new]
    if new:
        groups["new"] = sorted(new)
    if old:
        groups["old"] = sorted(old)
    return groups


def _cmd_eval(args) -> int:
    config = _resolved(args)
    model, payload = load_checkpoint(args.checkpoint)
    manifest = (load_manifest(args.data) if args.data
                else _manifest_for(config, args.split))
    seen = set(model.seen_classes)
    detections = []
    for entry in manifest.entries:
        image = manifest.load_image(entry)
        detections.extend(model.detect(
            image.pixels, image_id=entry.image,
            score_threshold=config["eval.score_threshold"]))
    groundtruths = [g for g in manifest_groundtruths(manifest)
                    if g.class_id in seen]
    report = map_report(
        detections, groundtruths,
        _groups_for_checkpoint(config, manifest, seen, payload),
        iou_thresholds=parse_thresholds(config["eval.iou_thresholds"]),
        eleven_point=config["eval.eleven_point"])
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_buffer_inspect(args) -> int:
    buffer = load_buffer(args.buffer)
    print(json.dumps(inspect_buffer(buffer), indent=2, sort_keys=True))
    return 0


def _cmd_augment_preview(args) -> int:
    config = _resolved(args)
    buffer = load_buffer(args.buffer)
    if buffer.is_empty():
        print("error: buffer empty, nothing to compose", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.image:
        manifest = load_manifest(args.image)
        base = manifest.load_image(manifest.entries[0])
    else:
        canvas = np.full((64, 64, 3), np.float32(0.35), dtype=np.float32)
        base = AnnotatedImage(image_id="canvas", pixels=canvas, annotations=())
    rng = np.random.default_rng(args.seed)
    params = MixupParams(
        lambda_beta_shape=(config["replay.mixup_a"], config["replay.mixup_b"]),
        overlap_threshold=config["replay.overlap_threshold"],
        max_boxes=config["replay.max_boxes"])
    for i in range(args.n):
        if args.kind == "mixup":
            sample = mixup_replay(base, sample_boxes(buffer, 4, rng), params, rng)
        else:
            exemplars = sample_boxes(buffer, 4, rng)
            while len(exemplars) < 4:
                exemplars.append(exemplars[int(rng.integers(0, len(exemplars)))])
            sample = mosaic_replay(
                base, exemplars,
                mu_range=(config["replay.mosaic_mu_min"],
                          config["replay.mosaic_mu_max"]),
                fill_value=config["replay.mosaic_fill"], rng=rng)
        path = out_dir / f"{args.kind}_{i:02d}.png"
        render_preview(sample, path)
        print(path)
    return 0


def _cmd_protocol_split(args) -> int:
    manifest = load_manifest(args.data)
    plan = resolve_plan(args.plan, manifest)
    tasks = split_tasks(manifest, plan)
    summary = {}
    for index, task_manifest in sorted(tasks.items()):
        counts = task_manifest.instance_counts()
        summary[f"task{index}"] = {
            "classes": sorted(c for c, n in counts.items() if n > 0),
            "images": len(task_manifest.entries),
            "instances": sum(counts.values()),
        }
        if args.out_dir:
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_manifest(task_manifest, out / f"task{index}.jsonl")
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_gen_shapes(args) -> int:
    manifest = generate_shapes_dataset(
        args.out_dir, num_classes=args.classes,
        images_per_class=args.images_per_class,
        image_size=args.size, seed=args.seed)
    print(json.dumps({"manifest": str(Path(args.out_dir) / "manifest.jsonl"),
                      "images": len(manifest.entries),
                      "classes": len(manifest.class_names)}))
    return 0


_DISPATCH = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "buffer-inspect": _cmd_buffer_inspect,
    "augment-preview": _cmd_augment_preview,
    "protocol-split": _cmd_protocol_split,
    "gen-shapes": _cmd_gen_shapes,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, ProtocolError, TrainerError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
