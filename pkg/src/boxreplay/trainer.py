"""Task-sequenced training: composed batches, distillation, buffer upkeep.

`train_task` runs one task's optimization loop; `run_protocol` drives the
whole task sequence, producing one TaskRunRecord per task plus checkpoints,
buffer snapshots, loss logs, and evaluation reports under a run directory.

Determinism contract: every random draw flows from named streams derived
from (root seed, task index), so a resumed run continues exactly where an
uninterrupted one would be.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as torch_fn

from .augment import MixupParams, choose_replay_type, mixup_replay, \
    mosaic_replay, plain_sample
from .buffer import BoxBuffer, empty_buffer, load_buffer, sample_boxes, \
    save_buffer, select_exemplars
from .config import parse_ratio, parse_thresholds
from .evaluation import manifest_groundtruths, map_report
from .losses import LossWeights, ProposalPairBatch, SeenClassPartition, \
    afd_loss, inclusive_classification_loss, inclusive_distillation_loss, \
    pad_loss
from .model import TwoStageDetector, load_checkpoint, save_checkpoint, \
    to_tensor
from .protocol import resolve_plan, split_tasks


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Validated, typed view of the flat config for the training loop."""

    iterations: int = 300
    lr_initial: float = 5e-3
    lr_subsequent: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    capacity: int = 120
    selection: str = "prototype"
    replay_ratio: tuple = (1.0, 1.0, 2.0)
    mixup: MixupParams = MixupParams()
    mosaic_mu: tuple = (0.4, 0.6)
    mosaic_fill: float = 0.5
    weights: LossWeights = LossWeights()
    attention_power: float = 2.0
    classification: str = "inclusive"
    iou_thresholds: tuple = (0.5,)
    eleven_point: bool = False
    score_threshold: float = 0.05
    feature_channels: int = 64
    anchor_size: float = 16.0
    roi_size: int = 7
    proposals_per_image: int = 64

    def __post_init__(self):
        if self.iterations <= 0:
            raise TrainerError(f"iterations must be > 0, got {self.iterations}")
        if self.lr_initial <= 0 or self.lr_subsequent <= 0:
            raise TrainerError("learning rates must be > 0")
        if self.capacity < 0:
            raise TrainerError(f"capacity must be >= 0, got {self.capacity}")
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.classification not in ("inclusive", "standard"):
            raise TrainerError(f"unknown classification mode {self.classification!r}")

    @classmethod
    def from_mapping(cls, cfg: dict) -> "TrainConfig":
        return cls(
            iterations=cfg["train.iterations"],
            lr_initial=cfg["train.lr_initial"],
            lr_subsequent=cfg["train.lr_subsequent"],
            momentum=cfg["train.momentum"],
            weight_decay=cfg["train.weight_decay"],
            batch_size=cfg["train.batch_size"],
            seed=cfg["train.seed"],
            capacity=cfg["buffer.capacity"],
            selection=cfg["buffer.selection"],
            replay_ratio=parse_ratio(cfg["replay.ratio"]),
            mixup=MixupParams(
                lambda_beta_shape=(cfg["replay.mixup_a"], cfg["replay.mixup_b"]),
                overlap_threshold=cfg["replay.overlap_threshold"],
                max_boxes=cfg["replay.max_boxes"]),
            mosaic_mu=(cfg["replay.mosaic_mu_min"], cfg["replay.mosaic_mu_max"]),
            mosaic_fill=cfg["replay.mosaic_fill"],
            weights=LossWeights(alpha=cfg["loss.alpha"], beta=cfg["loss.beta"],
                                gamma=cfg["loss.gamma"]),
            attention_power=cfg["loss.attention_power"],
            classification=cfg["loss.classification"],
            iou_thresholds=parse_thresholds(cfg["eval.iou_thresholds"]),
            eleven_point=cfg["eval.eleven_point"],
            score_threshold=cfg["eval.score_threshold"],
            feature_channels=cfg["model.feature_channels"],
            anchor_size=cfg["model.anchor_size"],
            roi_size=cfg["model.roi_size"],
            proposals_per_image=cfg["model.proposals_per_image"],
        )


@dataclass
class TaskRunRecord:
    task_index: int
    new_classes: tuple
    seen_classes: tuple
    checkpoint: str
    buffer_snapshot: str
    loss_log: str
    final_loss: float
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "task_index": self.task_index,
            "new_classes": list(self.new_classes),
            "seen_classes": list(self.seen_classes),
            "checkpoint": self.checkpoint,
            "buffer_snapshot": self.buffer_snapshot,
            "loss_log": self.loss_log,
            "final_loss": self.final_loss,
            "metrics": self.metrics,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskRunRecord":
        raw = json.loads(text)
        return cls(task_index=raw["task_index"],
                   new_classes=tuple(raw["new_classes"]),
                   seen_classes=tuple(raw["seen_classes"]),
                   checkpoint=raw["checkpoint"],
                   buffer_snapshot=raw["buffer_snapshot"],
                   loss_log=raw["loss_log"],
                   final_loss=raw["final_loss"],
                   metrics=raw["metrics"])


def derive_seed(root: int, *path: int) -> int:
    """Stable 32-bit seed for a named stream under the root seed."""
    return int(np.random.SeedSequence([root, *path]).generate_state(1)[0])


def _stream(root: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([root, *path]))


# stream tags: keep stable, records depend on them
_TORCH, _COMPOSE, _SELECT, _GROW, _MODEL = 0, 1, 2, 3, 4


def _compose_sample(image, buffer: BoxBuffer, cfg: TrainConfig, rng,
                    allow_replay: bool):
    if not allow_replay or buffer.is_empty():
        return plain_sample(image)
    kind = choose_replay_type(rng, cfg.replay_ratio)
    if kind == "new":
        return plain_sample(image)
    if kind == "mixup":
        candidates = sample_boxes(buffer, 2 * cfg.mixup.max_boxes, rng)
        return mixup_replay(image, candidates, cfg.mixup, rng)
    exemplars = sample_boxes(buffer, 4, rng)
    while len(exemplars) < 4:  # tiny buffers reuse crops
        exemplars.append(exemplars[int(rng.integers(0, len(exemplars)))])
    return mosaic_replay(image, exemplars, mu_range=cfg.mosaic_mu,
                         fill_value=cfg.mosaic_fill, rng=rng)


def _boxes_tensor(annotations):
    if not annotations:
        return torch.zeros(0, 4)
    return torch.tensor([a.box.as_xyxy() for a in annotations],
                        dtype=torch.float32)


def _sample_losses(model: TwoStageDetector, teacher, sample, partition,
                   cfg: TrainConfig):
    """All loss terms for one composed sample, as live tensors."""
    images = to_tensor(sample.pixels)
    h, w = sample.pixels.shape[:2]
    features, _ = model.feature_map(images)
    gt_boxes = _boxes_tensor(sample.annotations)
    gt_slots = torch.tensor([model.slot_of(a.class_id)
                             for a in sample.annotations], dtype=torch.int64)

    rpn_cls, rpn_reg = model.rpn_losses(features, [(h, w)], [gt_boxes])
    (prop_boxes, _), = model.propose(features, [(h, w)])

    zero = features.sum() * 0.0
    terms = {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "head_cls": zero,
             "head_reg": zero, "id": zero, "afd": zero, "pad": zero}

    boxes, labels, reg_targets = model.sample_head_targets(
        prop_boxes, gt_boxes, gt_slots)
    if boxes.shape[0]:
        pooled = model.roi_pool(features, boxes)
        logits, deltas = model.head(pooled)
        if cfg.classification == "inclusive":
            probs = torch_fn.softmax(logits, dim=1)
            terms["head_cls"] = inclusive_classification_loss(
                probs, labels, partition)
        else:
            terms["head_cls"] = torch_fn.cross_entropy(logits, labels)
        terms["head_reg"] = model.head_regression_loss(deltas, labels,
                                                       reg_targets)

    distill = teacher is not None and (cfg.weights.alpha > 0
                                       or cfg.weights.beta > 0)
    if distill and prop_boxes.shape[0]:
        student_pooled = model.roi_pool(features, prop_boxes)
        with torch.no_grad():
            teacher_features, _ = teacher.feature_map(images)
            teacher_pooled = teacher.roi_pool(teacher_features, prop_boxes)
            teacher_probs = torch_fn.softmax(
                teacher.head(teacher_pooled)[0], dim=1)
        pair = ProposalPairBatch.from_features(
            student_pooled, teacher_pooled, p=cfg.attention_power)
        terms["afd"] = afd_loss(pair)
        terms["pad"] = pad_loss(pair)
        student_probs = torch_fn.softmax(
            model.head(student_pooled)[0], dim=1)
        terms["id"] = inclusive_distillation_loss(teacher_probs, student_probs,
                                                  partition)
    return terms


def train_task(model: TwoStageDetector, teacher, task_data, buffer: BoxBuffer,
               cfg: TrainConfig, task_index: int, new_classes=None,
               log_path=None) -> list[dict]:
    """One task's optimization loop; returns the per-step loss records."""
    if not task_data.entries:
        raise TrainerError(f"task {task_index} has no training images")
    if task_index >= 2 and buffer.is_empty() and buffer.capacity > 0:
        warnings.warn(f"replay buffer empty entering task {task_index}; "
                      "training proceeds without replay")
    if new_classes is None:
        counts = task_data.instance_counts()
        new_classes = tuple(c for c in model.seen_classes
                            if counts.get(c, 0) > 0)
    num_new = len(new_classes)
    partition = SeenClassPartition(num_old=model.num_slots - 1 - num_new,
                                   num_new=num_new)

    torch.manual_seed(derive_seed(cfg.seed, task_index, _TORCH))
    rng = _stream(cfg.seed, task_index, _COMPOSE)
    lr = cfg.lr_initial if task_index == 1 else cfg.lr_subsequent
    optimizer = torch.optim.SGD(model.parameters(), lr=lr,
                                momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    entries = task_data.entries
    records = []
    log_file = open(log_path, "w") if log_path else None
    try:
        model.train()
        for step in range(cfg.iterations):
            optimizer.zero_grad()
            sums = {k: 0.0 for k in ("det", "ic", "id", "afd", "pad")}
            total = None
            for _ in range(cfg.batch_size):
                entry = entries[int(rng.integers(0, len(entries)))]
                image = task_data.load_image(entry)
                sample = _compose_sample(image, buffer, cfg, rng,
                                         allow_replay=task_index >= 2)
                t = _sample_losses(model, teacher, sample, partition, cfg)
                det = t["rpn_cls"] + t["rpn_reg"] + t["head_cls"] + t["head_reg"]
                ard = t["afd"] + cfg.weights.gamma * t["pad"]
                sample_total = det + cfg.weights.alpha * t["id"] \
                    + cfg.weights.beta * ard
                total = sample_total if total is None else total + sample_total
                sums["det"] += float(det.detach())
                sums["ic"] += float(t["head_cls"].detach())
                sums["id"] += float(t["id"].detach())
                sums["afd"] += float(t["afd"].detach())
                sums["pad"] += float(t["pad"].detach())
            (total / cfg.batch_size).backward()
            optimizer.step()
            record = {"step": step, "task": task_index,
                      "L_det": sums["det"] / cfg.batch_size,
                      "L_IC": sums["ic"] / cfg.batch_size,
                      "L_ID": sums["id"] / cfg.batch_size,
                      "L_AFD": sums["afd"] / cfg.batch_size,
                      "L_PAD": sums["pad"] / cfg.batch_size,
                      "L_total": float(total.detach()) / cfg.batch_size}
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    return records


def evaluate_model(model: TwoStageDetector, manifest, cfg: TrainConfig,
                   old_classes, new_classes) -> dict:
    """Group mAP report dict over `manifest`, restricted to seen classes."""
    seen = set(old_classes) | set(new_classes)
    detections = []
    for entry in manifest.entries:
        image = manifest.load_image(entry)
        detections.extend(model.detect(
            image.pixels, image_id=entry.image,
            score_threshold=cfg.score_threshold))
    groundtruths = [g for g in manifest_groundtruths(manifest)
                    if g.class_id in seen]
    groups = {"old": sorted(old_classes), "new": sorted(new_classes),
              "all": sorted(seen)}
    report = map_report(detections, groundtruths, groups,
                        iou_thresholds=cfg.iou_thresholds,
                        eleven_point=cfg.eleven_point)
    return json.loads(report.to_json())


def run_protocol(manifest, plan, cfg: TrainConfig, run_dir,
                 test_manifest=None, resume: bool = False,
                 stop_after_task=None, progress=None) -> list[TaskRunRecord]:
    """Drive the full task sequence, persisting one record per task.

    On failure mid-sequence the records written so far stay on disk. With
    `resume=True` completed tasks are reloaded from the run directory and
    training continues at the first missing one.
    """
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "buffers").mkdir(exist_ok=True)
    (run_dir / "logs").mkdir(exist_ok=True)
    plan = resolve_plan(plan, manifest)
    tasks = split_tasks(manifest, plan)
    eval_manifest = test_manifest if test_manifest is not None else manifest

    records: list[TaskRunRecord] = []
    records_path = run_dir / "records.jsonl"
    model = None
    buffer = empty_buffer(cfg.capacity)

    start_task = 1
    if resume and records_path.exists():
        for line in records_path.read_text().splitlines():
            if line.strip():
                records.append(TaskRunRecord.from_json(line))
        if records:
            last = records[-1]
            model, _ = load_checkpoint(run_dir / last.checkpoint)
            if last.buffer_snapshot:
                buffer = load_buffer(run_dir / last.buffer_snapshot)
            start_task = last.task_index + 1

    if model is None:
        model = TwoStageDetector(
            plan.tasks[0].new_classes,
            feature_channels=cfg.feature_channels,
            anchor_size=cfg.anchor_size, roi_size=cfg.roi_size,
            proposals_per_image=cfg.proposals_per_image,
            seed=derive_seed(cfg.seed, 0, _MODEL))

    for task in plan.tasks:
        t = task.index
        if t < start_task:
            continue
        if stop_after_task is not None and t > stop_after_task:
            break
        if progress:
            progress(f"task {t}: classes {list(task.new_classes)}")
        teacher = None
        if t >= 2:
            # the teacher is the model exactly as it finished task t-1
            teacher = model.snapshot()
            model.grow_head(task.new_classes,
                            seed=derive_seed(cfg.seed, t, _GROW))
        log_rel = f"logs/task{t}.jsonl"
        task_records = train_task(model, teacher, tasks[t], buffer, cfg, t,
                                  new_classes=task.new_classes,
                                  log_path=run_dir / log_rel)

        buffer_rel = ""
        if cfg.capacity > 0:
            buffer = select_exemplars(
                tasks[t], model, buffer, new_classes=task.new_classes,
                strategy=cfg.selection,
                rng=_stream(cfg.seed, t, _SELECT))
            buffer_rel = f"buffers/task{t}"
            save_buffer(buffer, run_dir / buffer_rel)

        ckpt_rel = f"checkpoints/task{t}.pt"
        save_checkpoint(model, run_dir / ckpt_rel, step=cfg.iterations,
                        extra={"task": t})

        old = [c for c in model.seen_classes if c not in task.new_classes]
        metrics = evaluate_model(model, eval_manifest, cfg,
                                 old_classes=old, new_classes=task.new_classes)
        record = TaskRunRecord(
            task_index=t, new_classes=task.new_classes,
            seen_classes=model.seen_classes, checkpoint=ckpt_rel,
            buffer_snapshot=buffer_rel, loss_log=log_rel,
            final_loss=task_records[-1]["L_total"], metrics=metrics)
        records.append(record)
        with open(records_path, "a") as fh:
            fh.write(record.to_json() + "\n")
    return records
