"""Detection metrics: per-class AP, grouped mAP reports, background errors.

Matching is the conventional greedy rule: detections in descending
confidence order claim the highest-overlap unclaimed groundtruth of their
class and image; a claim below the IoU threshold is a false positive.
Groundtruths flagged difficult never count toward recall and detections
landing on them are ignored rather than penalized.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

from .geometry import BoundingBox, iou

ALLOWED_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


class EvaluationError(ValueError):
    """Raised for invalid metric inputs."""


@dataclass(frozen=True)
class DetectionResult:
    image_id: str
    class_id: int
    box: BoundingBox
    confidence: float

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise EvaluationError(f"confidence must be finite, got {self.confidence}")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: BoundingBox
    difficult: bool = False


def manifest_groundtruths(manifest) -> list[GroundTruthBox]:
    """Flatten a dataset manifest into evaluator groundtruth records."""
    out = []
    for entry in manifest.entries:
        for i, ann in enumerate(entry.objects):
            out.append(GroundTruthBox(
                image_id=entry.image,
                class_id=ann.class_id,
                box=ann.box,
                difficult=bool(entry.difficult[i]) if entry.difficult else False,
            ))
    return out


def average_precision(detections, groundtruths, iou_threshold: float = 0.5,
                      eleven_point: bool = False):
    """AP for one class. None when undefined (nothing to detect, nothing found).

    `detections` and `groundtruths` must already be filtered to a single
    class; sorting happens internally. Zero non-difficult groundtruths with
    any detections gives 0.0.
    """
    npos = sum(1 for g in groundtruths if not g.difficult)
    if not groundtruths and not detections:
        return None
    if npos == 0:
        return 0.0 if detections else None

    by_image: dict[str, list] = defaultdict(list)
    for g in groundtruths:
        by_image[g.image_id].append(g)
    claimed: dict[int, bool] = {}

    ordered = sorted(detections, key=lambda d: -d.confidence)
    tp = [0] * len(ordered)
    fp = [0] * len(ordered)
    for k, det in enumerate(ordered):
        best, best_iou = None, 0.0
        for g in by_image.get(det.image_id, ()):
            ov = iou(det.box, g.box)
            if ov > best_iou:
                best, best_iou = g, ov
        if best is not None and best_iou >= iou_threshold:
            if best.difficult:
                continue  # neither TP nor FP
            if claimed.get(id(best)):
                fp[k] = 1  # duplicate hit on an already-matched object
            else:
                claimed[id(best)] = True
                tp[k] = 1
        else:
            fp[k] = 1

    recalls, precisions = [], []
    tp_sum = fp_sum = 0
    for k in range(len(ordered)):
        if tp[k] == 0 and fp[k] == 0:
            continue  # ignored detection, no curve point
        tp_sum += tp[k]
        fp_sum += fp[k]
        recalls.append(tp_sum / npos)
        precisions.append(tp_sum / (tp_sum + fp_sum))
    if not recalls:
        return 0.0

    if eleven_point:
        total = 0.0
        for r in (0.1 * i for i in range(11)):
            candidates = [p for p, rec in zip(precisions, recalls) if rec >= r - 1e-12]
            total += max(candidates, default=0.0)
        return total / 11.0

    # monotone precision envelope, then the exact area under it
    env = precisions[:]
    for k in range(len(env) - 2, -1, -1):
        env[k] = max(env[k], env[k + 1])
    area = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        area += (r - prev_r) * p
        prev_r = r
    return area


@dataclass
class EvalReport:
    """Per-class APs with group rollups, one table row per class group."""

    iou_thresholds: tuple
    per_class: dict = field(default_factory=dict)  # class -> {threshold: AP|None}
    group_map: dict = field(default_factory=dict)  # group -> {threshold: mAP|None}
    group_map_range: dict = field(default_factory=dict)  # group -> mAP over thresholds
    background_fp: dict = field(default_factory=dict)  # group -> count

    def to_records(self) -> list[dict]:
        records = []
        for cid, by_t in sorted(self.per_class.items()):
            for t, ap in sorted(by_t.items()):
                records.append({"kind": "class_ap", "class": cid,
                                "iou": t, "ap": ap})
        for group, by_t in sorted(self.group_map.items()):
            for t, val in sorted(by_t.items()):
                records.append({"kind": "group_map", "group": group,
                                "iou": t, "map": val})
            records.append({"kind": "group_map_range", "group": group,
                            "map": self.group_map_range.get(group),
                            "background_fp": self.background_fp.get(group)})
        return records

    def to_json(self) -> str:
        return json.dumps({
            "iou_thresholds": list(self.iou_thresholds),
            "per_class": {str(c): {str(t): ap for t, ap in m.items()}
                          for c, m in self.per_class.items()},
            "group_map": {g: {str(t): v for t, v in m.items()}
                          for g, m in self.group_map.items()},
            "group_map_range": self.group_map_range,
            "background_fp": self.background_fp,
        }, indent=2, sort_keys=True)


def map_report(detections, groundtruths, class_groups: dict,
               iou_thresholds=(0.5,), eleven_point: bool = False,
               fp_confidence_floor: float = 0.5,
               fp_iou_floor: float = 0.1) -> EvalReport:
    """Per-class AP at each threshold with old/new/all style group means.

    `class_groups` maps a group name to its member class ids; a group with no
    members is left out of the report entirely. Classes whose AP is undefined
    at a threshold are excluded from that group mean.
    """
    thresholds = tuple(round(float(t), 2) for t in iou_thresholds)
    for t in thresholds:
        if t not in ALLOWED_THRESHOLDS:
            raise EvaluationError(
                f"iou threshold {t} not in the 0.50..0.95 grid")

    classes = sorted({g.class_id for g in groundtruths}
                     | {d.class_id for d in detections}
                     | {c for members in class_groups.values() for c in members})
    dets_by_class = defaultdict(list)
    for d in detections:
        dets_by_class[d.class_id].append(d)
    gts_by_class = defaultdict(list)
    for g in groundtruths:
        gts_by_class[g.class_id].append(g)

    report = EvalReport(iou_thresholds=thresholds)
    for cid in classes:
        report.per_class[cid] = {
            t: average_precision(dets_by_class[cid], gts_by_class[cid], t,
                                 eleven_point=eleven_point)
            for t in thresholds
        }

    for group, members in class_groups.items():
        if not members:
            continue
        by_t = {}
        for t in thresholds:
            values = [report.per_class[c][t] for c in members
                      if report.per_class.get(c, {}).get(t) is not None]
            by_t[t] = sum(values) / len(values) if values else None
        report.group_map[group] = by_t
        defined = [v for v in by_t.values() if v is not None]
        report.group_map_range[group] = (
            sum(defined) / len(defined) if defined else None)

    report.background_fp = background_fp_count(
        detections, groundtruths, class_groups,
        confidence_floor=fp_confidence_floor, iou_floor=fp_iou_floor)
    return report


def background_fp_count(detections, groundtruths, class_groups: dict,
                        confidence_floor: float = 0.5,
                        iou_floor: float = 0.1) -> dict:
    """Confident detections far from every same-class object, per group.

    A detection counts when its confidence reaches the floor and its best
    IoU with any same-class groundtruth in its image stays below `iou_floor`
    (it fired on background or on an unlabeled object).
    """
    gts = defaultdict(list)
    for g in groundtruths:
        gts[(g.image_id, g.class_id)].append(g)
    group_of = {}
    for group, members in class_groups.items():
        for c in members:
            group_of.setdefault(c, []).append(group)
    counts = {group: 0 for group, members in class_groups.items() if members}
    for det in detections:
        if det.confidence < confidence_floor:
            continue
        best = 0.0
        for g in gts.get((det.image_id, det.class_id), ()):
            best = max(best, iou(det.box, g.box))
        if best < iou_floor:
            for group in group_of.get(det.class_id, ()):
                if group in counts:
                    counts[group] += 1
    return counts


def plot_memory_curve(sizes, maps, path, title: str = "final mAP vs memory size"):
    """Line plot of final all-class mAP against buffer capacity."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(sizes), list(maps), marker="o")
    ax.set_xlabel("buffer capacity (boxes)")
    ax.set_ylabel("mAP@50")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_forgetting_curves(history: dict, path,
                           title: str = "per-group mAP across tasks"):
    """`history` maps a curve label to [(task index, mAP), ...]."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, points in sorted(history.items()):
        if not points:
            continue
        xs, ys = zip(*sorted(points))
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("task")
    ax.set_ylabel("mAP@50")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
