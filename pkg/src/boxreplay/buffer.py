"""Fixed-capacity box rehearsal memory with prototype-based selection.

After each task the memory is rebuilt: every class (old and new) gets an
equal quota of the capacity. New classes contribute the groundtruth crops
whose pooled features lie nearest the class-mean feature map; old classes
shrink by strided resampling of their stored list, which preserves the
nearest-first ordering and makes successive buffers nested (pruning only
ever removes).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import crop_pixels
from .manifest import DatasetManifest

BUFFER_FORMAT = "boxreplay-buffer-v1"

MIN_CROP_SIDE = 8


class BufferError(ValueError):
    """Raised for invalid buffer operations or corrupt stored buffers."""


@dataclass(frozen=True)
class BoxExemplar:
    """One stored object crop at native resolution."""

    pixels: np.ndarray = field(repr=False)
    class_id: int
    source_image: str
    distance_to_prototype: float

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if h < MIN_CROP_SIDE or w < MIN_CROP_SIDE:
            raise BufferError(f"crop {w}x{h} below the {MIN_CROP_SIDE}px minimum")
        if not math.isfinite(self.distance_to_prototype):
            raise BufferError("distance_to_prototype must be finite")
        self.pixels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BoxBuffer:
    """Capacity-bounded per-class exemplar lists, nearest-prototype first."""

    capacity: int
    per_class: dict = field(default_factory=dict)  # class_id -> list[BoxExemplar]

    def __post_init__(self):
        if self.capacity < 0:
            raise BufferError(f"capacity must be >= 0, got {self.capacity}")
        total = self.total_count()
        if total > self.capacity:
            raise BufferError(f"{total} exemplars exceed capacity {self.capacity}")
        for cid, items in self.per_class.items():
            dists = [e.distance_to_prototype for e in items]
            if dists != sorted(dists):
                raise BufferError(f"class {cid} exemplars not sorted by distance")

    def total_count(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def class_counts(self) -> dict:
        return {cid: len(v) for cid, v in sorted(self.per_class.items())}

    def seen_classes(self) -> tuple:
        return tuple(sorted(self.per_class.keys()))

    def all_exemplars(self) -> list:
        out = []
        for cid in sorted(self.per_class):
            out.extend(self.per_class[cid])
        return out

    def is_empty(self) -> bool:
        return self.total_count() == 0


def empty_buffer(capacity: int) -> BoxBuffer:
    return BoxBuffer(capacity=capacity, per_class={})


def quota(capacity: int, num_seen_classes: int) -> int:
    """Per-class exemplar allowance: ceil(capacity / seen classes)."""
    if num_seen_classes < 1:
        raise BufferError(f"need >= 1 seen class, got {num_seen_classes}")
    if capacity < 0:
        raise BufferError(f"capacity must be >= 0, got {capacity}")
    return math.ceil(capacity / num_seen_classes)


def class_prototype(features) -> torch.Tensor:
    """Element-wise mean of same-shaped pooled feature maps."""
    features = [torch.as_tensor(f) for f in features]
    if not features:
        raise BufferError("cannot take a prototype of zero feature maps")
    first = features[0].shape
    for f in features[1:]:
        if f.shape != first:
            raise BufferError(f"feature shapes differ: {tuple(first)} vs {tuple(f.shape)}")
    return torch.stack(features).mean(dim=0)


def feature_distance(f, prototype) -> float:
    """Euclidean distance between two feature maps, flattened over elements."""
    f = torch.as_tensor(f)
    prototype = torch.as_tensor(prototype)
    if f.shape != prototype.shape:
        raise BufferError(f"shape mismatch: {tuple(f.shape)} vs {tuple(prototype.shape)}")
    return float(torch.linalg.vector_norm((f - prototype).flatten()).item())


def _old_class_indices(stored: int, new_quota: int, previous_quota: int) -> list:
    """Strided positions kept when an old class shrinks to its new quota.

    Position j (1-based over the new quota) keeps stored index
    floor(j * stored / previous_quota), clamped into range; duplicates are
    dropped. A list already within quota is kept whole.
    """
    if stored <= new_quota:
        return list(range(stored))
    out = []
    for j in range(1, new_quota + 1):
        i = min((j * stored) // previous_quota, stored - 1)
        if i not in out:
            out.append(i)
    return out


def _candidate_sort_key(entry):
    distance, exemplar, box = entry
    return (distance, exemplar.source_image, box.u, box.v, box.w, box.h)


def select_exemplars(task_data: DatasetManifest, trained_model, buffer: BoxBuffer,
                     new_classes=None, strategy: str = "prototype",
                     rng=None) -> BoxBuffer:
    """Rebuild the memory after a task: add new classes, shrink old ones.

    `task_data` must be the task's training manifest (annotations already
    masked to the task's classes); `trained_model` is the post-task model,
    used read-only to pool groundtruth box features. `new_classes` defaults
    to the classes with annotations in `task_data`; pass the task's class
    list explicitly so that a class without a single instance still gets its
    (empty, warned-about) slot. Strategies: "prototype" keeps nearest-to-mean
    crops, "herding" greedily matches the running mean to the class mean,
    "random" draws the quota uniformly. Old classes always shrink by the
    strided rule regardless of strategy.
    """
    if strategy not in ("prototype", "herding", "random"):
        raise BufferError(f"unknown selection strategy '{strategy}'")
    if strategy == "random" and rng is None:
        raise BufferError("random selection needs an rng")

    old_classes = sorted(buffer.per_class.keys())
    if new_classes is None:
        counts = task_data.instance_counts()
        new_classes = sorted(c for c, n in counts.items()
                             if n > 0 and c not in old_classes)
    else:
        new_classes = sorted(set(int(c) for c in new_classes) - set(old_classes))
    num_seen = len(old_classes) + len(new_classes)
    if num_seen == 0:
        return buffer
    new_quota = quota(buffer.capacity, num_seen)

    per_class = {}

    # old classes: strided shrink, preserving order (and therefore nesting)
    previous_quota = quota(buffer.capacity, len(old_classes)) if old_classes else 0
    for cid in old_classes:
        stored = buffer.per_class[cid]
        keep = _old_class_indices(len(stored), new_quota, previous_quota)
        per_class[cid] = [stored[i] for i in keep]

    # new classes: pool features of every groundtruth box under the frozen model
    candidates = _collect_candidates(task_data, trained_model, new_classes)
    for cid in new_classes:
        entries = candidates.get(cid, [])
        if not entries:
            warnings.warn(f"class {cid} has no usable groundtruth boxes; "
                          "its exemplar list is empty")
            per_class[cid] = []
            continue
        per_class[cid] = _pick(cid, entries, new_quota, strategy, rng)

    _trim_to_capacity(per_class, buffer.capacity)
    return BoxBuffer(capacity=buffer.capacity, per_class=per_class)


def _trim_to_capacity(per_class: dict, capacity: int) -> None:
    """Ceiling quotas can overshoot the capacity by a few boxes; drop the
    least representative tail exemplars from the fullest classes until the
    total fits. Deterministic and order-preserving."""
    total = sum(len(v) for v in per_class.values())
    while total > capacity:
        cid = max(per_class, key=lambda c: (len(per_class[c]), c))
        per_class[cid].pop()
        total -= 1


def select_prototype_boxes(task_data: DatasetManifest, trained_model,
                           buffer: BoxBuffer) -> BoxBuffer:
    """Default nearest-to-prototype selection (see select_exemplars)."""
    return select_exemplars(task_data, trained_model, buffer, strategy="prototype")


def _collect_candidates(task_data, trained_model, new_classes):
    """(feature, crop, box) for every groundtruth box of the new classes."""
    wanted = set(new_classes)
    raw = {cid: [] for cid in new_classes}
    for entry in task_data.entries:
        boxes = [ann.box for ann in entry.objects if ann.class_id in wanted]
        if not boxes:
            continue
        image = task_data.load_image(entry)
        pooled = trained_model.pool_boxes(image.pixels, boxes)
        k = 0
        for ann in entry.objects:
            if ann.class_id not in wanted:
                continue
            feature = pooled[k]
            k += 1
            crop = crop_pixels(image.pixels, ann.box)
            if crop.shape[0] < MIN_CROP_SIDE or crop.shape[1] < MIN_CROP_SIDE:
                continue
            raw[ann.class_id].append((feature, crop, ann.box, entry.image))
    return raw


def _pick(cid, entries, new_quota, strategy, rng):
    features = [e[0] for e in entries]
    prototype = class_prototype(features)

    if strategy == "prototype":
        scored = []
        for feature, crop, box, image in entries:
            d = feature_distance(feature, prototype)
            ex = BoxExemplar(pixels=crop, class_id=cid, source_image=image,
                             distance_to_prototype=d)
            scored.append((d, ex, box))
        scored.sort(key=_candidate_sort_key)
        return [e for _, e, _ in scored[:new_quota]]

    if strategy == "herding":
        order = _herding_order(features, prototype)
    else:  # random
        order = list(rng.permutation(len(entries)))
    picked = []
    # rank doubles as the stored "distance" so the sortedness invariant holds
    for rank, idx in enumerate(order[:new_quota]):
        _, crop, box, image = entries[idx]
        picked.append(BoxExemplar(pixels=crop, class_id=cid, source_image=image,
                                  distance_to_prototype=float(rank)))
    return picked


def _herding_order(features, prototype):
    """Greedy picks keeping the running selected-mean closest to the prototype."""
    feats = torch.stack([torch.as_tensor(f) for f in features])
    n = feats.shape[0]
    chosen: list = []
    total = torch.zeros_like(feats[0])
    remaining = set(range(n))
    while remaining:
        best, best_d = None, None
        for i in sorted(remaining):
            mean = (total + feats[i]) / (len(chosen) + 1)
            d = float(torch.linalg.vector_norm((mean - prototype).flatten()))
            if best_d is None or d < best_d - 1e-12:
                best, best_d = i, d
        chosen.append(best)
        total = total + feats[best]
        remaining.discard(best)
    return chosen


def sample_boxes(buffer: BoxBuffer, k: int, rng) -> list:
    """k exemplars uniformly without replacement; the whole buffer if k is large."""
    if k < 0:
        raise BufferError(f"k must be >= 0, got {k}")
    stored = buffer.all_exemplars()
    if not stored:
        raise BufferError("buffer is empty")
    take = min(k, len(stored))
    idx = rng.choice(len(stored), size=take, replace=False)
    return [stored[i] for i in idx]


def save_buffer(buffer: BoxBuffer, directory) -> None:
    """Directory layout: header.json, crops/*.png, manifest.jsonl."""
    directory = Path(directory)
    crops = directory / "crops"
    crops.mkdir(parents=True, exist_ok=True)
    header = {
        "format": BUFFER_FORMAT,
        "capacity": buffer.capacity,
        "seen_classes": list(buffer.seen_classes()),
    }
    (directory / "header.json").write_text(json.dumps(header) + "\n")
    with (directory / "manifest.jsonl").open("w") as fh:
        for cid in sorted(buffer.per_class):
            for j, ex in enumerate(buffer.per_class[cid]):
                name = f"crops/{cid:03d}_{j:04d}.png"
                arr = np.clip(np.rint(ex.pixels * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr).save(directory / name)
                fh.write(json.dumps({
                    "file": name,
                    "class": cid,
                    "source_image": ex.source_image,
                    "w": ex.width,
                    "h": ex.height,
                    "distance": ex.distance_to_prototype,
                }) + "\n")


def load_buffer(directory) -> BoxBuffer:
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise BufferError(f"{directory} has no header.json")
    header = json.loads(header_path.read_text())
    if header.get("format") != BUFFER_FORMAT:
        raise BufferError(f"unsupported buffer format {header.get('format')!r}")
    per_class: dict = {}
    manifest_path = directory / "manifest.jsonl"
    if manifest_path.exists():
        for line in manifest_path.read_text().splitlines():
            rec = json.loads(line)
            with Image.open(directory / rec["file"]) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            ex = BoxExemplar(pixels=pixels, class_id=int(rec["class"]),
                             source_image=rec["source_image"],
                             distance_to_prototype=float(rec["distance"]))
            per_class.setdefault(ex.class_id, []).append(ex)
    return BoxBuffer(capacity=int(header["capacity"]), per_class=per_class)


def inspect_buffer(buffer: BoxBuffer) -> dict:
    """Counts, crop-size spread and byte usage, for the CLI and logs."""
    sizes = [(ex.width, ex.height) for ex in buffer.all_exemplars()]
    return {
        "capacity": buffer.capacity,
        "total": buffer.total_count(),
        "per_class": buffer.class_counts(),
        "min_side": min((min(w, h) for w, h in sizes), default=None),
        "max_side": max((max(w, h) for w, h in sizes), default=None),
        "total_bytes": sum(ex.pixels.nbytes for ex in buffer.all_exemplars()),
    }
