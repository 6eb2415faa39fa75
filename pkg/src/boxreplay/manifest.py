"""Dataset manifests: the image/annotation index every pipeline stage reads.

A manifest is a list of (image path, full annotation list) entries plus the
class-name -> class-id mapping. Ids are contiguous from 1 in sorted name
order (id 0 is reserved for background); for VOC this reproduces the
conventional alphabetical class ordering. Serialized form is one JSON record
per line with fields {image, width, height, objects:[{class, u, v, w, h}]}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Annotation, AnnotatedImage, BoundingBox


class ManifestError(ValueError):
    """Raised for malformed manifests or unresolvable entries."""


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    width: int
    height: int
    objects: tuple[Annotation, ...]
    # Aligned with `objects`; marks boxes the evaluator should ignore
    # (VOC "difficult" convention). None means all False.
    difficult: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.difficult is not None and len(self.difficult) != len(self.objects):
            raise ManifestError("difficult flags must align with objects")
        for ann in self.objects:
            if ann.box.u2 > self.width + 1e-6 or ann.box.v2 > self.height + 1e-6:
                raise ManifestError(
                    f"{self.image}: box {ann.box} exceeds image size "
                    f"{self.width}x{self.height}"
                )


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_names: dict[str, int] = field(default_factory=dict)
    # Directory image paths are resolved against; set by load()/save().
    root: str = ""

    def __post_init__(self):
        ids = sorted(self.class_names.values())
        if ids != list(range(1, len(ids) + 1)):
            raise ManifestError(f"class ids must be contiguous from 1, got {ids}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def id_to_name(self) -> dict[int, str]:
        return {cid: name for name, cid in self.class_names.items()}

    def class_ids(self) -> list[int]:
        return sorted(self.class_names.values())

    def resolve_path(self, image: str) -> Path:
        p = Path(image)
        if not p.is_absolute() and self.root:
            p = Path(self.root) / p
        return p

    def load_image(self, entry: ManifestEntry) -> AnnotatedImage:
        """Read an entry's pixels as float32 in [0, 1] with its annotations."""
        path = self.resolve_path(entry.image)
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return AnnotatedImage(image_id=entry.image, pixels=arr, annotations=entry.objects)

    def instance_counts(self) -> dict[int, int]:
        counts = {cid: 0 for cid in self.class_names.values()}
        for entry in self.entries:
            for ann in entry.objects:
                counts[ann.class_id] += 1
        return counts


def build_class_map(names) -> dict[str, int]:
    """Assign contiguous ids from 1 in sorted name order."""
    return {name: i + 1 for i, name in enumerate(sorted(set(names)))}


def manifest_from_records(records, root: str = "") -> DatasetManifest:
    """Build a manifest from parsed {image, width, height, objects} records.

    Object records carry class *names*; the id mapping is derived from the
    sorted set of names so that any two loads of the same data agree.
    """
    names = [obj["class"] for rec in records for obj in rec["objects"]]
    class_map = build_class_map(names)
    entries = []
    for rec in sorted(records, key=lambda r: r["image"]):
        objects = []
        difficult = []
        for obj in rec["objects"]:
            box = BoundingBox(u=float(obj["u"]), v=float(obj["v"]),
                              w=float(obj["w"]), h=float(obj["h"]))
            objects.append(Annotation(box=box, class_id=class_map[obj["class"]]))
            difficult.append(bool(obj.get("difficult", False)))
        entries.append(ManifestEntry(
            image=rec["image"],
            width=int(rec["width"]),
            height=int(rec["height"]),
            objects=tuple(objects),
            difficult=tuple(difficult) if any(difficult) else None,
        ))
    return DatasetManifest(entries=tuple(entries), class_names=class_map, root=root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write one JSON record per line; paths stay as stored."""
    path = Path(path)
    id_to_name = manifest.id_to_name()
    with path.open("w") as fh:
        for entry in manifest.entries:
            objects = []
            for i, ann in enumerate(entry.objects):
                obj = {
                    "class": id_to_name[ann.class_id],
                    "u": ann.box.u, "v": ann.box.v,
                    "w": ann.box.w, "h": ann.box.h,
                }
                if entry.difficult is not None and entry.difficult[i]:
                    obj["difficult"] = True
                objects.append(obj)
            rec = {"image": entry.image, "width": entry.width,
                   "height": entry.height, "objects": objects}
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Read a JSONL manifest; image paths resolve relative to its directory."""
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            for key in ("image", "width", "height", "objects"):
                if key not in rec:
                    raise ManifestError(f"{path}:{lineno}: record missing '{key}'")
            records.append(rec)
    return manifest_from_records(records, root=str(path.parent))


def check_manifest(source) -> DatasetManifest:
    """Coerce a manifest argument: accept a DatasetManifest or a path."""
    if isinstance(source, DatasetManifest):
        return source
    if isinstance(source, (str, Path)):
        return load_manifest(source)
    raise ManifestError(f"cannot interpret {type(source).__name__} as a manifest")
