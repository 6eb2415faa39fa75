"""Deterministic synthetic shapes dataset for desk-scale detection runs.

Images are flat dark backgrounds with 1..4 solid colored shapes drawn from
hard-edged boolean masks (no anti-aliasing), so ground-truth boxes measured
from the masks are exact and PNG round-trips are bit-identical. Image k is
anchored with one object of class k mod num_classes, which guarantees every
class appears and spreads classes across images; extra objects of random
classes create the mixed-class images an incremental protocol needs.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BoundingBox, iou
from .manifest import DatasetManifest, manifest_from_records, save_manifest

_MIN_IMAGE_SIZE = 32
_MAX_OVERLAP = 0.2
_PLACEMENT_TRIES = 12


def _disc(dx, dy, r):
    return dx * dx + dy * dy <= r * r


def _square(dx, dy, r):
    return (np.abs(dx) <= r) & (np.abs(dy) <= r)


def _diamond(dx, dy, r):
    return np.abs(dx) + np.abs(dy) <= r


def _ring(dx, dy, r):
    inner = max(1, int(r * 0.55))
    d2 = dx * dx + dy * dy
    return (d2 <= r * r) & (d2 >= inner * inner)


def _cross(dx, dy, r):
    arm = max(1, r // 3)
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
        (np.abs(dy) <= arm) & (np.abs(dx) <= r)
    )


def _frame(dx, dy, r):
    border = max(2, r // 3)
    outer = np.maximum(np.abs(dx), np.abs(dy))
    return (outer <= r) & (outer >= r - border)


def _triangle_up(dx, dy, r):
    # halfwidth grows linearly from apex (top) to base (bottom)
    halfwidth = (dy + r) / 2.0
    return (np.abs(dy) <= r) & (np.abs(dx) <= halfwidth)


def _triangle_down(dx, dy, r):
    halfwidth = (r - dy) / 2.0
    return (np.abs(dy) <= r) & (np.abs(dx) <= halfwidth)


SHAPE_KINDS = (
    ("disc", _disc),
    ("square", _square),
    ("diamond", _diamond),
    ("ring", _ring),
    ("cross", _cross),
    ("frame", _frame),
    ("triup", _triangle_up),
    ("tridown", _triangle_down),
)


def class_name(class_index: int, num_classes: int) -> str:
    """Stable name whose lexicographic order matches the class index order."""
    kind = SHAPE_KINDS[class_index % len(SHAPE_KINDS)][0]
    return f"c{class_index:02d}_{kind}"


def class_color(class_index: int, num_classes: int) -> tuple[int, int, int]:
    hue = class_index / max(num_classes, 1)
    rgb = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return tuple(int(round(255 * v)) for v in rgb)


def _mask_box(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(
        u=float(cols[0]),
        v=float(rows[0]),
        w=float(cols[-1] - cols[0] + 1),
        h=float(rows[-1] - rows[0] + 1),
    )


def _draw_object(pixels, rng, class_index, num_classes, existing_boxes):
    """Place one shape, keeping IoU with earlier boxes small. None if no room."""
    size = pixels.shape[0]
    r_lo = max(4, int(round(size * 0.08)))
    r_hi = max(r_lo + 1, int(round(size * 0.16)))
    _, raster = SHAPE_KINDS[class_index % len(SHAPE_KINDS)]
    for _ in range(_PLACEMENT_TRIES):
        r = int(rng.integers(r_lo, r_hi + 1))
        cx = int(rng.integers(r + 1, size - r - 1))
        cy = int(rng.integers(r + 1, size - r - 1))
        candidate = BoundingBox(u=cx - r, v=cy - r, w=2 * r + 1, h=2 * r + 1)
        if any(iou(candidate, b) > _MAX_OVERLAP for b in existing_boxes):
            continue
        ys = np.arange(size, dtype=np.int64)[:, None]
        xs = np.arange(size, dtype=np.int64)[None, :]
        mask = raster(xs - cx, ys - cy, r)
        pixels[mask] = class_color(class_index, num_classes)
        return _mask_box(mask)
    return None


def render_image(image_index: int, num_classes: int, size: int, seed: int):
    """One deterministic image: uint8 HxWx3 pixels plus its object records."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, image_index]))
    background = int(rng.integers(24, 40))
    pixels = np.full((size, size, 3), background, dtype=np.uint8)

    classes = [image_index % num_classes]
    classes += [int(c) for c in rng.integers(0, num_classes, size=int(rng.integers(0, 4)))]

    boxes = []
    objects = []
    for class_index in classes:
        box = _draw_object(pixels, rng, class_index, num_classes, boxes)
        if box is None:
            continue
        boxes.append(box)
        objects.append({
            "class": class_name(class_index, num_classes),
            "u": box.u, "v": box.v, "w": box.w, "h": box.h,
        })
    return pixels, objects


def generate_shapes_dataset(
    out_dir,
    num_classes: int = 8,
    images_per_class: int = 12,
    image_size: int = 64,
    seed: int = 0,
) -> DatasetManifest:
    """Write PNGs plus a manifest and return the loaded manifest.

    The same arguments always produce byte-identical files.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if images_per_class < 1:
        raise ValueError(f"need at least 1 image per class, got {images_per_class}")
    if image_size < _MIN_IMAGE_SIZE:
        raise ValueError(
            f"image_size {image_size} is below the minimum {_MIN_IMAGE_SIZE}; "
            "shapes would not fit"
        )

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    records = []
    total = num_classes * images_per_class
    for idx in range(total):
        pixels, objects = render_image(idx, num_classes, image_size, seed)
        rel = f"images/{idx:05d}.png"
        Image.fromarray(pixels).save(out_dir / rel)
        records.append({
            "image": rel,
            "width": image_size,
            "height": image_size,
            "objects": objects,
        })

    manifest = manifest_from_records(records, root=str(out_dir))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
