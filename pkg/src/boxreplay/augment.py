"""Replay-time composition of stored box crops into training samples.

Two composition modes plus a scheduler:

* mixup: alpha-blend up to two crops into the current image at random spots
  that keep clear of the image's own groundtruth boxes; the image keeps its
  labels and gains the crops' old-class labels.
* mosaic: replace the sample entirely by four crops placed in the quadrants
  around a random center on a flat canvas.

Every composed sample carries a trace of the random draws (lambda, mu,
placements, center) sufficient to replay the exact pixel arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import Annotation, AnnotatedImage, BoundingBox, iou

REPLAY_KINDS = ("mixup", "mosaic", "new")

_PLACEMENT_RETRIES = 10
_MIN_MOSAIC_SIDE = 8


class AugmentError(ValueError):
    """Raised for invalid composition inputs."""


@dataclass(frozen=True)
class MixupParams:
    lambda_beta_shape: tuple = (1.0, 1.0)
    overlap_threshold: float = 0.2
    max_boxes: int = 2

    def __post_init__(self):
        a, b = self.lambda_beta_shape
        if a <= 0 or b <= 0:
            raise AugmentError(f"beta shape must be positive, got {(a, b)}")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise AugmentError(
                f"overlap threshold must lie in [0, 1], got {self.overlap_threshold}")
        if self.max_boxes < 1:
            raise AugmentError(f"max_boxes must be >= 1, got {self.max_boxes}")


@dataclass(frozen=True)
class ComposedSample:
    """One training sample after replay composition.

    `groundtruth` holds the current task's labels, `replayed` the boxes
    contributed by the buffer; `trace` records the composition's random
    draws so the pixels can be recomputed exactly.
    """

    pixels: np.ndarray = field(repr=False)
    groundtruth: tuple
    replayed: tuple
    replay_kind: str
    trace: tuple = ()

    def __post_init__(self):
        if self.replay_kind not in REPLAY_KINDS:
            raise AugmentError(f"unknown replay kind '{self.replay_kind}'")
        self.pixels.setflags(write=False)
        h, w = self.pixels.shape[:2]
        for ann in self.annotations:
            if ann.box.u2 > w + 1e-6 or ann.box.v2 > h + 1e-6:
                raise AugmentError(f"annotation {ann.box} outside {w}x{h} canvas")

    @property
    def annotations(self) -> tuple:
        return self.groundtruth + self.replayed


def plain_sample(image: AnnotatedImage) -> ComposedSample:
    """Pass-through wrapper for a sample trained without replay."""
    return ComposedSample(pixels=image.pixels, groundtruth=tuple(image.annotations),
                          replayed=(), replay_kind="new")


def mixup_replay(image: AnnotatedImage, candidates, params: MixupParams,
                 rng) -> ComposedSample:
    """Blend buffer crops into the image at low-overlap random positions.

    Candidates are tried in order until `max_boxes` are accepted. A placement
    is accepted only when its box overlaps every original groundtruth box
    with IoU at most the threshold; placement retries are bounded, and crops
    larger than the image are skipped. Accepted crop k replaces the covered
    rectangle R with lambda_k * R + (1 - lambda_k) * crop, lambda_k drawn
    fresh from the Beta law per crop.
    """
    height, width = image.pixels.shape[:2]
    out = image.pixels.astype(np.float32, copy=True)
    replayed = []
    trace = []
    a, b = params.lambda_beta_shape
    for exemplar in candidates:
        if len(replayed) >= params.max_boxes:
            break
        eh, ew = exemplar.pixels.shape[:2]
        if ew > width or eh > height:
            continue
        placed = None
        for _ in range(_PLACEMENT_RETRIES):
            u = int(rng.integers(0, width - ew + 1))
            v = int(rng.integers(0, height - eh + 1))
            box = BoundingBox(u=u, v=v, w=ew, h=eh)
            worst = max((iou(ann.box, box) for ann in image.annotations),
                        default=0.0)
            if worst <= params.overlap_threshold:
                placed = (u, v, box)
                break
        if placed is None:
            continue
        u, v, box = placed
        lam = float(rng.beta(a, b))
        region = out[v:v + eh, u:u + ew]
        out[v:v + eh, u:u + ew] = lam * region + (1.0 - lam) * exemplar.pixels
        replayed.append(Annotation(box=box, class_id=exemplar.class_id))
        trace.append({"kind": "mixup", "lambda": lam, "u": u, "v": v,
                      "w": ew, "h": eh, "class": exemplar.class_id})
    return ComposedSample(pixels=out, groundtruth=tuple(image.annotations),
                          replayed=tuple(replayed), replay_kind="mixup",
                          trace=tuple(trace))


def _mosaic_scale(ew: int, eh: int, quadrant_w: int, quadrant_h: int,
                  mu: float, canvas_w: int, canvas_h: int) -> tuple:
    """Resized (width, height) for one mosaic tile.

    The longer side targets mu times half the canvas's matching dimension,
    aspect preserved; the scale then shrinks to fit the quadrant and grows
    back just enough to keep both sides at the 8 px minimum.
    """
    if ew >= eh:
        scale = (mu * canvas_w / 2.0) / ew
    else:
        scale = (mu * canvas_h / 2.0) / eh
    scale = min(scale, quadrant_w / ew, quadrant_h / eh)
    scale = max(scale, _MIN_MOSAIC_SIDE / ew, _MIN_MOSAIC_SIDE / eh)
    return max(int(round(ew * scale)), _MIN_MOSAIC_SIDE), \
        max(int(round(eh * scale)), _MIN_MOSAIC_SIDE)


def mosaic_replay(image: AnnotatedImage, exemplars, mu_range=(0.4, 0.6),
                  fill_value: float = 0.5, rng=None) -> ComposedSample:
    """Compose four crops in the quadrants around a random center.

    The canvas matches the input image's size but none of its pixels or
    labels survive; the four resized crops anchor at the center point (one
    per quadrant, in top-left, top-right, bottom-left, bottom-right order)
    and everything else is the fill color. Output annotations are exactly
    the four placed boxes.
    """
    exemplars = list(exemplars)
    if len(exemplars) != 4:
        raise AugmentError(f"mosaic needs exactly 4 exemplars, got {len(exemplars)}")
    lo, hi = float(mu_range[0]), float(mu_range[1])
    if not 0.0 < lo <= hi:
        raise AugmentError(f"bad mu range {mu_range}")
    height, width = image.pixels.shape[:2]
    out = np.full((height, width, 3), np.float32(fill_value), dtype=np.float32)

    cx = int(round(width * rng.uniform(0.25, 0.75)))
    cy = int(round(height * rng.uniform(0.25, 0.75)))
    # quadrant extents: (width, height) of TL, TR, BL, BR
    quadrants = ((cx, cy), (width - cx, cy), (cx, height - cy),
                 (width - cx, height - cy))

    replayed = []
    trace = [{"kind": "mosaic", "center": (cx, cy), "fill": float(fill_value)}]
    for k, exemplar in enumerate(exemplars):
        qw, qh = quadrants[k]
        eh, ew = exemplar.pixels.shape[:2]
        mu = float(rng.uniform(lo, hi))
        nw, nh = _mosaic_scale(ew, eh, qw, qh, mu, width, height)
        resized = cv2.resize(exemplar.pixels, (nw, nh),
                             interpolation=cv2.INTER_LINEAR)
        # anchor at the center point, growing outward into quadrant k
        u = cx - nw if k in (0, 2) else cx
        v = cy - nh if k in (0, 1) else cy
        # extreme aspect ratios can defeat the quadrant fit; clip to stay disjoint
        u0, v0 = max(u, 0), max(v, 0)
        u1, v1 = min(u + nw, width), min(v + nh, height)
        out[v0:v1, u0:u1] = resized[v0 - v:v1 - v, u0 - u:u1 - u]
        box = BoundingBox(u=u0, v=v0, w=u1 - u0, h=v1 - v0)
        replayed.append(Annotation(box=box, class_id=exemplar.class_id))
        trace.append({"kind": "tile", "quadrant": k, "mu": mu,
                      "placement": (u0, v0, u1 - u0, v1 - v0),
                      "class": exemplar.class_id})
    return ComposedSample(pixels=out, groundtruth=(), replayed=tuple(replayed),
                          replay_kind="mosaic", trace=tuple(trace))


def choose_replay_type(rng, ratio=(1, 1, 2)) -> str:
    """Draw mixup / mosaic / new with probabilities proportional to `ratio`."""
    weights = np.asarray(ratio, dtype=np.float64)
    if weights.shape != (3,) or (weights < 0).any() or weights.sum() <= 0:
        raise AugmentError(f"ratio must be three nonnegative weights, got {ratio}")
    return str(rng.choice(REPLAY_KINDS, p=weights / weights.sum()))


def render_preview(sample: ComposedSample, path) -> None:
    """Write the sample with groundtruth (green) and replayed (red) boxes."""
    from PIL import Image, ImageDraw

    arr = np.clip(np.rint(sample.pixels * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(im)
    for ann in sample.groundtruth:
        draw.rectangle(ann.box.as_xyxy(), outline=(0, 255, 0))
    for ann in sample.replayed:
        draw.rectangle(ann.box.as_xyxy(), outline=(255, 0, 0))
    im.save(path)
