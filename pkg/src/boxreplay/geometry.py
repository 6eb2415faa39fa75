"""Box and image primitives shared by every other module.

Boxes use continuous (u, v, w, h) pixel coordinates with (u, v) the top-left
corner. Pixel arrays are H x W x 3 float arrays with intensities in [0, 1].
All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid boxes, annotations or out-of-bounds crops."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner (u, v), positive width/height."""

    u: float
    v: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box needs positive size, got w={self.w}, h={self.h}")
        if self.u < 0 or self.v < 0:
            raise GeometryError(f"box corner must be non-negative, got ({self.u}, {self.v})")
        for name in ("u", "v", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"box field {name} is not finite")

    @property
    def u2(self) -> float:
        return self.u + self.w

    @property
    def v2(self) -> float:
        return self.v + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def pixel_rect(self) -> tuple[int, int, int, int]:
        """Smallest integer rectangle (u0, v0, u1, v1) enclosing the box."""
        return (
            int(math.floor(self.u)),
            int(math.floor(self.v)),
            int(math.ceil(self.u2)),
            int(math.ceil(self.v2)),
        )

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.u, self.v, self.u2, self.v2)


@dataclass(frozen=True)
class Annotation:
    """One labelled box. Class ids start at 1; id 0 is reserved for background."""

    box: BoundingBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise GeometryError(f"class_id must be >= 1, got {self.class_id}")


@dataclass(frozen=True)
class AnnotatedImage:
    """An image with its visible annotations.

    `pixels` is H x W x 3 float32 in [0, 1]; the array is marked read-only on
    construction. Every annotation box must lie fully inside the image.
    """

    image_id: str
    pixels: np.ndarray = field(repr=False)
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise GeometryError(f"pixels must be HxWx3, got shape {px.shape}")
        px.setflags(write=False)
        h, w = px.shape[:2]
        for ann in self.annotations:
            if ann.box.u2 > w + 1e-6 or ann.box.v2 > h + 1e-6:
                raise GeometryError(
                    f"annotation box {ann.box} exceeds image bounds {w}x{h}"
                )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.u2, b.u2) - max(a.u, b.u)
    iy = min(a.v2, b.v2) - max(a.v, b.v)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def crop_pixels(pixels: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Cut the enclosing integer rectangle of `box` out of a pixel array.

    No resampling: output pixel (i, j) equals the input pixel at
    (v0 + i, u0 + j). Raises if the rectangle leaves the array.
    """
    h, w = pixels.shape[:2]
    u0, v0, u1, v1 = box.pixel_rect()
    if u0 < 0 or v0 < 0 or u1 > w or v1 > h:
        raise GeometryError(f"crop rectangle ({u0},{v0})-({u1},{v1}) outside {w}x{h} image")
    return pixels[v0:v1, u0:u1].copy()


def crop(image: AnnotatedImage, box: BoundingBox) -> np.ndarray:
    """Crop a box out of an annotated image; see `crop_pixels`."""
    return crop_pixels(image.pixels, box)
