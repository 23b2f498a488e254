"""Anatomical region boxes (teeth / skull / spine) and region masking.

Coordinates: origin at the upper-left pixel, x to the right, y downwards.
Boxes are half-open pixel ranges [x1, x2) x [y1, y2).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .imaging import ImageBuffer
from .manifest import Orientation

REGION_OFFSET = 100


class Part(str, enum.Enum):
    A = "A"  # teeth
    B = "B"  # skull
    C = "C"  # cervical spine


@dataclass(frozen=True)
class RegionBox:
    part: Part
    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def upper_left(self) -> tuple[int, int]:
        return (self.x1, self.y1)

    @property
    def lower_right(self) -> tuple[int, int]:
        return (self.x2, self.y2)

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1


def partition_boxes(width: int, height: int, orientation=Orientation.LEFT, offset: int = REGION_OFFSET) -> dict[Part, RegionBox]:
    """Boxes A, B, C for a ``width`` x ``height`` image.

    For a left-facing image: A spans (0, H/2-o)..(2W/3+o, H), B spans
    (0, 0)..(W, H/2+o), C spans (2W/3-o, H/2-o)..(W, H). Right-facing images
    get the horizontal mirror. Fractions are floored and every coordinate is
    clamped into the image.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image extents must be positive, got {width}x{height}")
    orientation = Orientation(orientation)
    W, H = width, height
    raw = {
        Part.A: (0, H / 2 - offset, 2 * W / 3 + offset, H),
        Part.B: (0, 0, W, H / 2 + offset),
        Part.C: (2 * W / 3 - offset, H / 2 - offset, W, H),
    }
    clamped = False
    boxes = {}
    for part, (x1, y1, x2, y2) in raw.items():
        fx1, fy1, fx2, fy2 = (math.floor(v) for v in (x1, y1, x2, y2))
        cx1, cx2 = min(max(fx1, 0), W), min(max(fx2, 0), W)
        cy1, cy2 = min(max(fy1, 0), H), min(max(fy2, 0), H)
        clamped |= (cx1, cy1, cx2, cy2) != (fx1, fy1, fx2, fy2)
        if orientation is Orientation.RIGHT:
            cx1, cx2 = W - cx2, W - cx1
        boxes[part] = RegionBox(part, cx1, cy1, cx2, cy2)
    if clamped:
        warnings.warn(
            f"{W}x{H} image is too small for the +/-{offset} px region offsets; boxes clamped",
            stacklevel=2,
        )
    return boxes


def crop_regions(img: ImageBuffer, boxes: dict[Part, RegionBox], parts) -> ImageBuffer:
    """One part: the cropped box. Several parts: full canvas, zero outside their union."""
    parts = [Part(p) for p in parts]
    if not parts:
        raise ValueError("at least one part is required")
    if len(parts) == 1:
        b = boxes[parts[0]]
        return ImageBuffer(img.pixels[b.y1 : b.y2, b.x1 : b.x2].copy(), img.source_bit_depth)
    mask = region_mask(img.width, img.height, boxes, parts)
    return ImageBuffer(np.where(mask, img.pixels, 0.0), img.source_bit_depth)


def region_mask(width: int, height: int, boxes: dict[Part, RegionBox], parts) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for p in parts:
        b = boxes[Part(p)]
        mask[b.y1 : b.y2, b.x1 : b.x2] = True
    return mask


def ablation_label(parts) -> str:
    """Report label in the PAR.A / PAR.A+B style."""
    names = sorted(Part(p).value for p in parts)
    return "PAR." + "+".join(names)


def parse_parts(text: str) -> list[Part]:
    """Parse ``"A"``, ``"A+C"`` or ``"A,C"`` into parts."""
    tokens = [t for t in text.replace(",", "+").split("+") if t.strip()]
    parts = [Part(t.strip().upper()) for t in tokens]
    if not parts or len(set(parts)) != len(parts):
        raise ValueError(f"invalid part selection {text!r}")
    return parts
