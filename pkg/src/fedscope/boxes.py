"""Axis-aligned boxes, IoU, COCO size buckets and the per-image text format.

Coordinates are in pixels, corner format ``(x_min, y_min, x_max, y_max)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ._errors import FedscopeError

DEFAULT_NUM_CLASSES = 5
CLASS_NAMES = ("button", "resistor", "led", "arduino", "buzzer")

# COCO area limits (pixels^2); `scale` shrinks the side lengths for small images.
SMALL_SIDE = 32.0
MEDIUM_SIDE = 96.0
BUCKETS = ("small", "medium", "large")


@dataclass(frozen=True)
class BoundingBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: Optional[float] = None

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise FedscopeError(
                "degenerate-box",
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})",
            )
        if self.class_id < 0:
            raise FedscopeError("bad-class", str(self.class_id))
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise FedscopeError("bad-confidence", str(self.confidence))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def scaled(self, factor: float) -> "BoundingBox":
        return replace(
            self,
            x_min=self.x_min * factor,
            y_min=self.y_min * factor,
            x_max=self.x_max * factor,
            y_max=self.y_max * factor,
        )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in ``[0, 1]``."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays.

    Uses the same operation order as :func:`iou`, so entries are bit-identical
    to the scalar version.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(overlap, inter / union, 0.0)
    return out


def bucket_limits(scale: float = 1.0) -> tuple[float, float]:
    """Area limits ``(small_max, medium_max)`` for a side-length ``scale``."""
    return (SMALL_SIDE * scale) ** 2, (MEDIUM_SIDE * scale) ** 2


def size_bucket(b: BoundingBox, scale: float = 1.0) -> str:
    small_max, medium_max = bucket_limits(scale)
    area = b.area
    if area < small_max:
        return "small"
    if area < medium_max:
        return "medium"
    return "large"


def boxes_to_arrays(boxes: Sequence[BoundingBox]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split boxes into ``(coords (N,4), class_ids (N,), confidences (N,))``.

    Ground truth (no confidence) gets confidence 1.
    """
    n = len(boxes)
    coords = np.empty((n, 4))
    cls = np.empty(n, dtype=np.int64)
    conf = np.empty(n)
    for i, b in enumerate(boxes):
        coords[i] = (b.x_min, b.y_min, b.x_max, b.y_max)
        cls[i] = b.class_id
        conf[i] = 1.0 if b.confidence is None else b.confidence
    return coords, cls, conf


# -- interchange text format -------------------------------------------------
# one line per box: "class_id [conf] x_min y_min x_max y_max"


def format_boxes(boxes: Iterable[BoundingBox]) -> str:
    lines = []
    for b in boxes:
        fields = [str(b.class_id)]
        if b.confidence is not None:
            fields.append(repr(float(b.confidence)))
        fields += [repr(float(v)) for v in (b.x_min, b.y_min, b.x_max, b.y_max)]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_boxes(text: str) -> list[BoundingBox]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) == 5:
            cls, x0, y0, x1, y1 = fields
            conf = None
        elif len(fields) == 6:
            cls, conf, x0, y0, x1, y1 = fields
            conf = float(conf)
        else:
            raise FedscopeError("bad-label-line", f"line {lineno}: {line!r}")
        out.append(BoundingBox(int(cls), float(x0), float(y0), float(x1), float(y1), conf))
    return out


def write_boxes(path, boxes: Iterable[BoundingBox]) -> None:
    Path(path).write_text(format_boxes(boxes))


def read_boxes(path) -> list[BoundingBox]:
    return parse_boxes(Path(path).read_text())


def to_yolo_line(b: BoundingBox, width: int, height: int) -> str:
    cx, cy = b.center
    vals = (cx / width, cy / height, b.width / width, b.height / height)
    return f"{b.class_id} " + " ".join(repr(float(v)) for v in vals)


def from_yolo_line(line: str, width: int, height: int) -> BoundingBox:
    cls, cx, cy, w, h = line.split()
    cx, cy = float(cx) * width, float(cy) * height
    w, h = float(w) * width, float(h) * height
    return BoundingBox(int(cls), cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def is_finite_box(b: BoundingBox) -> bool:
    return all(math.isfinite(v) for v in (b.x_min, b.y_min, b.x_max, b.y_max))
