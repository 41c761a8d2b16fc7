"""Input checks shared by the estimators and training functions."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ._errors import FedscopeError
from .boxes import BoundingBox
from .nn import check_input_shape


def check_images(X) -> np.ndarray:
    """Return ``X`` as a float ``(N, H, W, 3)`` array with values in ``[0, 1]``."""
    if isinstance(X, (list, tuple)):
        if len(X) == 0:
            return np.zeros((0, 8, 8, 3))
        X = np.stack([np.asarray(x, dtype=float) for x in X])
    X = check_input_shape(X)
    if not np.isfinite(X).all() or X.min(initial=0.0) < 0.0 or X.max(initial=0.0) > 1.0:
        raise FedscopeError("bad-pixel-values", "image values must be finite and within [0, 1]")
    return X


def check_annotations(y: Sequence[Sequence[BoundingBox]], n_classes: int, image_hw: tuple[int, int]) -> None:
    height, width = image_hw
    for i, boxes in enumerate(y):
        for b in boxes:
            if not isinstance(b, BoundingBox):
                raise FedscopeError("bad-annotation", f"image {i}: expected BoundingBox, got {type(b).__name__}")
            if b.class_id >= n_classes:
                raise FedscopeError("bad-class", f"image {i}: class {b.class_id} >= {n_classes}")
            cx, cy = b.center
            if not (0.0 <= cx <= width and 0.0 <= cy <= height):
                raise FedscopeError("gt-outside-image", f"image {i}: center ({cx}, {cy})")


def as_dataset(samples) -> tuple[np.ndarray, list[list[BoundingBox]]]:
    """Split samples (objects with ``image``/``annotations`` or pairs) into arrays."""
    images, annotations = [], []
    for s in samples:
        if hasattr(s, "image"):
            images.append(s.image)
            annotations.append(list(s.annotations))
        else:
            img, boxes = s
            images.append(img)
            annotations.append(list(boxes))
    return check_images(images), annotations
