"""Detection metrics: greedy matching, PR curves, COCO and PASCAL AP.

All reductions go through :func:`math.fsum`, which is correctly rounded and
therefore independent of summation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from ._errors import FedscopeError
from .boxes import BUCKETS, BoundingBox, bucket_limits, iou_matrix

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_SAMPLES = tuple(i / 100 for i in range(101))
DEFAULT_BACKGROUND_CONF = 0.25


@dataclass
class MatchResult:
    """Outcome of matching one set of predictions against ground truth.

    Arrays are in prediction input order. ``ignored`` predictions (matched to an
    out-of-bucket ground truth, or unmatched and themselves out of bucket) are
    dropped from PR accumulation.
    """

    iou_threshold: float
    scores: np.ndarray
    tp: np.ndarray
    ignored: np.ndarray
    gt_matched: np.ndarray
    matched_gt: np.ndarray = field(default=None)

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp & ~self.ignored

    @classmethod
    def concat(cls, results: Sequence["MatchResult"], iou_threshold: float) -> "MatchResult":
        if not results:
            empty = np.zeros(0, dtype=bool)
            return cls(iou_threshold, np.zeros(0), empty, empty, empty, np.zeros(0, dtype=np.int64))
        return cls(
            iou_threshold,
            np.concatenate([r.scores for r in results]),
            np.concatenate([r.tp for r in results]),
            np.concatenate([r.ignored for r in results]),
            np.concatenate([r.gt_matched for r in results]),
            np.concatenate([r.matched_gt for r in results]),
        )


def _confidence_order(scores: np.ndarray) -> np.ndarray:
    # stable: equal scores keep input order
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def _match_arrays(
    pred_xyxy: np.ndarray,
    scores: np.ndarray,
    gt_xyxy: np.ndarray,
    iou_threshold: float,
    gt_ignore: Optional[np.ndarray] = None,
    pred_ignore: Optional[np.ndarray] = None,
    ious: Optional[np.ndarray] = None,
) -> MatchResult:
    n_pred, n_gt = len(scores), len(gt_xyxy)
    tp = np.zeros(n_pred, dtype=bool)
    ignored = np.zeros(n_pred, dtype=bool)
    matched_gt = np.full(n_pred, -1, dtype=np.int64)
    gt_matched = np.zeros(n_gt, dtype=bool)
    if gt_ignore is None:
        gt_ignore = np.zeros(n_gt, dtype=bool)
    if n_pred and n_gt:
        if ious is None:
            ious = iou_matrix(pred_xyxy, gt_xyxy)
        for p in _confidence_order(scores):
            best = -1
            # non-ignored ground truth first; then ignored as a fallback
            for pool in (~gt_ignore, gt_ignore):
                cand = np.flatnonzero(pool & ~gt_matched & (ious[p] >= iou_threshold))
                if cand.size:
                    # argmax returns the first (lowest index) maximum
                    best = int(cand[np.argmax(ious[p, cand])])
                    break
            if best >= 0:
                gt_matched[best] = True
                matched_gt[p] = best
                if gt_ignore[best]:
                    ignored[p] = True
                else:
                    tp[p] = True
    if pred_ignore is not None:
        ignored |= pred_ignore & (matched_gt < 0)
    return MatchResult(iou_threshold, np.asarray(scores, dtype=float), tp, ignored, gt_matched, matched_gt)


def match_detections(
    preds: Sequence[BoundingBox], gts: Sequence[BoundingBox], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy COCO-style matching of same-class predictions to ground truth.

    Predictions are visited by confidence (descending, ties by input index);
    each claims the unmatched same-class ground truth of highest IoU at or
    above ``iou_threshold``, lower ground-truth index winning IoU ties.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise FedscopeError("bad-iou-threshold", str(iou_threshold))
    n_pred, n_gt = len(preds), len(gts)
    scores = np.array([1.0 if p.confidence is None else p.confidence for p in preds], dtype=float)
    pred_xyxy = np.array([p.as_array() for p in preds]).reshape(n_pred, 4)
    gt_xyxy = np.array([g.as_array() for g in gts]).reshape(n_gt, 4)
    ious = iou_matrix(pred_xyxy, gt_xyxy)
    same = np.array([[p.class_id == g.class_id for g in gts] for p in preds], dtype=bool).reshape(n_pred, n_gt)
    ious = np.where(same, ious, -1.0)
    return _match_arrays(pred_xyxy, scores, gt_xyxy, iou_threshold, ious=ious)


def pr_curve(matches: MatchResult, num_gt: int) -> list[tuple[float, float]]:
    """Cumulative ``(recall, precision)`` points in confidence-descending order."""
    if num_gt < 0:
        raise FedscopeError("bad-num-gt", str(num_gt))
    keep = ~matches.ignored
    scores = matches.scores[keep]
    tp = matches.tp[keep][_confidence_order(scores)]
    curve = []
    tp_cum = fp_cum = 0
    for is_tp in tp:
        if is_tp:
            tp_cum += 1
        else:
            fp_cum += 1
        recall = tp_cum / num_gt if num_gt else 0.0
        curve.append((recall, tp_cum / (tp_cum + fp_cum)))
    return curve


def _envelope(precision: Sequence[float]) -> list[float]:
    env = list(precision)
    for i in range(len(env) - 2, -1, -1):
        if env[i + 1] > env[i]:
            env[i] = env[i + 1]
    return env


def ap_coco(curve: Sequence[tuple[float, float]]) -> float:
    """101-point interpolated AP (COCO)."""
    if not curve:
        return 0.0
    recall = np.array([r for r, _ in curve])
    env = _envelope([p for _, p in curve])
    idx = np.searchsorted(recall, RECALL_SAMPLES, side="left")
    samples = [env[i] if i < len(env) else 0.0 for i in idx]
    return math.fsum(samples) / len(RECALL_SAMPLES)


def ap_pascal(curve: Sequence[tuple[float, float]]) -> float:
    """All-point interpolated AP (VOC 2010+): area under the precision envelope."""
    if not curve:
        return 0.0
    recall = [0.0] + [r for r, _ in curve] + [1.0]
    env = _envelope([0.0] + [p for _, p in curve] + [0.0])
    return math.fsum(
        (recall[i + 1] - recall[i]) * env[i + 1]
        for i in range(len(recall) - 1)
        if recall[i + 1] != recall[i]
    )


@dataclass
class EvalReport:
    """One row of a comparison table. ``nan`` marks an undefined AP."""

    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    map_pascal: float
    background_fp: int

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def count_background_fp(
    preds: Sequence[Sequence[BoundingBox]] | Sequence[BoundingBox],
    conf_threshold: float = DEFAULT_BACKGROUND_CONF,
) -> int:
    """Predictions at or above ``conf_threshold`` on background-only images."""
    count = 0
    for item in preds:
        group = [item] if isinstance(item, BoundingBox) else item
        count += sum(1 for b in group if b.confidence is not None and b.confidence >= conf_threshold)
    return count


def _aligned(preds, gts) -> tuple[list, list]:
    if isinstance(gts, Mapping) or isinstance(preds, Mapping):
        if not (isinstance(gts, Mapping) and isinstance(preds, Mapping)) or set(gts) != set(preds):
            raise FedscopeError("misaligned-images", "prediction and ground-truth image ids differ")
        keys = sorted(gts)
        return [list(preds[k]) for k in keys], [list(gts[k]) for k in keys]
    if len(preds) != len(gts):
        raise FedscopeError("misaligned-images", f"{len(preds)} prediction lists vs {len(gts)} ground-truth lists")
    return [list(p) for p in preds], [list(g) for g in gts]


class _ClassImage:
    """Per (image, class) arrays with IoUs computed once."""

    __slots__ = ("pred_xyxy", "scores", "gt_xyxy", "pred_area", "gt_area", "ious")

    def __init__(self, preds: list[BoundingBox], gts: list[BoundingBox]):
        self.pred_xyxy = np.array([p.as_array() for p in preds]).reshape(len(preds), 4)
        self.scores = np.array([p.confidence for p in preds], dtype=float)
        self.gt_xyxy = np.array([g.as_array() for g in gts]).reshape(len(gts), 4)
        self.pred_area = np.array([p.area for p in preds], dtype=float)
        self.gt_area = np.array([g.area for g in gts], dtype=float)
        self.ious = iou_matrix(self.pred_xyxy, self.gt_xyxy)


def _bucket_mask(area: np.ndarray, bucket: Optional[str], scale: float) -> np.ndarray:
    if bucket is None:
        return np.ones(area.shape, dtype=bool)
    small_max, medium_max = bucket_limits(scale)
    lo, hi = {"small": (0.0, small_max), "medium": (small_max, medium_max), "large": (medium_max, math.inf)}[bucket]
    return (area >= lo) & (area < hi)


def _class_ap(
    items: list[_ClassImage], iou_threshold: float, bucket: Optional[str], scale: float, pascal: bool = False
) -> Optional[float]:
    """AP for one class at one threshold; ``None`` when the class has no ground truth."""
    results, num_gt = [], 0
    for it in items:
        in_gt = _bucket_mask(it.gt_area, bucket, scale)
        num_gt += int(in_gt.sum())
        results.append(
            _match_arrays(
                it.pred_xyxy,
                it.scores,
                it.gt_xyxy,
                iou_threshold,
                gt_ignore=~in_gt,
                pred_ignore=~_bucket_mask(it.pred_area, bucket, scale),
                ious=it.ious,
            )
        )
    if num_gt == 0:
        return None
    curve = pr_curve(MatchResult.concat(results, iou_threshold), num_gt)
    return ap_pascal(curve) if pascal else ap_coco(curve)


def _mean(values: list[Optional[float]]) -> float:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else math.nan


def evaluate(
    preds,
    gts,
    n_classes: int = 5,
    size_scale: float = 1.0,
    background_conf: float = DEFAULT_BACKGROUND_CONF,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> EvalReport:
    """Score per-image predictions against per-image ground truth.

    ``preds`` and ``gts`` are parallel sequences (or mappings keyed by image id)
    of box lists. Classes without ground truth are left out of every mean.
    ``size_scale`` shrinks the COCO 32/96 pixel bucket sides for small images.
    Images with no ground truth also feed the ``background_fp`` count.
    """
    preds, gts = _aligned(preds, gts)
    if not any(gts):
        raise FedscopeError("empty-ground-truth", "no ground-truth boxes in any image")
    for img_preds in preds:
        for p in img_preds:
            if p.confidence is None:
                raise FedscopeError("missing-confidence", "predictions must carry a confidence")

    per_class: list[list[_ClassImage]] = []
    for c in range(n_classes):
        per_class.append(
            [
                _ClassImage([p for p in ip if p.class_id == c], [g for g in ig if g.class_id == c])
                for ip, ig in zip(preds, gts)
            ]
        )

    thresholds = tuple(iou_thresholds)

    def coco(bucket: Optional[str], ts: Sequence[float]) -> float:
        # mean over classes of the per-class mean over thresholds
        class_means = []
        for items in per_class:
            aps = [_class_ap(items, t, bucket, size_scale) for t in ts]
            class_means.append(None if aps[0] is None else math.fsum(aps) / len(aps))
        return _mean(class_means)

    background = [ip for ip, ig in zip(preds, gts) if not ig]
    return EvalReport(
        ap=coco(None, thresholds),
        ap50=coco(None, (0.5,)),
        ap75=coco(None, (0.75,)),
        ap_small=coco("small", thresholds),
        ap_medium=coco("medium", thresholds),
        ap_large=coco("large", thresholds),
        map_pascal=_mean([_class_ap(items, 0.5, None, size_scale, pascal=True) for items in per_class]),
        background_fp=count_background_fp(background, background_conf),
    )


def map50(preds, gts, n_classes: int = 5) -> float:
    """PASCAL mAP@0.5 alone; the cheap path used for validation during training."""
    preds, gts = _aligned(preds, gts)
    aps = []
    for c in range(n_classes):
        items = [
            _ClassImage([p for p in ip if p.class_id == c], [g for g in ig if g.class_id == c])
            for ip, ig in zip(preds, gts)
        ]
        aps.append(_class_ap(items, 0.5, None, 1.0, pascal=True))
    value = _mean(aps)
    return 0.0 if math.isnan(value) else value


__all__ = [
    "BUCKETS",
    "COCO_IOU_THRESHOLDS",
    "EvalReport",
    "MatchResult",
    "ap_coco",
    "ap_pascal",
    "count_background_fp",
    "evaluate",
    "map50",
    "match_detections",
    "pr_curve",
]
