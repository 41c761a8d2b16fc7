"""Single-shot grid detector: loss, gradients, SGD training, inference.

Each cell of the ``S x S`` output grid predicts one box relative to a single
anchor, with channels ``[tx, ty, tw, th, objectness, class logits...]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from ._errors import FedscopeError
from .boxes import BoundingBox, iou_matrix
from .metrics import map50
from .nn import TOTAL_STRIDE, ModelParams, backward_cached, forward_cached, init_params
from .validation import as_dataset, check_annotations, check_images

logger = logging.getLogger(__name__)

LAMBDA_COORD = 5.0
LAMBDA_NOOBJ = 0.5
DEFAULT_ANCHOR = (10.0, 10.0)
BACKBONE = ("L1", "L2", "L3")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _log_softmax(z):
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- targets -------------------------------------------------------------------


@dataclass
class Targets:
    """Per-cell regression/classification targets for a batch of images."""

    obj: np.ndarray  # (N, S, S) bool
    box: np.ndarray  # (N, S, S, 4): gx, gy in [0,1); log(gw/w0), log(gh/h0)
    cls: np.ndarray  # (N, S, S) int, -1 where unassigned
    assignment: list = field(default_factory=list)  # per image: {gt_index: (row, col)}

    def __getitem__(self, idx) -> "Targets":
        return Targets(self.obj[idx], self.box[idx], self.cls[idx], [self.assignment[i] for i in np.atleast_1d(np.arange(len(self.obj))[idx])])


def encode_targets(
    gts_per_image: Sequence[Sequence[BoundingBox]],
    grid: int,
    anchor: tuple[float, float] = DEFAULT_ANCHOR,
) -> Targets:
    """Assign each ground truth to the cell holding its center.

    A cell claimed by an earlier (lower-index) box is not reassigned; the later
    box is skipped and logged.
    """
    n = len(gts_per_image)
    obj = np.zeros((n, grid, grid), dtype=bool)
    box = np.zeros((n, grid, grid, 4))
    cls = np.full((n, grid, grid), -1, dtype=np.int64)
    size = grid * TOTAL_STRIDE
    w0, h0 = anchor
    assignments = []
    for i, gts in enumerate(gts_per_image):
        assigned = {}
        for j, g in enumerate(gts):
            cx, cy = g.center
            if not (0.0 <= cx <= size and 0.0 <= cy <= size):
                raise FedscopeError("gt-outside-image", f"center ({cx}, {cy}) outside {size}x{size}")
            col = min(int(cx // TOTAL_STRIDE), grid - 1)
            row = min(int(cy // TOTAL_STRIDE), grid - 1)
            if obj[i, row, col]:
                logger.debug("image %d: ground truth %d shares cell (%d, %d); skipped", i, j, row, col)
                continue
            obj[i, row, col] = True
            box[i, row, col] = (
                cx / TOTAL_STRIDE - col,
                cy / TOTAL_STRIDE - row,
                math.log(g.width / w0),
                math.log(g.height / h0),
            )
            cls[i, row, col] = g.class_id
            assigned[j] = (row, col)
        assignments.append(assigned)
    return Targets(obj, box, cls, assignments)


def encode_box(b: BoundingBox, grid: int, anchor: tuple[float, float] = DEFAULT_ANCHOR, n_classes: int = 5) -> tuple[int, int, np.ndarray]:
    """Raw cell values ``(row, col, [tx, ty, tw, th, to, logits...])`` that decode to ``b``."""
    t = encode_targets([[b]], grid, anchor)
    (row, col), = t.assignment[0].values()
    gx, gy, lw, lh = t.box[0, row, col]
    logit = lambda p: math.log(p) - math.log1p(-p)
    cells = np.full(5 + n_classes, -20.0)
    cells[:5] = (logit(gx), logit(gy), lw, lh, 20.0)
    cells[5 + b.class_id] = 20.0
    return row, col, cells


# -- loss ------------------------------------------------------------------------


def loss_and_grad(out: np.ndarray, targets: Targets) -> tuple[np.ndarray, np.ndarray]:
    """Per-image losses ``(N,)`` and ``d(sum of losses)/d(out)``."""
    out = np.asarray(out, dtype=float)
    obj = targets.obj
    noobj = ~obj
    objf = obj.astype(float)
    tx, ty, tw, th, to = (out[..., k] for k in range(5))
    logits = out[..., 5:]
    sx, sy = sigmoid(tx), sigmoid(ty)
    gx, gy, lw, lh = (targets.box[..., k] for k in range(4))

    ex, ey, ew, eh = sx - gx, sy - gy, tw - lw, th - lh
    coord = LAMBDA_COORD * objf * (ex * ex + ey * ey + ew * ew + eh * eh)
    obj_term = objf * _softplus(-to)
    noobj_term = LAMBDA_NOOBJ * noobj * _softplus(to)
    logp = _log_softmax(logits)
    cls_idx = np.where(obj, targets.cls, 0)
    ce = -np.take_along_axis(logp, cls_idx[..., None], axis=-1)[..., 0] * objf
    per_cell = coord + obj_term + noobj_term + ce
    losses = per_cell.reshape(out.shape[0], -1).sum(axis=1)

    grad = np.zeros_like(out)
    so = sigmoid(to)
    grad[..., 0] = 2 * LAMBDA_COORD * objf * ex * sx * (1 - sx)
    grad[..., 1] = 2 * LAMBDA_COORD * objf * ey * sy * (1 - sy)
    grad[..., 2] = 2 * LAMBDA_COORD * objf * ew
    grad[..., 3] = 2 * LAMBDA_COORD * objf * eh
    grad[..., 4] = objf * (so - 1.0) + LAMBDA_NOOBJ * noobj * so
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, cls_idx[..., None], 1.0, axis=-1)
    grad[..., 5:] = (probs - onehot) * objf[..., None]
    return losses, grad


def loss(cells: np.ndarray, gts: Sequence[BoundingBox], anchor: tuple[float, float] = DEFAULT_ANCHOR) -> tuple[float, dict]:
    """Composite loss of one image's ``(S, S, 5+K)`` output.

    Returns the scalar and the assignment map ``{gt_index: (row, col)}``.
    """
    cells = np.asarray(cells, dtype=float)
    targets = encode_targets([gts], cells.shape[0], anchor)
    losses, _ = loss_and_grad(cells[None], targets)
    return float(losses[0]), targets.assignment[0]


def batch_gradient(
    p: ModelParams, images: np.ndarray, targets: Targets, trainable: Optional[Sequence[bool]] = None
) -> tuple[float, ModelParams]:
    """Mean per-image loss over the batch and its gradient."""
    out, cache = forward_cached(p, images)
    losses, dout = loss_and_grad(out, targets)
    n = out.shape[0]
    grads = backward_cached(p, cache, dout / n, trainable)
    return math.fsum(losses) / n, grads


def backward(p: ModelParams, img: np.ndarray, gts: Sequence[BoundingBox], anchor: tuple[float, float] = DEFAULT_ANCHOR) -> ModelParams:
    """Exact gradient of :func:`loss` for one image w.r.t. every parameter."""
    img = np.asarray(img, dtype=float)
    grid = img.shape[0] // TOTAL_STRIDE
    _, grads = batch_gradient(p, img[None], encode_targets([gts], grid, anchor))
    return grads


# -- inference -------------------------------------------------------------------


def decode_arrays(
    cells: np.ndarray, anchor: tuple[float, float] = DEFAULT_ANCHOR, conf_threshold: float = 0.25
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized decode of one image: ``(xyxy (M,4), class_ids (M,), conf (M,))``.

    Rows come out in row-major cell order.
    """
    cells = np.asarray(cells, dtype=float)
    s_h, s_w = cells.shape[:2]
    height, width = s_h * TOTAL_STRIDE, s_w * TOTAL_STRIDE
    cols, rows = np.meshgrid(np.arange(s_w), np.arange(s_h))
    cx = (cols + sigmoid(cells[..., 0])) * TOTAL_STRIDE
    cy = (rows + sigmoid(cells[..., 1])) * TOTAL_STRIDE
    w = anchor[0] * np.exp(np.clip(cells[..., 2], -20.0, 20.0))
    h = anchor[1] * np.exp(np.clip(cells[..., 3], -20.0, 20.0))
    logp = _log_softmax(cells[..., 5:])
    cls = np.argmax(logp, axis=-1)
    conf = sigmoid(cells[..., 4]) * np.exp(np.max(logp, axis=-1))
    xyxy = np.stack(
        [
            np.clip(cx - w / 2, 0.0, width),
            np.clip(cy - h / 2, 0.0, height),
            np.clip(cx + w / 2, 0.0, width),
            np.clip(cy + h / 2, 0.0, height),
        ],
        axis=-1,
    ).reshape(-1, 4)
    cls, conf = cls.reshape(-1), conf.reshape(-1)
    keep = (conf >= conf_threshold) & (xyxy[:, 2] > xyxy[:, 0]) & (xyxy[:, 3] > xyxy[:, 1])
    return xyxy[keep], cls[keep], conf[keep]


def decode(cells: np.ndarray, anchor: tuple[float, float] = DEFAULT_ANCHOR, conf_threshold: float = 0.25) -> list[BoundingBox]:
    """Boxes with confidence ``sigmoid(objectness) * max class probability``."""
    xyxy, cls, conf = decode_arrays(cells, anchor, conf_threshold)
    return _to_boxes(xyxy, cls, conf)


def _to_boxes(xyxy, cls, conf) -> list[BoundingBox]:
    return [
        BoundingBox(int(c), float(b[0]), float(b[1]), float(b[2]), float(b[3]), min(1.0, float(s)))
        for b, c, s in zip(xyxy, cls, conf)
    ]


def nms_arrays(xyxy: np.ndarray, cls: np.ndarray, conf: np.ndarray, iou_threshold: float = 0.45) -> np.ndarray:
    """Indices kept by greedy per-class suppression, in confidence order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise FedscopeError("bad-iou-threshold", str(iou_threshold))
    order = np.argsort(-conf, kind="stable")
    keep = []
    for c in np.unique(cls):
        idx = order[cls[order] == c]
        ious = iou_matrix(xyxy[idx], xyxy[idx])
        alive = np.ones(len(idx), dtype=bool)
        for a in range(len(idx)):
            if not alive[a]:
                continue
            keep.append(idx[a])
            alive[a + 1 :] &= ious[a, a + 1 :] <= iou_threshold
    keep = np.array(keep, dtype=np.int64)
    return keep[np.argsort(-conf[keep], kind="stable")] if keep.size else keep


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = 0.45) -> list[BoundingBox]:
    """Greedy per-class non-maximum suppression; returns a subset of ``boxes``."""
    boxes = list(boxes)
    if not boxes:
        return []
    xyxy = np.array([b.as_array() for b in boxes])
    cls = np.array([b.class_id for b in boxes])
    conf = np.array([b.confidence for b in boxes], dtype=float)
    return [boxes[i] for i in nms_arrays(xyxy, cls, conf, iou_threshold)]


def predict_boxes(
    p: ModelParams,
    images: np.ndarray,
    anchor: tuple[float, float] = DEFAULT_ANCHOR,
    conf_threshold: float = 0.001,
    nms_iou: float = 0.45,
    batch_size: int = 64,
) -> list[list[BoundingBox]]:
    images = check_images(images)
    results = []
    for start in range(0, len(images), batch_size):
        out, _ = forward_cached(p, images[start : start + batch_size])
        for cells in out:
            xyxy, cls, conf = decode_arrays(cells, anchor, conf_threshold)
            keep = nms_arrays(xyxy, cls, conf, nms_iou)
            results.append(_to_boxes(xyxy[keep], cls[keep], conf[keep]))
    return results


# -- optimization ------------------------------------------------------------------


class FreezeMask:
    """Set of frozen layer names; frozen layers are never updated."""

    def __init__(self, frozen: Iterable[str] = ()):
        self.frozen = frozenset(frozen)

    def __repr__(self) -> str:
        return f"FreezeMask({sorted(self.frozen)})"

    def trainable(self, p: ModelParams) -> list[bool]:
        flags = [layer.name not in self.frozen for layer in p]
        if not any(flags):
            raise FedscopeError("all-layers-frozen", "at least one layer must stay trainable")
        return flags


@dataclass
class OptimizerState:
    lr: float = 0.001
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 8
    velocity: Optional[ModelParams] = None

    def reset(self) -> None:
        self.velocity = None


def sgd_step(
    p: ModelParams, grad: ModelParams, state: OptimizerState, mask: Optional[FreezeMask] = None
) -> tuple[ModelParams, OptimizerState]:
    """``v <- mu*v + (g + wd*w)``; ``w <- w - lr*v``. Updates in place and returns both."""
    if grad.shape_signature() != p.shape_signature():
        raise FedscopeError("shape-mismatch", "gradient and parameters differ in shape")
    if state.velocity is None:
        state.velocity = p.zeros_like()
    trainable = (mask or FreezeMask()).trainable(p)
    for layer, g, v, train in zip(p, grad, state.velocity, trainable):
        if not train:
            continue
        for w_arr, g_arr, v_arr in ((layer.weight, g.weight, v.weight), (layer.bias, g.bias, v.bias)):
            v_arr *= state.momentum
            v_arr += g_arr + state.weight_decay * w_arr
            w_arr -= state.lr * v_arr
    return p, state


@dataclass
class TrainOptions:
    lr: float = 0.001
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 8
    anchor: tuple[float, float] = DEFAULT_ANCHOR
    patience: Optional[int] = 20
    val_conf: float = 0.001
    nms_iou: float = 0.45
    seed: int = 0
    lrf: float = 1.0  # final lr as a fraction of lr; linear decay over the epoch budget, 1.0 = constant

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum, self.weight_decay, self.batch_size)


@dataclass
class TrainResult:
    params: ModelParams
    final_params: ModelParams
    history: list[dict]
    best_epoch: Optional[int]


def train(
    p: ModelParams,
    dataset,
    epochs: int,
    opts: Optional[TrainOptions] = None,
    mask: Optional[FreezeMask] = None,
    val=None,
    rng: Optional[np.random.Generator] = None,
    state: Optional[OptimizerState] = None,
) -> TrainResult:
    """Mini-batch SGD with per-epoch shuffling and optional early stopping.

    ``dataset`` and ``val`` are sequences of samples (``SceneSample`` or
    ``(image, boxes)`` pairs). With ``val`` given, mAP@0.5 is tracked every
    epoch, the best epoch's weights are returned, and training stops after
    ``opts.patience`` epochs without improvement. ``p`` is not modified.
    """
    opts = opts or TrainOptions()
    images, annotations = as_dataset(dataset)
    if len(images) == 0:
        raise FedscopeError("empty-dataset", "cannot train on an empty dataset")
    n_classes = p.n_classes
    check_annotations(annotations, n_classes, images.shape[1:3])
    rng = rng if rng is not None else np.random.default_rng(opts.seed)
    state = state if state is not None else opts.optimizer()
    mask = mask or FreezeMask()
    trainable = mask.trainable(p)
    targets = encode_targets(annotations, images.shape[1] // TOTAL_STRIDE, opts.anchor)
    if val is not None:
        val_images, val_annotations = as_dataset(val)

    params = p.copy()
    best = params.copy()
    best_score, best_epoch, stale = -math.inf, None, 0
    history = []
    n = len(images)
    with threadpool_limits(limits=1, user_api="blas"):
        for epoch in range(epochs):
            if opts.lrf != 1.0:
                state.lr = opts.lr * ((1.0 - epoch / epochs) * (1.0 - opts.lrf) + opts.lrf)
            perm = rng.permutation(n)
            batch_losses = []
            for start in range(0, n, opts.batch_size):
                idx = perm[start : start + opts.batch_size]
                batch_loss, grads = batch_gradient(params, images[idx], targets[idx], trainable)
                sgd_step(params, grads, state, mask)
                batch_losses.append(batch_loss)
            record = {"epoch": epoch, "train_loss": math.fsum(batch_losses) / len(batch_losses)}
            if not params.all_finite():
                raise FedscopeError("diverged", f"non-finite parameters at epoch {epoch}")
            if val is not None:
                preds = predict_boxes(params, val_images, opts.anchor, opts.val_conf, opts.nms_iou)
                score = map50(preds, val_annotations, n_classes)
                record["val_map50"] = score
                if score > best_score:
                    best_score, best_epoch, stale = score, epoch, 0
                    best = params.copy()
                else:
                    stale += 1
            history.append(record)
            if val is not None and opts.patience is not None and stale >= opts.patience:
                break
    if val is None:
        best = params.copy()
    return TrainResult(best, params, history, best_epoch)


# -- estimator -------------------------------------------------------------------


class GridDetector(BaseEstimator):
    """Estimator wrapper: ``fit(images, boxes)`` / ``predict(images)`` / ``score``.

    ``X`` is an ``(N, H, W, 3)`` array in ``[0, 1]`` (H, W multiples of 8);
    ``y`` is a list of per-image :class:`BoundingBox` lists.

    Parameters
    ----------
    n_classes : int
    anchor : tuple of float
        Anchor width and height in pixels.
    lr, momentum, weight_decay, batch_size
        SGD settings.
    epochs : int
        Epoch budget; early stopping applies when validation data is passed.
    patience : int or None
    freeze : tuple of str
        Layer names kept fixed during ``fit``.
    conf_threshold, nms_iou : float
        Inference settings for ``predict``.
    init : ModelParams or None
        Starting weights; seeded random init when ``None``.
    random_state : int
    """

    def __init__(
        self,
        n_classes=5,
        anchor=DEFAULT_ANCHOR,
        lr=0.001,
        momentum=0.937,
        weight_decay=0.0005,
        batch_size=8,
        epochs=50,
        patience=20,
        freeze=(),
        conf_threshold=0.001,
        nms_iou=0.45,
        init=None,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.anchor = anchor
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.freeze = freeze
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.init = init
        self.random_state = random_state

    def _options(self) -> TrainOptions:
        return TrainOptions(
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            anchor=tuple(self.anchor),
            patience=self.patience,
            nms_iou=self.nms_iou,
            seed=self.random_state,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        check_annotations(y, self.n_classes, X.shape[1:3])
        start = self.init.copy() if self.init is not None else init_params(self.random_state, self.n_classes)
        val = None if X_val is None else list(zip(check_images(X_val), y_val))
        result = train(start, list(zip(X, y)), self.epochs, self._options(), FreezeMask(self.freeze), val=val)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X) -> list[list[BoundingBox]]:
        check_is_fitted(self, "params_")
        return predict_boxes(self.params_, X, tuple(self.anchor), self.conf_threshold, self.nms_iou)

    def score(self, X, y) -> float:
        """PASCAL mAP@0.5."""
        return map50(self.predict(X), y, self.n_classes)
