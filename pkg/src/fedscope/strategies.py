"""Training strategies compared in the experiment.

Centralized training (hybrid, real-only, synthetic-only), transfer learning
(frozen backbone), fine-tuning, two-model ensembling, and the two federated
set-ups. Stage-1 synthetic training is shared between the synthetic-only
model, transfer learning, fine-tuning and the ensemble.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._errors import FedscopeError
from .boxes import BoundingBox
from .detector import BACKBONE, FreezeMask, TrainOptions, TrainResult, decode_arrays, nms_arrays, _to_boxes, train
from .federation import FederationConfig, partition_by_domain, partition_iid, run_federation
from .nn import ModelParams, forward, forward_cached
from .validation import check_images

logger = logging.getLogger(__name__)

STRATEGY_KINDS = (
    "fedensemble",
    "federated",
    "transfer",
    "finetune",
    "centralized-hybrid",
    "centralized-real",
    "centralized-synthetic",
    "ensemble",
)

DISPLAY_NAMES = {
    "fedensemble": "FedEnsemble model",
    "federated": "Federated learning",
    "transfer": "Transferlearning",
    "finetune": "Fine-tune model",
    "centralized-hybrid": "Hybrid Centralized learning",
    "centralized-real": "Real Centralized learning",
    "centralized-synthetic": "Synthetic Centralized learning",
    "ensemble": "YOLO Ensemble",
}


@dataclass
class StrategySpec:
    """Epoch, round and client budgets for one strategy."""

    kind: str
    epochs: int = 50
    stage2_epochs: Optional[int] = None
    rounds: int = 10
    local_epochs: int = 15
    n_clients: int = 3
    freeze: tuple = ()

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise FedscopeError("unknown-strategy", self.kind)
        if self.stage2_epochs is None:
            self.stage2_epochs = {"transfer": 40, "finetune": 50}.get(self.kind, 0)
        if self.kind == "transfer" and not self.freeze:
            self.freeze = BACKBONE


@dataclass
class Datasets:
    """Everything a strategy may train or validate on."""

    real: list
    synthetic: list
    val_real: Optional[list] = None
    val_synthetic: Optional[list] = None

    @property
    def hybrid(self) -> list:
        return list(self.real) + list(self.synthetic)

    @property
    def val_hybrid(self) -> Optional[list]:
        if self.val_real is None or self.val_synthetic is None:
            return self.val_real or self.val_synthetic
        return list(self.val_real) + list(self.val_synthetic)


def _stream(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]))


def train_centralized(
    init: ModelParams, dataset, epochs: int, opts: Optional[TrainOptions] = None, val=None, tag: str = "centralized"
) -> TrainResult:
    """Plain training with early stopping on ``val`` (when given)."""
    opts = opts or TrainOptions()
    return train(init, dataset, epochs, opts, val=val, rng=_stream(opts.seed, tag))


def train_transfer(
    synthetic,
    real,
    budgets: tuple[int, int] = (50, 40),
    init: Optional[ModelParams] = None,
    opts: Optional[TrainOptions] = None,
    val_synthetic=None,
    val_real=None,
    stage1: Optional[ModelParams] = None,
    freeze: Sequence[str] = BACKBONE,
) -> ModelParams:
    """Synthetic pre-training, then only the head is trained on real data."""
    return _two_stage(synthetic, real, budgets, init, opts, val_synthetic, val_real, stage1, FreezeMask(freeze))


def train_finetune(
    synthetic,
    real,
    budgets: tuple[int, int] = (50, 50),
    init: Optional[ModelParams] = None,
    opts: Optional[TrainOptions] = None,
    val_synthetic=None,
    val_real=None,
    stage1: Optional[ModelParams] = None,
) -> ModelParams:
    """Synthetic pre-training, then all layers are trained on real data."""
    return _two_stage(synthetic, real, budgets, init, opts, val_synthetic, val_real, stage1, FreezeMask())


def _two_stage(synthetic, real, budgets, init, opts, val_synthetic, val_real, stage1, mask) -> ModelParams:
    opts = opts or TrainOptions()
    if len(synthetic) == 0 or len(real) == 0:
        raise FedscopeError("empty-dataset", "both stages need data")
    if stage1 is None:
        if init is None:
            raise FedscopeError("missing-init", "pass init or precomputed stage-1 weights")
        stage1 = train_centralized(init, synthetic, budgets[0], opts, val_synthetic, tag="stage1-synthetic").params
    return train(stage1, real, budgets[1], opts, mask, val=val_real, rng=_stream(opts.seed, "stage2-real")).params


def ensemble_infer(
    model_a: ModelParams,
    model_b: ModelParams,
    img: np.ndarray,
    nms_threshold: float = 0.45,
    conf_threshold: float = 0.001,
    anchor=(10.0, 10.0),
) -> list[BoundingBox]:
    """Detections of both models, concatenated, then one joint per-class NMS."""
    return ensemble_predict([model_a, model_b], np.asarray(img)[None], nms_threshold, conf_threshold, anchor)[0]


def ensemble_predict(models: Sequence[ModelParams], images, nms_threshold=0.45, conf_threshold=0.001, anchor=(10.0, 10.0)):
    images = check_images(images)
    outs = [forward_cached(m, images)[0] for m in models]
    results = []
    for i in range(len(images)):
        parts = [decode_arrays(out[i], anchor, conf_threshold) for out in outs]
        xyxy = np.concatenate([p[0] for p in parts])
        cls = np.concatenate([p[1] for p in parts])
        conf = np.concatenate([p[2] for p in parts])
        keep = nms_arrays(xyxy, cls, conf, nms_threshold)
        results.append(_to_boxes(xyxy[keep], cls[keep], conf[keep]))
    return results


@dataclass
class StrategyOutcome:
    kind: str
    models: list  # one ModelParams, or two for the ensemble
    history: list = field(default_factory=list)


class StrategyRunner:
    """Runs strategies on shared data and init, caching shared stages."""

    def __init__(self, data: Datasets, init: ModelParams, opts: TrainOptions, specs: Optional[dict] = None):
        self.data = data
        self.init = init
        self.opts = opts
        self.specs = specs or {}
        self._cache: dict[str, TrainResult] = {}

    def spec(self, kind: str) -> StrategySpec:
        return self.specs.get(kind) or StrategySpec(kind)

    def _centralized(self, which: str, epochs: int) -> TrainResult:
        key = f"{which}:{epochs}"
        if key not in self._cache:
            dataset, val = {
                "real": (self.data.real, self.data.val_real),
                "synthetic": (self.data.synthetic, self.data.val_synthetic),
                "hybrid": (self.data.hybrid, self.data.val_hybrid),
            }[which]
            tag = "stage1-synthetic" if which == "synthetic" else f"centralized-{which}"
            self._cache[key] = train_centralized(self.init, dataset, epochs, self.opts, val, tag=tag)
        return self._cache[key]

    def run(self, kind: str) -> StrategyOutcome:
        spec = self.spec(kind)
        d = self.data
        if kind.startswith("centralized-"):
            result = self._centralized(kind.split("-", 1)[1], spec.epochs)
            return StrategyOutcome(kind, [result.params], result.history)
        if kind in ("transfer", "finetune"):
            stage1 = self._centralized("synthetic", spec.epochs).params
            if kind == "transfer":
                params = train_transfer(d.synthetic, d.real, (spec.epochs, spec.stage2_epochs), opts=self.opts,
                                        val_real=d.val_real, stage1=stage1, freeze=spec.freeze)
            else:
                params = train_finetune(d.synthetic, d.real, (spec.epochs, spec.stage2_epochs), opts=self.opts,
                                        val_real=d.val_real, stage1=stage1)
            return StrategyOutcome(kind, [params])
        if kind == "ensemble":
            real = self._centralized("real", self.spec("centralized-real").epochs).params
            synthetic = self._centralized("synthetic", self.spec("centralized-synthetic").epochs).params
            return StrategyOutcome(kind, [real, synthetic])
        if kind in ("federated", "fedensemble"):
            if kind == "federated":
                shards = partition_by_domain(d.real, d.synthetic)
            else:
                shards = partition_iid(d.hybrid, spec.n_clients, seed=self.opts.seed)
            cfg = FederationConfig(shards, spec.rounds, spec.local_epochs, "by-sample-count", self.opts.seed, self.opts)
            result = run_federation(cfg, self.init, val=d.val_hybrid)
            return StrategyOutcome(kind, [result.best], result.history)
        raise FedscopeError("unknown-strategy", kind)
