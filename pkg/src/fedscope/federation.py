"""Simulated federated training: client partitioning, FedAvg and the round loop."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._errors import FedscopeError
from .detector import FreezeMask, TrainOptions, predict_boxes, train
from .metrics import map50
from .nn import Layer, ModelParams, init_params
from .validation import as_dataset, check_images

logger = logging.getLogger(__name__)

WEIGHTINGS = ("by-sample-count", "uniform")


@dataclass
class ClientShard:
    client_id: str
    samples: list

    def __post_init__(self):
        if len(self.samples) == 0:
            raise FedscopeError("empty-shard", f"client {self.client_id!r} has no samples")

    @property
    def n(self) -> int:
        return len(self.samples)


@dataclass
class FederationConfig:
    clients: list
    rounds: int = 10
    local_epochs: int = 15
    weighting: str = "by-sample-count"
    seed: int = 0
    opts: TrainOptions = field(default_factory=TrainOptions)
    mask: Optional[FreezeMask] = None

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 0:
            raise FedscopeError("bad-federation-config", f"rounds={self.rounds}, local_epochs={self.local_epochs}")
        if len(self.clients) < 2:
            raise FedscopeError("bad-federation-config", "need at least two clients")
        if self.weighting not in WEIGHTINGS:
            raise FedscopeError("bad-weighting", self.weighting)


def partition_by_domain(real: Sequence, synthetic: Sequence) -> list[ClientShard]:
    """One client per domain: real captures and synthetic renders."""
    if len(real) == 0 or len(synthetic) == 0:
        raise FedscopeError("empty-domain", "both domains need at least one sample")
    return [ClientShard("real", list(real)), ClientShard("synthetic", list(synthetic))]


def partition_iid(hybrid: Sequence, k: int, seed: int = 0) -> list[ClientShard]:
    """Seeded shuffle, then round-robin into ``k`` shards (sizes differ by at most one)."""
    if k < 2:
        raise FedscopeError("bad-client-count", f"k={k}")
    if k > len(hybrid):
        raise FedscopeError("too-many-clients", f"{k} clients for {len(hybrid)} samples")
    order = np.random.default_rng(seed).permutation(len(hybrid))
    return [ClientShard(f"client{j}", [hybrid[i] for i in order[j::k]]) for j in range(k)]


def aggregation_weights(counts: Sequence[int], weighting: str = "by-sample-count") -> list[float]:
    if weighting not in WEIGHTINGS:
        raise FedscopeError("bad-weighting", weighting)
    if any(c <= 0 for c in counts):
        raise FedscopeError("bad-counts", str(list(counts)))
    if weighting == "uniform":
        return [1.0 / len(counts)] * len(counts)
    total = sum(counts)
    return [c / total for c in counts]


def _exact_weighted_sum(arrays: Sequence[np.ndarray], coefs: Sequence[float]) -> np.ndarray:
    # per-element correctly rounded sum: independent of client order
    terms = np.stack([c * a for c, a in zip(coefs, arrays)]).reshape(len(arrays), -1)
    out = np.fromiter((math.fsum(col) for col in terms.T), dtype=float, count=terms.shape[1])
    return out.reshape(arrays[0].shape)


def fedavg_aggregate(
    weights: Sequence[ModelParams], counts: Sequence[int], weighting: str = "by-sample-count"
) -> ModelParams:
    """Elementwise weighted mean of client models (``n_k / n`` or uniform)."""
    if len(weights) == 0 or len(weights) != len(counts):
        raise FedscopeError("bad-counts", f"{len(weights)} models, {len(counts)} counts")
    signature = weights[0].shape_signature()
    if any(w.shape_signature() != signature for w in weights[1:]):
        raise FedscopeError("incompatible-models", "client models differ in layer names or shapes")
    coefs = aggregation_weights(counts, weighting)
    layers = []
    for i, ref in enumerate(weights[0]):
        layers.append(
            Layer(
                ref.name,
                _exact_weighted_sum([w[i].weight for w in weights], coefs),
                _exact_weighted_sum([w[i].bias for w in weights], coefs),
            )
        )
    return ModelParams(layers)


def client_rng(seed: int, client_id: str, round_idx: int) -> np.random.Generator:
    """Per-client stream from ``(seed, client_id, round)``; independent of scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(client_id.encode()), round_idx]))


@dataclass
class FederationResult:
    final: ModelParams
    best: ModelParams
    best_round: Optional[int]
    history: list[dict]


def run_federation(cfg: FederationConfig, init: ModelParams, val=None) -> FederationResult:
    """Synchronous FedAvg rounds.

    Every round each client starts from the broadcast global model with a fresh
    optimizer, trains ``local_epochs`` epochs (no early stopping), and the
    server averages the results. With ``val`` the global model is scored after
    each round and the best round is kept alongside the final one.
    """
    opts = TrainOptions(**{**cfg.opts.__dict__, "patience": None})
    if val is not None:
        val_images, val_annotations = as_dataset(val)
    global_params = init.copy()
    best, best_round, best_score = global_params.copy(), None, -math.inf
    history = []
    for r in range(cfg.rounds):
        client_models, losses = [], {}
        for shard in cfg.clients:
            if cfg.local_epochs == 0:
                client_models.append(global_params.copy())
                losses[shard.client_id] = math.nan
                continue
            try:
                result = train(
                    global_params,
                    shard.samples,
                    cfg.local_epochs,
                    opts,
                    cfg.mask,
                    rng=client_rng(cfg.seed, shard.client_id, r),
                )
            except FedscopeError as exc:
                raise FedscopeError(exc.code, f"client {shard.client_id!r}, round {r}: {exc}") from exc
            client_models.append(result.final_params)
            losses[shard.client_id] = result.history[-1]["train_loss"]
        global_params = fedavg_aggregate(client_models, [s.n for s in cfg.clients], cfg.weighting)
        record = {"round": r, "client_loss": losses}
        if val is not None:
            preds = predict_boxes(global_params, val_images, opts.anchor, opts.val_conf, opts.nms_iou)
            score = map50(preds, val_annotations, global_params.n_classes)
            record["val_map50"] = score
            if score > best_score:
                best, best_round, best_score = global_params.copy(), r, score
        logger.debug("round %d: %s", r, record)
        history.append(record)
    if val is None:
        best, best_round = global_params.copy(), cfg.rounds - 1
    return FederationResult(global_params, best, best_round, history)


def write_history_csv(history: Sequence[dict], path) -> None:
    """One row per round: ``round, loss_<client>..., val_map50``."""
    clients = list(history[0]["client_loss"]) if history else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round"] + [f"loss_{c}" for c in clients] + ["val_map50"])
        for rec in history:
            writer.writerow(
                [rec["round"]]
                + [f"{rec['client_loss'][c]:.6f}" for c in clients]
                + [f"{rec['val_map50']:.6f}" if "val_map50" in rec else ""]
            )


class FederatedDetector(BaseEstimator):
    """FedAvg-trained grid detector.

    ``fit(X, y, groups)`` treats each distinct ``groups`` label as one client
    holding the matching samples. ``predict`` and ``score`` behave like
    :class:`~fedscope.detector.GridDetector`.
    """

    def __init__(
        self,
        n_classes=5,
        rounds=10,
        local_epochs=15,
        weighting="by-sample-count",
        lr=0.001,
        momentum=0.937,
        weight_decay=0.0005,
        batch_size=8,
        conf_threshold=0.001,
        nms_iou=0.45,
        select="best",
        init=None,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.weighting = weighting
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.select = select
        self.init = init
        self.random_state = random_state

    def fit(self, X, y, groups, X_val=None, y_val=None):
        X = check_images(X)
        groups = list(groups)
        if len(groups) != len(X) or len(y) != len(X):
            raise FedscopeError("misaligned-inputs", "X, y and groups must have equal length")
        ids = sorted(set(map(str, groups)))
        shards = [ClientShard(cid, [(X[i], y[i]) for i, g in enumerate(groups) if str(g) == cid]) for cid in ids]
        opts = TrainOptions(
            lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay, batch_size=self.batch_size, seed=self.random_state
        )
        cfg = FederationConfig(shards, self.rounds, self.local_epochs, self.weighting, self.random_state, opts)
        start = self.init.copy() if self.init is not None else init_params(self.random_state, self.n_classes)
        val = None if X_val is None else list(zip(check_images(X_val), y_val))
        result = run_federation(cfg, start, val)
        self.params_ = result.best if self.select == "best" else result.final
        self.final_params_ = result.final
        self.history_ = result.history
        self.best_round_ = result.best_round
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict_boxes(self.params_, X, conf_threshold=self.conf_threshold, nms_iou=self.nms_iou)

    def score(self, X, y) -> float:
        return map50(self.predict(X), y, self.n_classes)
