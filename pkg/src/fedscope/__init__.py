"""fedscope: a desk-scale federated object-detection simulator."""
from ._errors import FedscopeError
from .boxes import CLASS_NAMES, BoundingBox, iou
from .config import ExperimentConfig
from .datagen import REAL, SYNTHETIC, UNSEEN, DomainSpec, SceneSample, generate_dataset, make_unseen_testset
from .detector import GridDetector, TrainOptions, predict_boxes, train
from .federation import ClientShard, FederatedDetector, FederationConfig, fedavg_aggregate, run_federation
from .harness import ComparisonReport, emit_report, run_experiment
from .metrics import EvalReport, evaluate, match_detections
from .nn import ModelParams, init_params, load_weights, save_weights
from .strategies import STRATEGY_KINDS, StrategyRunner, StrategySpec

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CLASS_NAMES",
    "ClientShard",
    "ComparisonReport",
    "DomainSpec",
    "EvalReport",
    "ExperimentConfig",
    "FederatedDetector",
    "FederationConfig",
    "FedscopeError",
    "GridDetector",
    "ModelParams",
    "REAL",
    "STRATEGY_KINDS",
    "SYNTHETIC",
    "SceneSample",
    "StrategyRunner",
    "StrategySpec",
    "TrainOptions",
    "UNSEEN",
    "emit_report",
    "evaluate",
    "fedavg_aggregate",
    "generate_dataset",
    "init_params",
    "iou",
    "load_weights",
    "make_unseen_testset",
    "match_detections",
    "predict_boxes",
    "run_experiment",
    "run_federation",
    "save_weights",
    "train",
]
