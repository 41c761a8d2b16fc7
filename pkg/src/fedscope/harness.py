"""Experiment orchestration and comparison reports.

Per seed: generate all datasets, share one init across strategies, run every
strategy, evaluate on the in-distribution and unseen test sets. Reports carry
no timestamps or timings so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from ._errors import FedscopeError
from .config import ExperimentConfig
from .datagen import REAL, SYNTHETIC, generate_dataset, make_unseen_testset, manifest_digest
from .detector import TrainOptions, predict_boxes
from .federation import write_history_csv
from .metrics import EvalReport, evaluate
from .nn import init_params
from .strategies import DISPLAY_NAMES, Datasets, StrategyRunner, StrategySpec, ensemble_predict

logger = logging.getLogger(__name__)

COLUMNS = ("Algorithm", "AP", "AP50", "AP75", "APsmall", "APmedium", "APlarge", "mAP", "BackgroundFP")
METRIC_FIELDS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "map_pascal", "background_fp")
TEST_SETS = ("in_distribution", "unseen")
UNDEFINED = "n/a"


@dataclass
class ReportRow:
    strategy: str
    in_distribution: EvalReport
    unseen: EvalReport
    init_digest: str = ""
    data_digest: str = ""


@dataclass
class SeedResult:
    seed: int
    rows: list = field(default_factory=list)
    histories: dict = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class ComparisonReport:
    strategies: tuple
    seeds: list  # of SeedResult

    def completed(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.error is None]

    def table(self, seed: int, test_set: str) -> list[tuple[str, EvalReport]]:
        for s in self.seeds:
            if s.seed == seed:
                return [(r.strategy, getattr(r, test_set)) for r in s.rows]
        raise KeyError(seed)

    def mean_table(self, test_set: str) -> list[tuple[str, dict]]:
        """Mean over completed seeds of the values as printed in the per-seed tables."""
        per_seed = [parse_table(format_table(self.table(s.seed, test_set), "csv"), "csv") for s in self.completed()]
        return aggregate_tables(per_seed)


# -- datasets --------------------------------------------------------------------


def _data_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class SeedData:
    train: Datasets
    test_in: list
    test_unseen: list

    def digest(self) -> str:
        parts = [self.train.real, self.train.synthetic, self.train.val_real, self.train.val_synthetic, self.test_in, self.test_unseen]
        return manifest_digest([s for part in parts for s in part])


def make_seed_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    train = Datasets(
        generate_dataset(REAL, cfg.n_real, False, _data_seed(seed, "train-real")),
        generate_dataset(SYNTHETIC, cfg.n_synthetic, True, _data_seed(seed, "train-synthetic")),
        generate_dataset(REAL, cfg.n_val, False, _data_seed(seed, "val-real")),
        generate_dataset(SYNTHETIC, cfg.n_val, True, _data_seed(seed, "val-synthetic")),
    )
    test_in = generate_dataset(REAL, cfg.n_test, False, _data_seed(seed, "test-real"))
    unseen = make_unseen_testset(
        _data_seed(seed, "test-unseen"),
        n_annotated=cfg.n_unseen,
        n_background=cfg.n_background,
        n_grid_backgrounds=max(min(cfg.n_background, 4), cfg.n_background // 2),
    )
    return SeedData(train, test_in, unseen)


def train_options(cfg: ExperimentConfig, seed: int) -> TrainOptions:
    return TrainOptions(
        lr=cfg.lr,
        lrf=cfg.lrf,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        patience=cfg.patience,
        nms_iou=cfg.nms_iou,
        seed=seed,
    )


def strategy_specs(cfg: ExperimentConfig) -> dict:
    specs = {}
    for kind in cfg.strategies + ("centralized-real", "centralized-synthetic"):
        specs[kind] = StrategySpec(
            kind,
            epochs=cfg.epochs,
            stage2_epochs={"transfer": cfg.transfer_epochs, "finetune": cfg.finetune_epochs}.get(kind),
            rounds=cfg.rounds,
            local_epochs=cfg.local_epochs,
            n_clients=cfg.fedensemble_clients,
        )
    return specs


def predict_models(models, images, cfg: ExperimentConfig):
    if len(models) == 1:
        return predict_boxes(models[0], images, conf_threshold=cfg.conf_threshold, nms_iou=cfg.nms_iou)
    return ensemble_predict(models, images, cfg.nms_iou, cfg.conf_threshold)


def evaluate_models(models, samples, cfg: ExperimentConfig) -> EvalReport:
    images = np.stack([s.image for s in samples])
    preds = predict_models(models, images, cfg)
    return evaluate(
        preds,
        [s.annotations for s in samples],
        n_classes=models[0].n_classes,
        size_scale=cfg.size_scale,
        background_conf=cfg.background_conf,
    )


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """One seed end to end; failures are caught and recorded, not raised."""
    from threadpoolctl import threadpool_limits

    started = time.perf_counter()
    result = SeedResult(seed)
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            data = make_seed_data(cfg, seed)
            init = init_params(seed)
            init_digest, data_digest = init.digest(), data.digest()
            runner = StrategyRunner(data.train, init, train_options(cfg, seed), strategy_specs(cfg))
            for kind in cfg.strategies:
                t0 = time.perf_counter()
                outcome = runner.run(kind)
                row = ReportRow(
                    kind,
                    evaluate_models(outcome.models, data.test_in, cfg),
                    evaluate_models(outcome.models, data.test_unseen, cfg),
                    init_digest,
                    data_digest,
                )
                if kind in ("federated", "fedensemble"):
                    result.histories[kind] = outcome.history
                result.rows.append(row)
                logger.info(
                    "seed %d %-22s mAP in=%.4f unseen=%.4f (%.1fs)",
                    seed, kind, row.in_distribution.map_pascal, row.unseen.map_pascal, time.perf_counter() - t0,
                )
    except Exception as exc:  # noqa: BLE001 - one bad seed must not sink the others
        logger.error("seed %d aborted: %s", seed, exc)
        result.error = f"{type(exc).__name__}: {exc}"
        result.rows = []
    logger.info("seed %d finished in %.1fs", seed, time.perf_counter() - started)
    return result


def run_experiment(cfg: ExperimentConfig, jobs: Optional[int] = None) -> ComparisonReport:
    jobs = cfg.jobs if jobs is None else jobs
    if jobs > 1 and len(cfg.seeds) > 1:
        results = Parallel(n_jobs=min(jobs, len(cfg.seeds)))(delayed(run_seed)(cfg, s) for s in cfg.seeds)
    else:
        results = [run_seed(cfg, s) for s in cfg.seeds]
    return ComparisonReport(tuple(cfg.strategies), list(results))


# -- tables ----------------------------------------------------------------------


def _fmt(value, integer: bool = False) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return UNDEFINED
    if integer and float(value).is_integer():
        return str(int(value))
    return f"{value:.4f}"


def _cells(name: str, values) -> list[str]:
    if isinstance(values, EvalReport):
        values = values.as_dict()
    return [DISPLAY_NAMES.get(name, name)] + [
        _fmt(values[f], integer=(f == "background_fp" and isinstance(values[f], (int, np.integer)))) for f in METRIC_FIELDS
    ]


def format_table(rows: Sequence[tuple[str, object]], fmt: str = "markdown") -> str:
    """Render ``(strategy, EvalReport | dict)`` rows with 4-decimal values."""
    body = [_cells(name, values) for name, values in rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(body)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "|".join("---" for _ in COLUMNS) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        return "\n".join(lines) + "\n"
    raise FedscopeError("bad-format", fmt)


_BY_DISPLAY = {v: k for k, v in DISPLAY_NAMES.items()}


def parse_table(text: str, fmt: str = "csv") -> list[tuple[str, dict]]:
    """Inverse of :func:`format_table`: ``(strategy kind, {field: float})`` rows."""
    if fmt == "csv":
        records = list(csv.reader(io.StringIO(text)))
    elif fmt == "markdown":
        records = [
            [c.strip() for c in line.strip().strip("|").split("|")]
            for line in text.splitlines()
            if line.strip().startswith("|") and not set(line.strip()) <= set("|-: ")
        ]
    else:
        raise FedscopeError("bad-format", fmt)
    if not records or tuple(records[0]) != COLUMNS:
        raise FedscopeError("bad-table", "header does not match the report columns")
    rows = []
    for rec in records[1:]:
        values = {f: (math.nan if cell == UNDEFINED else float(cell)) for f, cell in zip(METRIC_FIELDS, rec[1:])}
        rows.append((_BY_DISPLAY.get(rec[0], rec[0]), values))
    return rows


def aggregate_tables(tables: Sequence[list[tuple[str, dict]]]) -> list[tuple[str, dict]]:
    """Per-strategy mean over tables; undefined entries are skipped."""
    if not tables:
        return []
    order = [name for name, _ in tables[0]]
    out = []
    for name in order:
        values = {}
        for f in METRIC_FIELDS:
            vals = [dict(t)[name][f] for t in tables if name in dict(t)]
            vals = [v for v in vals if not math.isnan(v)]
            values[f] = math.fsum(vals) / len(vals) if vals else math.nan
        out.append((name, values))
    return out


def emit_report(report: ComparisonReport, fmt: str, directory) -> list[Path]:
    """Write per-seed and mean tables for both test sets; returns the paths."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    ext = {"csv": "csv", "markdown": "md"}.get(fmt)
    if ext is None:
        raise FedscopeError("bad-format", fmt)
    written = []
    for seed_result in report.completed():
        seed_dir = root / f"seed_{seed_result.seed}"
        seed_dir.mkdir(exist_ok=True)
        for test_set in TEST_SETS:
            path = seed_dir / f"{test_set}.{ext}"
            path.write_text(format_table(report.table(seed_result.seed, test_set), fmt))
            written.append(path)
    for test_set in TEST_SETS:
        path = root / f"mean_{test_set}.{ext}"
        path.write_text(format_table(report.mean_table(test_set), fmt))
        written.append(path)
    return written


def write_run_artifacts(report: ComparisonReport, cfg: ExperimentConfig, directory) -> list[Path]:
    """Everything ``run-all`` leaves behind: tables, provenance, round logs, summary."""
    root = Path(directory)
    written = emit_report(report, "csv", root) + emit_report(report, "markdown", root)
    for seed_result in report.completed():
        seed_dir = root / f"seed_{seed_result.seed}"
        prov = seed_dir / "provenance.csv"
        with open(prov, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["strategy", "init_sha256", "data_sha256"])
            for row in seed_result.rows:
                writer.writerow([row.strategy, row.init_digest, row.data_digest])
        written.append(prov)
        for kind, history in seed_result.histories.items():
            path = seed_dir / f"{kind}_rounds.csv"
            write_history_csv(history, path)
            written.append(path)
    (root / "config.txt").write_text(cfg.to_text())
    written.append(root / "config.txt")
    summary = root / "report.md"
    summary.write_text(summary_markdown(report))
    written.append(summary)
    return written


def summary_markdown(report: ComparisonReport) -> str:
    done = report.completed()
    lines = ["# Comparison report", "", f"Seeds completed: {', '.join(str(s.seed) for s in done) or 'none'}", ""]
    for s in report.seeds:
        if s.error is not None:
            lines.append(f"- seed {s.seed} aborted: {s.error}")
    titles = {
        "in_distribution": "Test set from the training environment",
        "unseen": "Test set from an unseen environment",
    }
    for test_set in TEST_SETS:
        lines += ["", f"## {titles[test_set]} (mean over seeds)", "", format_table(report.mean_table(test_set), "markdown")]
    return "\n".join(lines)
