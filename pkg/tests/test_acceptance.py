"""Acceptance criteria, one verdict line each (see the terminal summary).

The trend checks need the full default experiment: 8 strategies x 5 seeds,
300 + 300 training images at 64x64. That run is shared by all of them and
takes roughly a quarter of an hour on one core. Set FEDSCOPE_ACCEPTANCE_OUT
to keep its report directory.
"""
import math
import os
import random
import time
from pathlib import Path

import numpy as np
import pytest

from fedscope.boxes import BoundingBox, iou
from fedscope.config import ExperimentConfig
from fedscope.detector import TrainOptions, backward, train
from fedscope.federation import ClientShard, FederationConfig, client_rng, fedavg_aggregate, run_federation
from fedscope.harness import run_experiment, write_run_artifacts
from fedscope.metrics import evaluate
from fedscope.nn import init_params

from . import oracles
from .test_detector import _gradcheck_setup, toy_set
from .test_federation import oracle_weighted_mean, random_models
from .test_harness import TINY, _tree
from .test_metrics import _random_instance, _tuples


def test_metrics_correctness(acceptance_log):
    start = time.perf_counter()
    rng = random.Random(7)
    mismatches = 0
    for _ in range(200):
        preds, gts = _random_instance(rng, n_classes=rng.randint(1, 3))
        n_classes = 1 + max(b.class_id for img in gts + preds for b in img)
        got = evaluate(preds, gts, n_classes=n_classes)
        want = oracles.evaluate(*_tuples(preds, gts), n_classes=n_classes)
        for k, v in want.items():
            g = getattr(got, k)
            if not ((math.isnan(v) and math.isnan(g)) or g == v):
                mismatches += 1

    bad_iou = 0
    for _ in range(10_000):
        x, y = rng.uniform(-50, 50), rng.uniform(-50, 50)
        a = BoundingBox(0, x, y, x + rng.uniform(0.01, 40), y + rng.uniform(0.01, 40))
        x, y = rng.uniform(-50, 50), rng.uniform(-50, 50)
        b = BoundingBox(0, x, y, x + rng.uniform(0.01, 40), y + rng.uniform(0.01, 40))
        v = iou(a, b)
        if not (v == iou(b, a) and 0.0 <= v <= 1.0 and iou(a, a) == 1.0):
            bad_iou += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and bad_iou == 0 and elapsed < 10.0
    acceptance_log(
        "metrics correctness",
        ok,
        f"200 random instances, {mismatches} field mismatches vs oracle; 10^4 IoU cases, {bad_iou} violations; {elapsed:.1f}s (< 10s)",
    )
    assert ok


def test_gradient_correctness(acceptance_log):
    start = time.perf_counter()
    p, img, gts, loss_fn = _gradcheck_setup()
    worst = oracles.finite_difference_errors(loss_fn, backward(p, img, gts), p, coords_per_layer=100, eps=1e-4)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_log("gradient correctness", ok, f"worst relative error per layer: {detail} (< 1e-3); {elapsed:.1f}s (< 30s)")
    assert ok


def test_fedavg_correctness(acceptance_log):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(40):
        k = int(rng.integers(2, 6))
        shapes = [tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 4)))) for _ in range(2)]
        models = random_models(rng, k, shapes)
        counts = [int(c) for c in rng.integers(1, 1000, size=k)]
        out = fedavg_aggregate(models, counts)
        for li, layer in enumerate(out):
            for attr in ("weight", "bias"):
                got = getattr(layer, attr)
                for idx in np.ndindex(got.shape):
                    want = oracle_weighted_mean([float(getattr(m[li], attr)[idx]) for m in models], counts)
                    worst = max(worst, abs(float(got[idx]) - want))

    m = init_params(5)
    fixed = fedavg_aggregate([m, m.copy(), m.copy()], [7, 7, 7])
    fixed_err = max(float(np.max(np.abs(a - b))) for a, b in zip(fixed.arrays(), m.arrays()))

    data = toy_set(8, seed=2)
    cfg = FederationConfig([ClientShard("twin", data), ClientShard("twin", list(data))], rounds=3, local_epochs=2, seed=1)
    fed = run_federation(cfg, init_params(0)).final
    single = init_params(0)
    opts = TrainOptions(**{**cfg.opts.__dict__, "patience": None})
    for r in range(3):
        single = train(single, data, 2, opts, rng=client_rng(1, "twin", r)).final_params
    twin_exact = fed.equals(single)

    ok = worst <= 1e-12 and fixed_err <= 1e-12 and twin_exact
    acceptance_log(
        "FedAvg correctness",
        ok,
        f"max |aggregate - oracle| {worst:.1e} (<= 1e-12); identical-client fixed point error {fixed_err:.1e}; "
        f"two identical clients == single client: {'bit-exact' if twin_exact else 'DIFFERS'}",
    )
    assert ok


def test_determinism(acceptance_log, tmp_path):
    cfg = ExperimentConfig.from_text(TINY + "seeds = 0, 1, 2\n", env={})
    trees = {}
    for label, jobs in (("run1", 1), ("run2", 1), ("jobs2", 2)):
        write_run_artifacts(run_experiment(cfg, jobs=jobs), cfg, tmp_path / label)
        trees[label] = _tree(tmp_path / label)
    same_runs = trees["run1"] == trees["run2"]
    same_jobs = trees["run1"] == trees["jobs2"]
    ok = same_runs and same_jobs and len(trees["run1"]) > 0
    acceptance_log(
        "determinism",
        ok,
        f"{len(trees['run1'])} report files; two runs identical: {same_runs}; 1 vs 2 parallel workers identical: {same_jobs}",
    )
    assert ok


# -- trends on the full experiment -----------------------------------------------------


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    cfg = ExperimentConfig.from_text("", env={})
    cfg.jobs = max(1, min(len(cfg.seeds), len(os.sched_getaffinity(0))))
    start = time.perf_counter()
    report = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    out = Path(os.environ.get("FEDSCOPE_ACCEPTANCE_OUT") or tmp_path_factory.mktemp("acceptance"))
    write_run_artifacts(report, cfg, out)
    print((out / "report.md").read_text())
    return cfg, report, elapsed


def _map(report, test_set):
    """{seed: {strategy: mAP@0.5}} over completed seeds."""
    return {s.seed: {r.strategy: getattr(r, test_set).map_pascal for r in s.rows} for s in report.completed()}


def _all_seeds_done(report):
    return len(report.completed()) == len(report.seeds)


def test_budget(acceptance_log, full_run):
    cfg, report, elapsed = full_run
    ok = elapsed < 30 * 60 and _all_seeds_done(report)
    acceptance_log(
        "end-to-end budget",
        ok,
        f"{len(cfg.strategies)} strategies x {len(cfg.seeds)} seeds in {elapsed / 60:.1f} min "
        f"on {len(os.sched_getaffinity(0))} core(s), {cfg.jobs} worker(s) (< 30 min)",
    )
    assert ok


def test_trend_t1_synthetic_worst_in_distribution(acceptance_log, full_run):
    _, report, _ = full_run
    scores = _map(report, "in_distribution")
    hits = [s for s, row in scores.items() if row["centralized-synthetic"] < min(v for k, v in row.items() if k != "centralized-synthetic")]
    ok = len(hits) >= 4 and _all_seeds_done(report)
    detail = "; ".join(f"seed {s}: synth {row['centralized-synthetic']:.3f} vs next {sorted(row.values())[1]:.3f}" for s, row in scores.items())
    acceptance_log("T1 synthetic-only worst in-distribution", ok, f"{len(hits)}/5 seeds (need >= 4). {detail}")
    assert ok


def test_trend_t2_federated_on_unseen(acceptance_log, full_run):
    _, report, _ = full_run
    scores = _map(report, "unseen")
    beats = [s for s, row in scores.items() if row["federated"] >= row["centralized-hybrid"]]
    ranks = {s: 1 + sum(v > row["federated"] for v in row.values()) for s, row in scores.items()}
    top2 = [s for s, r in ranks.items() if r <= 2]
    ok = len(beats) >= 4 and len(top2) >= 4 and _all_seeds_done(report)
    detail = "; ".join(
        f"seed {s}: fed {row['federated']:.3f} hybrid {row['centralized-hybrid']:.3f} rank {ranks[s]}" for s, row in scores.items()
    )
    acceptance_log(
        "T2 federated generalizes to unseen",
        ok,
        f"fed >= hybrid in {len(beats)}/5 (need >= 4), top-2 in {len(top2)}/5 (need >= 4). {detail}",
    )
    assert ok


def test_trend_t3_generalization_gap(acceptance_log, full_run):
    _, report, _ = full_run
    ind, uns = _map(report, "in_distribution"), _map(report, "unseen")
    gap = {k: {s: ind[s][k] - uns[s][k] for s in ind} for k in ("centralized-real", "federated")}
    real_positive = all(g > 0 for g in gap["centralized-real"].values()) and len(gap["centralized-real"]) == len(report.seeds)
    smaller = [s for s in ind if gap["federated"][s] < gap["centralized-real"][s]]
    ok = real_positive and len(smaller) >= 3
    detail = "; ".join(f"seed {s}: real {gap['centralized-real'][s]:+.3f} fed {gap['federated'][s]:+.3f}" for s in ind)
    acceptance_log(
        "T3 generalization gap",
        ok,
        f"real gap > 0 in every seed: {real_positive}; fed gap < real gap in {len(smaller)}/5 (need >= 3). {detail}",
    )
    assert ok


def test_trend_t4_background_false_positives(acceptance_log, full_run):
    _, report, _ = full_run
    fps = {k: [r.unseen.background_fp for s in report.completed() for r in s.rows if r.strategy == k]
           for k in ("federated", "fedensemble", "centralized-hybrid")}
    means = {k: sum(v) / len(v) for k, v in fps.items()}
    ok = means["federated"] <= means["centralized-hybrid"] and means["fedensemble"] <= means["centralized-hybrid"] and _all_seeds_done(report)
    acceptance_log(
        "T4 background false positives",
        ok,
        f"mean FP at conf 0.25: federated {means['federated']:.1f}, fedensemble {means['fedensemble']:.1f}, "
        f"hybrid {means['centralized-hybrid']:.1f} (need both <= hybrid)",
    )
    assert ok


def test_domain_shift_is_real(acceptance_log, full_run):
    _, report, _ = full_run
    ind, uns = _map(report, "in_distribution"), _map(report, "unseen")
    drops = [s for s in ind if uns[s]["centralized-real"] < ind[s]["centralized-real"]]
    ok = len(drops) == len(report.seeds)
    acceptance_log("domain shift", ok, f"real-trained model scores lower on unseen than in-distribution in {len(drops)}/{len(report.seeds)} seeds")
    assert ok
