import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedscope import FedscopeError
from fedscope.detector import TrainOptions, train
from fedscope.federation import (
    ClientShard,
    FederatedDetector,
    FederationConfig,
    aggregation_weights,
    client_rng,
    fedavg_aggregate,
    partition_by_domain,
    partition_iid,
    run_federation,
    write_history_csv,
)
from fedscope.nn import Layer, ModelParams, init_params

from .test_detector import toy_set


def scalar_model(v):
    return ModelParams([Layer("L1", np.array([float(v)]), np.array([0.0]))])


def random_models(rng, k, shapes):
    return [
        ModelParams([Layer(f"L{i}", rng.normal(size=s), rng.normal(size=s[-1:])) for i, s in enumerate(shapes)])
        for _ in range(k)
    ]


def oracle_weighted_mean(values, counts):
    """Exact rational weighted mean, rounded once."""
    total = sum(counts)
    return float(sum(Fraction(v) * Fraction(c, total) for v, c in zip(values, counts)))


# -- partitioning -----------------------------------------------------------------


def test_partition_by_domain_two_named_shards():
    shards = partition_by_domain(list(range(5)), list(range(5, 8)))
    assert [(s.client_id, s.n) for s in shards] == [("real", 5), ("synthetic", 3)]


def test_partition_by_domain_rejects_empty():
    with pytest.raises(FedscopeError) as err:
        partition_by_domain([], [1])
    assert err.value.code == "empty-domain"


def test_partition_iid_600_into_3():
    assert [s.n for s in partition_iid(list(range(600)), 3, seed=0)] == [200, 200, 200]


def test_partition_iid_pigeonhole():
    assert sorted(s.n for s in partition_iid(list(range(7)), 3)) == [2, 2, 3]


def test_partition_iid_deterministic():
    a = partition_iid(list(range(50)), 3, seed=9)
    b = partition_iid(list(range(50)), 3, seed=9)
    assert [s.samples for s in a] == [s.samples for s in b]
    assert [s.samples for s in a] != [s.samples for s in partition_iid(list(range(50)), 3, seed=10)]


def test_partition_iid_too_many_clients():
    with pytest.raises(FedscopeError) as err:
        partition_iid([1, 2], 3)
    assert err.value.code == "too-many-clients"


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 80), st.integers(2, 6), st.integers(0, 1000))
def test_partition_iid_disjoint_exhaustive(n, k, seed):
    if k > n:
        return
    shards = partition_iid(list(range(n)), k, seed)
    union = sorted(x for s in shards for x in s.samples)
    assert union == list(range(n))
    sizes = [s.n for s in shards]
    assert max(sizes) - min(sizes) <= 1


def test_empty_shard_rejected():
    with pytest.raises(FedscopeError):
        ClientShard("a", [])


def test_config_needs_two_clients():
    with pytest.raises(FedscopeError):
        FederationConfig([ClientShard("a", [1])])


# -- aggregation ------------------------------------------------------------------


def test_aggregate_identical_is_fixed_point():
    m = init_params(0)
    out = fedavg_aggregate([m, m.copy(), m.copy()], [10, 20, 70])
    for a, b in zip(out.arrays(), m.arrays()):
        assert np.allclose(a, b, rtol=0, atol=1e-12)
    assert fedavg_aggregate([m, m.copy()], [5, 5]).equals(m)


def test_aggregate_two_equal_clients_scalar_mean():
    out = fedavg_aggregate([scalar_model(1.0), scalar_model(3.0)], [4, 4])
    assert out["L1"].weight[0] == 2.0


def test_aggregate_counts_100_300():
    a, b = 0.3, -1.7
    out = fedavg_aggregate([scalar_model(a), scalar_model(b)], [100, 300])
    assert abs(out["L1"].weight[0] - (0.25 * a + 0.75 * b)) <= 1e-12


def test_aggregate_uniform_is_arithmetic_mean():
    out = fedavg_aggregate([scalar_model(1.0), scalar_model(2.0), scalar_model(6.0)], [1, 10, 100], "uniform")
    assert out["L1"].weight[0] == pytest.approx(3.0, abs=1e-15)


def test_aggregate_random_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        k = int(rng.integers(2, 6))
        shapes = [tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 4)))) for _ in range(3)]
        models = random_models(rng, k, shapes)
        counts = [int(c) for c in rng.integers(1, 500, size=k)]
        out = fedavg_aggregate(models, counts)
        for li, layer in enumerate(out):
            for attr in ("weight", "bias"):
                got = getattr(layer, attr)
                for idx in np.ndindex(got.shape):
                    want = oracle_weighted_mean([float(getattr(m[li], attr)[idx]) for m in models], counts)
                    assert abs(got[idx] - want) <= 1e-12


def test_aggregate_permutation_invariant_bit_exact():
    rng = np.random.default_rng(1)
    models = random_models(rng, 5, [(3, 3, 2, 4), (4,)])
    counts = [3, 17, 5, 100, 42]
    ref = fedavg_aggregate(models, counts)
    order = list(range(5))
    for seed in range(10):
        random.Random(seed).shuffle(order)
        assert fedavg_aggregate([models[i] for i in order], [counts[i] for i in order]).equals(ref)


def test_aggregate_incompatible_models():
    with pytest.raises(FedscopeError) as err:
        fedavg_aggregate([init_params(0, 5), init_params(0, 3)], [1, 1])
    assert err.value.code == "incompatible-models"


def test_aggregate_rejects_bad_counts():
    with pytest.raises(FedscopeError):
        fedavg_aggregate([scalar_model(1), scalar_model(2)], [1, 0])
    with pytest.raises(FedscopeError):
        fedavg_aggregate([scalar_model(1), scalar_model(2)], [1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=10), st.sampled_from(["by-sample-count", "uniform"]))
def test_weights_sum_to_one(counts, weighting):
    assert abs(math.fsum(aggregation_weights(counts, weighting)) - 1.0) <= 1e-12


# -- round loop ---------------------------------------------------------------------


def shards(n=8, k=2):
    data = toy_set(n * k, seed=5)
    return [ClientShard(f"c{j}", data[j * n : (j + 1) * n]) for j in range(k)]


def test_zero_lr_round_keeps_init():
    init = init_params(0)
    cfg = FederationConfig(shards(), rounds=1, local_epochs=1, opts=TrainOptions(lr=0.0, weight_decay=0.0))
    res = run_federation(cfg, init)
    assert res.final.equals(init)


def test_two_identical_clients_equal_single_client_trajectory():
    data = toy_set(8, seed=2)
    opts = TrainOptions(seed=0)
    cfg = FederationConfig([ClientShard("twin", data), ClientShard("twin", list(data))], rounds=3, local_epochs=2, seed=7, opts=opts)
    fed = run_federation(cfg, init_params(0))

    single = init_params(0)
    no_stop = TrainOptions(**{**opts.__dict__, "patience": None})
    for r in range(3):
        single = train(single, data, 2, no_stop, rng=client_rng(7, "twin", r)).final_params
    assert fed.final.equals(single)


def test_client_order_does_not_change_global_model():
    s = shards(6, 3)
    a = run_federation(FederationConfig(s, rounds=2, local_epochs=1, seed=3), init_params(0))
    b = run_federation(FederationConfig(s[::-1], rounds=2, local_epochs=1, seed=3), init_params(0))
    assert a.final.equals(b.final)


def test_history_shape_and_finiteness(tmp_path):
    s = shards(6)
    res = run_federation(FederationConfig(s, rounds=10, local_epochs=2), init_params(0), val=toy_set(4, seed=9))
    assert len(res.history) == 10
    assert all(math.isfinite(v) for h in res.history for v in h["client_loss"].values())
    assert all(0.0 <= h["val_map50"] <= 1.0 for h in res.history)
    scores = [h["val_map50"] for h in res.history]
    assert res.best_round == int(np.argmax(scores))
    write_history_csv(res.history, tmp_path / "rounds.csv")
    lines = (tmp_path / "rounds.csv").read_text().splitlines()
    assert lines[0] == "round,loss_c0,loss_c1,val_map50" and len(lines) == 11


def test_client_error_carries_client_id():
    from fedscope.boxes import BoundingBox

    bad = [(np.zeros((16, 16, 3)), [BoundingBox(9, 1, 1, 5, 5)])]
    cfg = FederationConfig([ClientShard("ok", toy_set(4)), ClientShard("broken", bad)], rounds=1, local_epochs=1)
    with pytest.raises(FedscopeError) as err:
        run_federation(cfg, init_params(0))
    assert "'broken'" in str(err.value)


def test_federated_detector_estimator():
    data = toy_set(12, seed=4)
    X = np.stack([d[0] for d in data])
    y = [d[1] for d in data]
    groups = ["a"] * 6 + ["b"] * 6
    est = FederatedDetector(rounds=2, local_epochs=1).fit(X, y, groups, X[:4], y[:4])
    assert len(est.history_) == 2
    assert 0.0 <= est.score(X, y) <= 1.0
    assert est.get_params()["rounds"] == 2
