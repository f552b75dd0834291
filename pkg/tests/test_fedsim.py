import csv

import numpy as np
import pytest

from fedlora.adapters import (
    InitSpec,
    LoraAdapter,
    Trainable,
    UpdateSchedule,
    effective_update,
)
from fedlora.errors import (
    BadSpec,
    DivergenceDetected,
    FrozenFactorMismatch,
    ShapeMismatch,
)
from fedlora.fedsim import (
    FedConfig,
    Strategy,
    aggregate_fedavg,
    aggregate_flexlora,
    aggregate_flora,
    aggregate_rolora,
    interference_gap,
    local_train,
    run_federated,
)
from fedlora.linalg import make_rng
from fedlora.tasks import (
    gen_linear_shard,
    grad_a_linear,
    make_cluster_task,
    make_homogeneous_task,
)


def _random_adapters(n, d=6, r=2, seed=0, shared_a=False):
    rng = make_rng(seed)
    a_shared = rng.standard_normal((d, r))
    out = []
    for _ in range(n):
        a = a_shared if shared_a else rng.standard_normal((d, r))
        out.append(LoraAdapter(a, rng.standard_normal((r, d))))
    return out


# --- local training ---------------------------------------------------------

def test_local_train_zero_steps_is_identity():
    task = make_homogeneous_task(5, 20, 2, 1.0, make_rng(0))
    shard = gen_linear_shard(task, 0, make_rng(1))
    ad = LoraAdapter(task.a_star.reshape(-1, 1), np.zeros((1, 5)))
    out = local_train(shard, ad, Trainable.B, 0, 0.1, make_rng(2))
    assert np.array_equal(out.a, ad.a) and np.array_equal(out.b, ad.b)


def test_local_train_keeps_frozen_factor_bitwise():
    task = make_cluster_task(d=8, rank=2, n_classes=4, n_clients=4, seed=3)
    ad = LoraAdapter(make_rng(4).standard_normal((8, 2)),
                     make_rng(5).standard_normal((2, 8)))
    out = local_train(task.train_shards[0], ad, Trainable.B, 3, 0.1,
                      make_rng(6), batch_size=4, w_out=task.w_out)
    assert np.array_equal(out.a, ad.a)
    assert not np.array_equal(out.b, ad.b)


def test_local_train_single_step_matches_hand_update():
    task = make_homogeneous_task(5, 30, 2, 1.0, make_rng(7))
    shard = gen_linear_shard(task, 0, make_rng(8))
    rng = make_rng(9)
    a = rng.standard_normal(5)
    a /= np.linalg.norm(a)
    b = rng.standard_normal(5)
    ad = LoraAdapter(a.reshape(-1, 1), b.reshape(1, -1))
    eta = 0.05
    out = local_train(shard, ad, Trainable.A, 1, eta, make_rng(10))
    expected = a - eta * grad_a_linear(shard, a, b)
    assert np.allclose(out.a[:, 0], expected, atol=1e-15)
    assert np.array_equal(out.b, ad.b)


# --- alternating aggregation ------------------------------------------------

def test_aggregate_rolora_single_client():
    ads = _random_adapters(1, seed=11)
    out = aggregate_rolora(ads, Trainable.B)
    assert np.array_equal(out.a, ads[0].a) and np.array_equal(out.b, ads[0].b)


def test_aggregate_rolora_product_exactness():
    ads = _random_adapters(5, seed=12, shared_a=True)
    out = aggregate_rolora(ads, Trainable.B)
    mean_products = np.mean([effective_update(ad) for ad in ads], axis=0)
    agg = effective_update(out)
    assert np.linalg.norm(agg - mean_products) <= 1e-12 * np.linalg.norm(mean_products)


def test_aggregate_rolora_detects_corrupted_frozen_factor():
    ads = _random_adapters(3, seed=13, shared_a=True)
    bad_a = ads[1].a.copy()
    bad_a[0, 0] += 1e-6
    ads[1] = LoraAdapter(bad_a, ads[1].b)
    with pytest.raises(FrozenFactorMismatch):
        aggregate_rolora(ads, Trainable.B)


def test_aggregate_rolora_rejects_both_mask():
    with pytest.raises(BadSpec):
        aggregate_rolora(_random_adapters(2, shared_a=True), Trainable.BOTH)


# --- naive averaging and interference ---------------------------------------

def test_aggregate_fedavg_identical_clients_exact():
    base = _random_adapters(1, seed=14)[0]
    ads = [base] * 3
    out = aggregate_fedavg(ads)
    assert np.array_equal(out.a, base.a) and np.array_equal(out.b, base.b)
    assert interference_gap(ads) == 0.0


def test_aggregate_fedavg_single_client_exact():
    ads = _random_adapters(1, seed=15)
    out = aggregate_fedavg(ads)
    assert np.array_equal(effective_update(out), effective_update(ads[0]))
    assert interference_gap(ads) == 0.0


def test_interference_gap_unit_basis_example():
    d = 4
    e = np.eye(d)
    ads = [LoraAdapter(e[:, :1], e[:1, :]), LoraAdapter(e[:, 1:2], e[1:2, :])]
    assert interference_gap(ads) == pytest.approx(0.5, abs=1e-15)
    avg = aggregate_fedavg(ads)
    gap = np.linalg.norm(effective_update(avg)
                         - np.mean([effective_update(a) for a in ads], axis=0))
    assert gap == pytest.approx(0.5, abs=1e-15)


def test_interference_gap_positive_for_distinct_clients():
    for seed in range(20):
        ads = _random_adapters(3, seed=100 + seed)
        assert interference_gap(ads) > 0


def test_aggregate_shape_mismatch():
    ads = _random_adapters(2, seed=16)
    bad = LoraAdapter(np.zeros((7, 2)), np.zeros((2, 7)))
    with pytest.raises(ShapeMismatch):
        aggregate_fedavg([ads[0], bad])


# --- SVD and stacking aggregation -------------------------------------------

def test_flexlora_shared_a_low_rank_lossless():
    ads = _random_adapters(4, d=8, r=2, seed=17, shared_a=True)
    out = aggregate_flexlora(ads, 2)
    mean_eff = np.mean([effective_update(ad) for ad in ads], axis=0)
    assert np.linalg.norm(effective_update(out) - mean_eff) <= 1e-8 * np.linalg.norm(mean_eff)


def test_flexlora_single_client_round_trip():
    ads = _random_adapters(1, d=8, r=3, seed=18)
    out = aggregate_flexlora(ads, 3)
    eff = effective_update(ads[0])
    assert np.linalg.norm(effective_update(out) - eff) <= 1e-8 * np.linalg.norm(eff)


def test_flexlora_rank_one_residual_is_tail_energy():
    ads = _random_adapters(5, d=8, r=3, seed=19)
    mean_eff = np.mean([effective_update(ad) for ad in ads], axis=0)
    out = aggregate_flexlora(ads, 1)
    resid = np.linalg.norm(effective_update(out) - mean_eff)
    svals = np.linalg.svd(mean_eff, compute_uv=False)
    assert resid == pytest.approx(np.sqrt(np.sum(svals[1:] ** 2)), abs=1e-8)


def test_flora_product_exact_and_rank():
    ads = _random_adapters(4, d=8, r=2, seed=20)
    out = aggregate_flora(ads)
    mean_eff = np.mean([effective_update(ad) for ad in ads], axis=0)
    assert np.linalg.norm(effective_update(out) - mean_eff) <= 1e-12 * np.linalg.norm(mean_eff)
    assert out.rank == 8
    svals = np.linalg.svd(effective_update(out), compute_uv=False)
    assert np.sum(svals > 1e-10 * svals[0]) <= 8


def test_flexlora_equals_truncated_flora():
    ads = _random_adapters(6, d=10, r=2, seed=21)
    flora_eff = effective_update(aggregate_flora(ads))
    flex_eff = effective_update(aggregate_flexlora(ads, 2))
    u, s, vt = np.linalg.svd(flora_eff)
    best = (u[:, :2] * s[:2]) @ vt[:2]
    assert np.linalg.norm(flex_eff - best) <= 1e-8 * np.linalg.norm(best)


def test_flora_single_client_identity():
    ads = _random_adapters(1, seed=22)
    out = aggregate_flora(ads)
    assert np.allclose(effective_update(out), effective_update(ads[0]), atol=1e-15)


# --- the round loop ----------------------------------------------------------

def _toy_fed_cfg(strategy=Strategy.ROLORA, rounds=6, seed=1, eta=0.2, **kw):
    return FedConfig(
        n_clients=4, rounds=rounds, local_steps=2, batch_size=8, eta=eta,
        strategy=strategy,
        init=InitSpec(a_init="gaussian", b_init="gaussian", seed=seed),
        seed=seed, **kw)


def _toy_classifier(seed=1):
    return make_cluster_task(d=12, rank=2, n_classes=4, n_clients=4, seed=seed,
                             labels_per_client=1, margin=3.0,
                             train_per_class=24, test_per_class=12)


def test_run_federated_zero_rounds():
    task = _toy_classifier()
    cfg = _toy_fed_cfg(rounds=0)
    trace = run_federated(cfg, task)
    assert trace.records == []
    ref = run_federated(_toy_fed_cfg(rounds=0), task)
    assert np.array_equal(trace.final_adapter.a, ref.final_adapter.a)


def test_run_federated_worker_count_invariance():
    task = _toy_classifier()
    t1 = run_federated(_toy_fed_cfg(), task, workers=1)
    t8 = run_federated(_toy_fed_cfg(), task, workers=8)
    for r1, r8 in zip(t1.records, t8.records):
        assert r1.global_loss == r8.global_loss
        assert r1.test_accuracy == r8.test_accuracy
        assert r1.trained_factor == r8.trained_factor
    assert np.array_equal(t1.final_adapter.a, t8.final_adapter.a)
    assert np.array_equal(t1.final_adapter.b, t8.final_adapter.b)


def test_ffa_equals_rolora_with_b_only_schedule():
    task = _toy_classifier()
    ffa = run_federated(_toy_fed_cfg(strategy=Strategy.FFA_LORA), task)
    pinned = run_federated(
        _toy_fed_cfg(strategy=Strategy.ROLORA,
                     schedule=UpdateSchedule((Trainable.B,))), task)
    for r1, r2 in zip(ffa.records, pinned.records):
        assert r1.global_loss == r2.global_loss
        assert r1.test_accuracy == r2.test_accuracy
    assert np.array_equal(ffa.final_adapter.b, pinned.final_adapter.b)


def test_rolora_rounds_alternate_and_aggregation_is_exact():
    task = _toy_classifier()
    trace = run_federated(_toy_fed_cfg(rounds=8), task)
    assert [r.trained_factor for r in trace.records] == ["B", "A"] * 4
    for rec in trace.records:
        assert rec.agg_gap <= 1e-12 * max(rec.agg_mean_norm, 1e-300)


@pytest.mark.parametrize("strategy", [Strategy.FEDAVG_LORA, Strategy.FLEXLORA])
def test_run_federated_both_strategies_complete(strategy):
    task = _toy_classifier()
    trace = run_federated(_toy_fed_cfg(strategy=strategy, rounds=4), task)
    assert len(trace.records) == 4
    assert all(r.trained_factor == "AB" for r in trace.records)
    assert trace.final_adapter.rank == 2


def test_run_federated_flora_rank_grows():
    task = _toy_classifier()
    trace = run_federated(_toy_fed_cfg(strategy=Strategy.FLORA, rounds=2), task)
    assert trace.final_adapter.rank == 2 * 4 * 4


def test_run_federated_linear_task_records_angle():
    rng = make_rng(30)
    task = make_homogeneous_task(6, 40, 4, 1.0, rng)
    cfg = FedConfig(n_clients=4, rounds=6, local_steps=1, eta=0.1,
                    strategy=Strategy.ROLORA,
                    init=InitSpec(a_init="gaussian-unit", b_init="zero",
                                  a_angle=0.5, seed=2),
                    seed=2)
    trace = run_federated(cfg, task)
    assert all(r.angle_distance is not None for r in trace.records)
    assert all(r.test_accuracy is None for r in trace.records)
    assert trace.records[0].angle_distance <= 1.0


def test_run_federated_divergence_detected():
    task = _toy_classifier()
    with pytest.raises(DivergenceDetected):
        run_federated(_toy_fed_cfg(eta=1e6, rounds=3), task)


def test_schedule_strategy_consistency_checks():
    with pytest.raises(BadSpec):
        _toy_fed_cfg(strategy=Strategy.FFA_LORA,
                     schedule=UpdateSchedule((Trainable.BOTH,))).resolved_schedule()
    with pytest.raises(BadSpec):
        _toy_fed_cfg(strategy=Strategy.FEDAVG_LORA,
                     schedule=UpdateSchedule((Trainable.B,))).resolved_schedule()


def test_trace_csv_schema(tmp_path):
    task = _toy_classifier()
    trace = run_federated(_toy_fed_cfg(rounds=3), task)
    path = tmp_path / "trace.csv"
    trace.to_csv(str(path))
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert list(rows[0].keys()) == ["round", "trained_factor", "global_loss",
                                    "angle_distance", "test_accuracy", "elapsed_ms"]
    assert rows[0]["angle_distance"] == ""  # classifier task: not applicable
    assert rows[0]["test_accuracy"] != ""
