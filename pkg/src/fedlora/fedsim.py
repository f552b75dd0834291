"""The federated round engine: broadcast, masked local training, server
aggregation under a chosen strategy, and per-round trace recording.

Aggregation strategies differ in exactness. Averaging only the trained
factor while the other is frozen and shared makes the averaged factors'
product equal the average of the clients' products; averaging both factors
independently does not, and the gap is measurable with interference_gap.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .adapters import (
    BOTH_SCHEDULE,
    FFA_SCHEDULE,
    ROLORA_SCHEDULE,
    InitSpec,
    LoraAdapter,
    Trainable,
    UpdateSchedule,
    effective_update,
    init_adapter,
    init_with_angle,
    trainable_mask,
)
from .errors import (
    BadSpec,
    DivergenceDetected,
    FrozenFactorMismatch,
    ShapeMismatch,
)
from .linalg import derive_rng, frob_norm, truncated_svd
from .tasks import (
    ClassifierTask,
    ClientShard,
    LinearTask,
    accuracy_two_layer,
    gen_linear_shard,
    grad_a_linear,
    grad_b_linear,
    grad_two_layer,
    local_loss_linear,
    loss_two_layer,
    population_shard,
    TwoLayerNet,
)

DIVERGENCE_THRESHOLD = 1e8

_TAG_DATA = 0xD0
_TAG_INIT = 0x10
_TAG_CLIENT = 0xC0

TRACE_COLUMNS = ("round", "trained_factor", "global_loss", "angle_distance",
                 "test_accuracy", "elapsed_ms")


class Strategy(str, Enum):
    ROLORA = "rolora"
    FFA_LORA = "ffa-lora"
    FEDAVG_LORA = "fedavg-lora"
    FLEXLORA = "flexlora"
    FLORA = "flora"


DEFAULT_SCHEDULES = {
    Strategy.ROLORA: ROLORA_SCHEDULE,
    Strategy.FFA_LORA: FFA_SCHEDULE,
    Strategy.FEDAVG_LORA: BOTH_SCHEDULE,
    Strategy.FLEXLORA: BOTH_SCHEDULE,
    Strategy.FLORA: BOTH_SCHEDULE,
}


@dataclass(frozen=True)
class FedConfig:
    """One federated run: full participation of n_clients for rounds rounds,
    local_steps gradient steps per client per round at rate eta."""

    n_clients: int
    rounds: int
    local_steps: int = 1
    batch_size: int = 64
    eta: float = 0.01
    strategy: Strategy = Strategy.ROLORA
    schedule: UpdateSchedule | None = None
    init: InitSpec = field(default_factory=InitSpec)
    seed: int = 0
    check_aggregation: bool = True

    def __post_init__(self) -> None:
        if self.n_clients < 1 or self.batch_size < 1:
            raise BadSpec("n_clients and batch_size must be >= 1")
        if self.rounds < 0 or self.local_steps < 0:
            raise BadSpec("rounds and local_steps must be >= 0")
        if self.eta <= 0:
            raise BadSpec("eta must be positive")

    def resolved_schedule(self) -> UpdateSchedule:
        sched = self.schedule or DEFAULT_SCHEDULES[self.strategy]
        exact = self.strategy in (Strategy.ROLORA, Strategy.FFA_LORA)
        if exact and Trainable.BOTH in sched.pattern:
            raise BadSpec(f"{self.strategy.value} schedules cannot contain 'AB'")
        if not exact and any(p != Trainable.BOTH for p in sched.pattern):
            raise BadSpec(f"{self.strategy.value} requires an all-'AB' schedule")
        return sched


@dataclass
class RoundRecord:
    round: int
    trained_factor: str
    global_loss: float
    angle_distance: float | None
    test_accuracy: float | None
    elapsed_ms: float
    agg_gap: float | None = None
    agg_mean_norm: float | None = None


@dataclass
class TrainingTrace:
    strategy: Strategy
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    final_adapter: LoraAdapter | None = None

    def rows(self) -> list[dict]:
        return [{
            "round": rec.round,
            "trained_factor": rec.trained_factor,
            "global_loss": _fmt(rec.global_loss),
            "angle_distance": _fmt(rec.angle_distance),
            "test_accuracy": _fmt(rec.test_accuracy),
            "elapsed_ms": f"{rec.elapsed_ms:.3f}",
        } for rec in self.records]

    def to_csv(self, path: str) -> None:
        write_trace_csv(path, self.rows())


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def write_trace_csv(path: str, rows: list[dict], columns=TRACE_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _mean_stack(arrays: list[np.ndarray]) -> np.ndarray:
    """Mean centered about the first element; the mean of identical arrays
    is bit-exact (deviations cancel to exactly zero before the division)."""
    base = arrays[0]
    acc = np.zeros_like(base)
    for x in arrays[1:]:
        acc += x - base
    return base + acc / len(arrays)


def _check_shapes(locals_: list[LoraAdapter]) -> None:
    if not locals_:
        raise BadSpec("cannot aggregate an empty client list")
    first = locals_[0]
    for ad in locals_[1:]:
        if ad.a.shape != first.a.shape or ad.b.shape != first.b.shape:
            raise ShapeMismatch("client adapters have mismatched shapes")
        if ad.alpha != first.alpha:
            raise BadSpec("client adapters have mismatched alpha")


def aggregate_rolora(locals_: list[LoraAdapter], mask: Trainable) -> LoraAdapter:
    """Average the trained factor; pass the frozen factor through unchanged.

    Because the frozen factor is identical across clients, the result's
    effective update equals the mean of the clients' effective updates.
    Raises FrozenFactorMismatch when the frozen factor differs anywhere,
    which signals a protocol bug rather than a numerical issue.
    """
    _check_shapes(locals_)
    if mask not in (Trainable.B, Trainable.A):
        raise BadSpec("alternating aggregation needs a single trained factor")
    frozen = "a" if mask is Trainable.B else "b"
    ref = getattr(locals_[0], frozen)
    for i, ad in enumerate(locals_[1:], start=1):
        diff = np.abs(getattr(ad, frozen) - ref)
        if diff.size and diff.max() > 1e-15:
            raise FrozenFactorMismatch(
                f"client {i} modified frozen factor {frozen} (max dev {diff.max():.3e})")
    if mask is Trainable.B:
        return locals_[0].with_b(_mean_stack([ad.b for ad in locals_]))
    return locals_[0].with_a(_mean_stack([ad.a for ad in locals_]))


def aggregate_fedavg(locals_: list[LoraAdapter]) -> LoraAdapter:
    """Factor-wise means; not product-exact unless the clients agree."""
    _check_shapes(locals_)
    return LoraAdapter(_mean_stack([ad.a for ad in locals_]),
                       _mean_stack([ad.b for ad in locals_]),
                       locals_[0].alpha)


def interference_gap(locals_: list[LoraAdapter]) -> float:
    """|| mean(a_i b_i) - mean(a_i) mean(b_i) ||_F, the aggregation error of
    naive factor averaging. Exactly zero for one client or identical clients."""
    _check_shapes(locals_)
    prod_mean = _mean_stack([ad.a @ ad.b for ad in locals_])
    a_mean = _mean_stack([ad.a for ad in locals_])
    b_mean = _mean_stack([ad.b for ad in locals_])
    return frob_norm(prod_mean - a_mean @ b_mean)


def aggregate_flexlora(locals_: list[LoraAdapter], r: int) -> LoraAdapter:
    """Truncated SVD of the averaged effective updates back to rank r."""
    _check_shapes(locals_)
    m = _mean_stack([effective_update(ad) for ad in locals_])
    u, s, v = truncated_svd(m, r)
    alpha = locals_[0].alpha
    return LoraAdapter((u * s) / alpha, v.T, alpha)


def aggregate_flora(locals_: list[LoraAdapter]) -> LoraAdapter:
    """Stack client factors side by side; product-exact at rank n_clients*r.

    The stacked b is divided by the client count so the aggregate equals the
    mean (not the sum) of the client effective updates.
    """
    _check_shapes(locals_)
    n = len(locals_)
    a = np.concatenate([ad.a for ad in locals_], axis=1)
    b = np.concatenate([ad.b for ad in locals_], axis=0) / n
    return LoraAdapter(a, b, locals_[0].alpha)


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

def local_train(shard: ClientShard, adapter: LoraAdapter, mask: Trainable,
                steps: int, eta: float, rng: np.random.Generator,
                batch_size: int = 64,
                w_out: np.ndarray | None = None) -> LoraAdapter:
    """steps gradient-descent steps on the unfrozen factor(s) only.

    The frozen factor of the returned adapter is copied from the broadcast
    adapter and never touched, so it stays bitwise equal to the server copy.
    Linear shards take full-batch steps; classifier shards take minibatch
    steps of batch_size, reshuffling whenever an epoch boundary is crossed.
    """
    if shard.features is not None:
        if w_out is None:
            raise BadSpec("classifier local training needs the frozen w_out")
        return _local_train_classifier(
            shard, adapter, mask, steps, eta, rng, batch_size, w_out)
    return _local_train_linear(shard, adapter, mask, steps, eta)


def _local_train_linear(shard: ClientShard, adapter: LoraAdapter,
                        mask: Trainable, steps: int, eta: float) -> LoraAdapter:
    if adapter.rank != 1 or adapter.alpha != 1.0:
        raise BadSpec("linear-task training is defined for rank-1, alpha=1 adapters")
    a = adapter.a[:, 0].copy()
    b = adapter.b[0, :].copy()
    for _ in range(steps):
        if mask in (Trainable.A, Trainable.BOTH):
            ga = grad_a_linear(shard, a, b)
        if mask in (Trainable.B, Trainable.BOTH):
            b = b - eta * grad_b_linear(shard, a, b)
        if mask in (Trainable.A, Trainable.BOTH):
            a = a - eta * ga
    if mask is Trainable.B:
        return adapter.with_b(b.reshape(1, -1))
    if mask is Trainable.A:
        return adapter.with_a(a.reshape(-1, 1))
    return LoraAdapter(a.reshape(-1, 1), b.reshape(1, -1), adapter.alpha)


def _local_train_classifier(shard: ClientShard, adapter: LoraAdapter,
                            mask: Trainable, steps: int, eta: float,
                            rng: np.random.Generator, batch_size: int,
                            w_out: np.ndarray) -> LoraAdapter:
    a = adapter.a.copy()
    b = adapter.b.copy()
    n = shard.n_samples
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        batch = ClientShard(features=shard.features[idx], labels=shard.labels[idx])
        net = TwoLayerNet(w_out, LoraAdapter(a, b, adapter.alpha))
        ga, gb = grad_two_layer(net, batch, mask)
        if ga is not None:
            a = a - eta * ga
        if gb is not None:
            b = b - eta * gb
    if mask is Trainable.B:
        return adapter.with_b(b)
    if mask is Trainable.A:
        return adapter.with_a(a)
    return LoraAdapter(a, b, adapter.alpha)


# ---------------------------------------------------------------------------
# The round loop
# ---------------------------------------------------------------------------

def _aggregate(strategy: Strategy, locals_: list[LoraAdapter], mask: Trainable,
               base_rank: int) -> LoraAdapter:
    if mask in (Trainable.B, Trainable.A):
        return aggregate_rolora(locals_, mask)
    if strategy is Strategy.FEDAVG_LORA:
        return aggregate_fedavg(locals_)
    if strategy is Strategy.FLEXLORA:
        return aggregate_flexlora(locals_, base_rank)
    if strategy is Strategy.FLORA:
        return aggregate_flora(locals_)
    raise BadSpec(f"strategy {strategy} cannot aggregate mask {mask}")


def _initial_adapter(cfg: FedConfig, task) -> LoraAdapter:
    if isinstance(task, LinearTask):
        spec = cfg.init
        if spec.a_angle is not None:
            a = init_with_angle(task.a_star, spec.a_angle,
                                derive_rng(cfg.seed, _TAG_INIT))
            base = init_adapter(
                InitSpec(a_init=a.reshape(-1, 1), b_init=spec.b_init,
                         b_std=spec.b_std, alpha=spec.alpha, seed=spec.seed),
                task.d, 1)
            return base
        if isinstance(spec.a_init, str) and spec.a_init == "gaussian":
            spec = InitSpec(a_init="gaussian-unit", b_init=spec.b_init,
                            b_std=spec.b_std, alpha=spec.alpha, seed=spec.seed)
        return init_adapter(spec, task.d, 1)
    if isinstance(task, ClassifierTask):
        if cfg.init.a_angle is not None:
            raise BadSpec("a_angle initialization only applies to linear tasks")
        return init_adapter(cfg.init, task.d, task.rank)
    raise BadSpec(f"unknown task type {type(task).__name__}")


def _client_shards(cfg: FedConfig, task) -> list[ClientShard]:
    if isinstance(task, ClassifierTask):
        if task.n_clients != cfg.n_clients:
            raise BadSpec("config n_clients does not match task shards")
        return list(task.train_shards)
    if task.n_clients != cfg.n_clients:
        raise BadSpec("config n_clients does not match task b_stars")
    if task.mode == "population":
        return [population_shard(task, i) for i in range(task.n_clients)]
    return [gen_linear_shard(task, i, derive_rng(cfg.seed, _TAG_DATA, i))
            for i in range(task.n_clients)]


def _global_metrics(task, adapter: LoraAdapter,
                    shards: list[ClientShard]) -> tuple[float, float | None, float | None]:
    """(global_loss, angle_distance, test_accuracy) for the aggregated model."""
    if isinstance(task, LinearTask):
        a = adapter.a[:, 0]
        b = adapter.b[0, :]
        loss = float(np.mean([local_loss_linear(s, a, b) for s in shards]))
        norm = np.linalg.norm(a)
        angle = None
        if norm > 0:
            u = a / norm
            angle = float(np.linalg.norm(task.a_star - u * (u @ task.a_star)))
        return loss, angle, None
    net = TwoLayerNet(task.w_out, adapter)
    loss = float(np.mean([loss_two_layer(net, s.features, s.labels) for s in shards]))
    acc = accuracy_two_layer(net, task.test_features, task.test_labels)
    return loss, None, acc


def run_federated(cfg: FedConfig, task, workers: int = 1) -> TrainingTrace:
    """Run cfg.rounds communication rounds of the configured protocol.

    Each client draws its round rng from (seed, client, round), and the
    aggregation consumes client results in index order, so the trace is
    bitwise identical for any worker count.
    """
    schedule = cfg.resolved_schedule()
    shards = _client_shards(cfg, task)
    global_ad = _initial_adapter(cfg, task)
    base_rank = global_ad.rank
    w_out = task.w_out if isinstance(task, ClassifierTask) else None
    trace = TrainingTrace(strategy=cfg.strategy, seed=cfg.seed)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rnd in range(cfg.rounds):
            t0 = time.perf_counter()
            mask = trainable_mask(schedule, rnd)
            broadcast = global_ad

            def train_one(i: int) -> LoraAdapter:
                return local_train(
                    shards[i], broadcast, mask, cfg.local_steps, cfg.eta,
                    derive_rng(cfg.seed, _TAG_CLIENT, i, rnd),
                    batch_size=cfg.batch_size, w_out=w_out)

            if pool is not None:
                locals_ = list(pool.map(train_one, range(cfg.n_clients)))
            else:
                locals_ = [train_one(i) for i in range(cfg.n_clients)]

            global_ad = _aggregate(cfg.strategy, locals_, mask, base_rank)

            gap = mean_norm = None
            if cfg.check_aggregation:
                mean_eff = _mean_stack([effective_update(ad) for ad in locals_])
                gap = frob_norm(effective_update(global_ad) - mean_eff)
                mean_norm = frob_norm(mean_eff)

            loss, angle, acc = _global_metrics(task, global_ad, shards)
            if not np.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
                raise DivergenceDetected(
                    f"global loss {loss!r} at round {rnd}; reduce eta")
            trace.records.append(RoundRecord(
                round=rnd, trained_factor=mask.value, global_loss=loss,
                angle_distance=angle, test_accuracy=acc,
                elapsed_ms=(time.perf_counter() - t0) * 1e3,
                agg_gap=gap, agg_mean_norm=mean_norm))
    finally:
        if pool is not None:
            pool.shutdown()

    trace.final_adapter = global_ad
    return trace
