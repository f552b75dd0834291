"""Task families: the rank-1 linear regression model used by the convergence
theory, and a two-layer ReLU classifier for the non-linear experiments.

Linear tasks come in two modes. Finite-sample shards hold a Gaussian design
matrix x and targets y = x a* b*^T; population mode drops the sampling
entirely and works with the infinite-sample loss ||a* b*^T - a b^T||^2,
which lets the closed-form theory be checked at machine precision.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .adapters import LoraAdapter, Trainable
from .errors import (
    BadPartition,
    BadRange,
    BadSpec,
    DegenerateDesign,
    IdxFormatError,
    PopulationModeError,
    ShapeMismatch,
)
from .linalg import unit_normalize

FINITE = "finite-sample"
POPULATION = "population"

# a^T X^T X a <= DEGENERATE_TOL * m marks the local problem singular.
DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class LinearTask:
    """Rank-1 linear regression setup shared by all clients.

    b_stars has one row per client; the homogeneous case is all rows equal.
    l_max, when set, is the a-priori bound on ||b_bar_star|| used by step
    size preconditions.
    """

    d: int
    m: int
    a_star: np.ndarray
    b_stars: np.ndarray
    mode: str = FINITE
    l_max: float | None = None

    def __post_init__(self) -> None:
        a = np.array(self.a_star, dtype=float)
        bs = np.atleast_2d(np.array(self.b_stars, dtype=float))
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise BadSpec("a_star must be a unit vector")
        if a.shape != (self.d,) or bs.shape[1] != self.d:
            raise ShapeMismatch("a_star/b_stars dimension mismatch")
        if self.mode not in (FINITE, POPULATION):
            raise BadSpec(f"unknown mode {self.mode!r}")
        if self.l_max is not None and np.linalg.norm(bs.mean(axis=0)) > self.l_max + 1e-12:
            raise BadSpec("||b_bar_star|| exceeds configured l_max")
        a.setflags(write=False)
        bs.setflags(write=False)
        object.__setattr__(self, "a_star", a)
        object.__setattr__(self, "b_stars", bs)

    @property
    def n_clients(self) -> int:
        return self.b_stars.shape[0]

    @property
    def homogeneous(self) -> bool:
        return bool(np.all(self.b_stars == self.b_stars[0]))

    @property
    def b_bar_star(self) -> np.ndarray:
        # Centered about the first client so identical rows average to
        # themselves bit-exactly (keeps the homogeneous variance at 0.0).
        return self.b_stars[0] + (self.b_stars - self.b_stars[0]).mean(axis=0)

    @property
    def b_star(self) -> np.ndarray:
        if not self.homogeneous:
            raise BadSpec("b_star is only defined for homogeneous tasks")
        return self.b_stars[0]

    def step_bound(self) -> float:
        """L_max used in learning-rate preconditions."""
        if self.l_max is not None:
            return self.l_max
        return float(np.linalg.norm(self.b_bar_star))


def make_homogeneous_task(d: int, m: int, n_clients: int, b_norm: float,
                          rng: np.random.Generator, mode: str = FINITE) -> LinearTask:
    """Random a*, common b* with ||b*|| = b_norm, identical across clients."""
    a_star = unit_normalize(rng.standard_normal(d))
    b = rng.standard_normal(d)
    b *= b_norm / np.linalg.norm(b)
    return LinearTask(d, m, a_star, np.tile(b, (n_clients, 1)), mode, l_max=b_norm)


def make_heterogeneous_task(d: int, m: int, n_clients: int, b_bar: np.ndarray,
                            gamma: float, rng: np.random.Generator,
                            mode: str = POPULATION) -> LinearTask:
    """Clients with b_i* = b_bar + gamma * z_i, z_i recentred and rescaled so
    the empirical mean is exactly b_bar and the client variance exactly
    gamma^2."""
    b_bar = np.asarray(b_bar, dtype=float)
    a_star = unit_normalize(rng.standard_normal(d))
    if gamma == 0.0 or n_clients == 1:
        b_stars = np.tile(b_bar, (n_clients, 1))
    else:
        z = rng.standard_normal((n_clients, d))
        z -= z.mean(axis=0)
        scale = np.sqrt(np.mean(np.sum(z**2, axis=1)))
        if scale <= 0:
            raise BadSpec("degenerate deviation draw; use another seed")
        b_stars = b_bar + (gamma / scale) * z
    l_max = float(np.linalg.norm(b_bar))
    return LinearTask(d, m, a_star, b_stars, mode, l_max=max(l_max, 1e-12))


@dataclass(frozen=True)
class ClientShard:
    """One client's local data.

    Finite-sample linear shards carry (x, y); population shards carry the
    ground truth (a_star, b_star) instead. Classifier shards carry
    (features, labels).
    """

    x: np.ndarray | None = None
    y: np.ndarray | None = None
    a_star: np.ndarray | None = None
    b_star: np.ndarray | None = None
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def population(self) -> bool:
        return self.x is None and self.a_star is not None

    @property
    def n_samples(self) -> int:
        if self.features is not None:
            return self.features.shape[0]
        if self.x is not None:
            return self.x.shape[0]
        raise BadSpec("population shards have no sample count")


def gen_linear_shard(task: LinearTask, client: int, rng: np.random.Generator) -> ClientShard:
    """Fresh finite-sample shard: x ~ N(0,1)^{m x d}, y = x a* b_i*^T."""
    if task.mode != FINITE:
        raise PopulationModeError("gen_linear_shard needs a finite-sample task")
    x = rng.standard_normal((task.m, task.d))
    y = np.outer(x @ task.a_star, task.b_stars[client])
    return ClientShard(x=x, y=y, a_star=task.a_star, b_star=task.b_stars[client])


def population_shard(task: LinearTask, client: int) -> ClientShard:
    if task.mode != POPULATION:
        raise BadSpec("population_shard needs a population task")
    return ClientShard(a_star=task.a_star, b_star=task.b_stars[client])


def local_loss_linear(shard: ClientShard, a: np.ndarray, b: np.ndarray) -> float:
    """(1/m) ||y - x a b^T||^2, or ||a* b*^T - a b^T||^2 in population mode."""
    if shard.population:
        diff = np.outer(shard.a_star, shard.b_star) - np.outer(a, b)
        return float(np.sum(diff**2))
    if shard.x is None or shard.y is None:
        raise ShapeMismatch("shard has no linear data")
    m = shard.x.shape[0]
    resid = shard.y - np.outer(shard.x @ a, b)
    return float(np.sum(resid**2) / m)


def solve_b_exact(shard: ClientShard, a: np.ndarray) -> np.ndarray:
    """argmin_b of the local loss at fixed a.

    Finite-sample closed form b = y^T (x a) / ||x a||^2; population form
    b = b* (a*^T a) for unit a.
    """
    if shard.population:
        return shard.b_star * float(shard.a_star @ a)
    u = shard.x @ a
    denom = float(u @ u)
    if denom <= DEGENERATE_TOL * shard.x.shape[0]:
        raise DegenerateDesign(f"a^T X^T X a = {denom:.3e} is numerically singular")
    return (shard.y.T @ u) / denom


def grad_a_linear(shard: ClientShard, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Analytic gradient of the local loss with respect to a.

    Finite-sample: (2/m)(X^T X a (b^T b) - X^T Y b); population:
    2 (a b^T - a* b*^T) b.
    """
    if shard.population:
        return 2.0 * (a * float(b @ b) - shard.a_star * float(shard.b_star @ b))
    m = shard.x.shape[0]
    u = shard.x @ a
    return (2.0 / m) * (shard.x.T @ u * float(b @ b) - shard.x.T @ (shard.y @ b))


def grad_b_linear(shard: ClientShard, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Analytic gradient of the local loss with respect to b."""
    if shard.population:
        return 2.0 * (b * float(a @ a) - shard.b_star * float(shard.a_star @ a))
    m = shard.x.shape[0]
    u = shard.x @ a
    return (2.0 / m) * (b * float(u @ u) - shard.y.T @ u)


@dataclass(frozen=True)
class ClientVariance:
    """gamma^2 = (1/N) sum_i ||b_i* - b_bar*||^2."""

    gamma_sq: float


def client_variance(task: LinearTask) -> ClientVariance:
    dev = task.b_stars - task.b_bar_star
    return ClientVariance(float(np.mean(np.sum(dev**2, axis=1))))


# ---------------------------------------------------------------------------
# Two-layer ReLU classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwoLayerNet:
    """f(x) = relu(x @ (alpha a b)) @ w_out with w_out frozen."""

    w_out: np.ndarray
    adapter: LoraAdapter

    def __post_init__(self) -> None:
        w = np.array(self.w_out, dtype=float)
        if w.shape[0] != self.adapter.d:
            raise ShapeMismatch(
                f"w_out rows {w.shape[0]} != adapter dim {self.adapter.d}")
        w.setflags(write=False)
        object.__setattr__(self, "w_out", w)

    @property
    def n_classes(self) -> int:
        return self.w_out.shape[1]


def forward_two_layer(net: TwoLayerNet, x: np.ndarray) -> np.ndarray:
    """Logits for a single example (1-d x) or a batch (2-d x)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != net.adapter.d:
        raise ShapeMismatch(f"input dim {xb.shape[1]} != {net.adapter.d}")
    z = net.adapter.alpha * (xb @ net.adapter.a) @ net.adapter.b
    logits = np.maximum(z, 0.0) @ net.w_out
    return logits[0] if single else logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_two_layer(net: TwoLayerNet, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = forward_two_layer(net, features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = features.shape[0]
    return float(np.mean(logz - shifted[np.arange(n), labels]))


def grad_two_layer(net: TwoLayerNet, batch: ClientShard,
                   mask: Trainable) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Cross-entropy gradients (grad_a, grad_b) for the unfrozen factor(s).

    Backprop: with h = x a, z = alpha h b, r = relu(z), the upstream
    gradient g = (softmax - onehot)/n flows through w_out and the relu mask;
    grad_b = alpha h^T dz and grad_a = alpha x^T (dz b^T). The frozen
    factor's slot is returned as None.
    """
    if batch.features is None or batch.labels is None:
        raise ShapeMismatch("shard has no classifier data")
    x, yls = batch.features, batch.labels
    n = x.shape[0]
    ad = net.adapter
    h = x @ ad.a
    z = ad.alpha * (h @ ad.b)
    r = np.maximum(z, 0.0)
    logits = r @ net.w_out
    g = _softmax(logits)
    g[np.arange(n), yls] -= 1.0
    g /= n
    dz = (g @ net.w_out.T) * (z > 0.0)
    grad_a = grad_b = None
    if mask in (Trainable.B, Trainable.BOTH):
        grad_b = ad.alpha * (h.T @ dz)
    if mask in (Trainable.A, Trainable.BOTH):
        grad_a = ad.alpha * (x.T @ (dz @ ad.b.T))
    return grad_a, grad_b


def accuracy_two_layer(net: TwoLayerNet, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(forward_two_layer(net, features).argmax(axis=1) == labels))


@dataclass(frozen=True)
class ClassifierTask:
    """A federated classification problem: per-client shards, a held-out test
    set, the frozen output head, and the adapter rank to train."""

    train_shards: tuple[ClientShard, ...]
    test_features: np.ndarray
    test_labels: np.ndarray
    w_out: np.ndarray
    rank: int

    @property
    def d(self) -> int:
        return self.w_out.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w_out.shape[1]

    @property
    def n_clients(self) -> int:
        return len(self.train_shards)


def make_cluster_task(d: int, rank: int, n_classes: int, n_clients: int,
                      seed: int, labels_per_client: int | None = None,
                      dirichlet_alpha: float | None = None, margin: float = 4.0,
                      train_per_class: int = 60, test_per_class: int = 100,
                      ) -> ClassifierTask:
    """Cluster-dataset classification task with a label-split or Dirichlet
    partition and a frozen Gaussian output head."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    train_x, train_y, test_x, test_y = make_cluster_dataset(
        d, n_classes, train_per_class, test_per_class, margin, rng)
    if dirichlet_alpha is not None:
        shards = split_dirichlet(train_x, train_y, n_clients, dirichlet_alpha, rng)
    else:
        lpc = labels_per_client
        if lpc is None:
            if n_classes % n_clients != 0:
                raise BadPartition(
                    f"{n_classes} classes not divisible by {n_clients} clients")
            lpc = n_classes // n_clients
        shards = split_by_label(train_x, train_y, n_clients, lpc)
    w_out = rng.standard_normal((d, n_classes)) / np.sqrt(d)
    return ClassifierTask(tuple(shards), test_x, test_y, w_out, rank)


def make_idx_task(images_path: str, labels_path: str, test_images_path: str,
                  test_labels_path: str, rank: int, n_clients: int,
                  labels_per_client: int, seed: int) -> ClassifierTask:
    """Classification task from user-supplied IDX image/label files."""
    train_x = read_idx_images(images_path)
    train_y = read_idx_labels(labels_path)
    test_x = read_idx_images(test_images_path)
    test_y = read_idx_labels(test_labels_path)
    shards = split_by_label(train_x, train_y, n_clients, labels_per_client)
    d = train_x.shape[1]
    n_classes = len(np.unique(train_y))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    w_out = rng.standard_normal((d, n_classes)) / np.sqrt(d)
    return ClassifierTask(tuple(shards), test_x, test_y, w_out, rank)


# ---------------------------------------------------------------------------
# Dataset generation and partitioning
# ---------------------------------------------------------------------------

def make_cluster_dataset(d: int, n_classes: int, train_per_class: int,
                         test_per_class: int, margin: float,
                         rng: np.random.Generator,
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic c-blob classification data.

    Class means are margin-scaled orthonormal directions spanning a random
    n_classes-dimensional subspace of R^d; samples add unit isotropic noise.
    Returns (train_x, train_y, test_x, test_y).
    """
    if n_classes > d:
        raise BadRange("need d >= n_classes for orthonormal class means")
    q, _ = np.linalg.qr(rng.standard_normal((d, n_classes)))
    means = margin * q.T

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate(
            [means[k] + rng.standard_normal((per_class, d)) for k in range(n_classes)])
        y = np.repeat(np.arange(n_classes), per_class)
        return x, y

    train_x, train_y = draw(train_per_class)
    test_x, test_y = draw(test_per_class)
    return train_x, train_y, test_x, test_y


def split_by_label(features: np.ndarray, labels: np.ndarray, n_clients: int,
                   labels_per_client: int) -> list[ClientShard]:
    """Disjoint shards where client i holds labels [i*k, (i+1)*k)."""
    classes = np.unique(labels)
    if n_clients * labels_per_client != len(classes):
        raise BadPartition(
            f"{n_clients} clients x {labels_per_client} labels != {len(classes)} classes")
    shards = []
    for i in range(n_clients):
        mine = classes[i * labels_per_client:(i + 1) * labels_per_client]
        idx = np.flatnonzero(np.isin(labels, mine))
        shards.append(ClientShard(features=features[idx], labels=labels[idx]))
    return shards


def split_dirichlet(features: np.ndarray, labels: np.ndarray, n_clients: int,
                    alpha: float, rng: np.random.Generator) -> list[ClientShard]:
    """Non-iid partition: each class is split across clients by Dirichlet(alpha)
    proportions. Every sample is assigned to exactly one client."""
    if alpha <= 0:
        raise BadRange(f"alpha must be positive, got {alpha}")
    assignments: list[list[int]] = [[] for _ in range(n_clients)]
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, alpha))
        edges = np.round(np.cumsum(props) * len(idx)).astype(int)
        edges[-1] = len(idx)
        start = 0
        for i, end in enumerate(edges):
            assignments[i].extend(idx[start:end])
            start = end
    return [ClientShard(features=features[np.array(a, dtype=int)],
                        labels=labels[np.array(a, dtype=int)])
            for a in assignments]


# ---------------------------------------------------------------------------
# IDX (MNIST-style) file reading
# ---------------------------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _idx_open(path: str):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        f.close()
        return gzip.open(path, "rb")
    return f


def read_idx_images(path: str) -> np.ndarray:
    """n x (rows*cols) float array with pixel bytes scaled to [0, 1]."""
    with _idx_open(path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != _IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x} in {path}")
        raw = f.read(n * rows * cols)
    if len(raw) != n * rows * cols:
        raise IdxFormatError(f"truncated image payload in {path}")
    data = np.frombuffer(raw, dtype=np.uint8).astype(float) / 255.0
    return data.reshape(n, rows * cols)


def read_idx_labels(path: str) -> np.ndarray:
    with _idx_open(path) as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != _IDX_LABELS_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x} in {path}")
        raw = f.read(n)
    if len(raw) != n:
        raise IdxFormatError(f"truncated label payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
