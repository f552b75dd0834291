"""Low-rank adapter factor pairs and per-round freeze/train schedules.

An adapter is a pair (a: d x r, b: r x d) with scalar scaling alpha; its
effective weight update is alpha * a @ b. Schedules decide which factor is
trainable in each communication round and encode alternating optimization,
always-freeze-a, and simultaneous-update baselines as data, not code paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import BadAngle, BadSpec, NotUnit, ShapeMismatch
from .linalg import derive_rng, unit_normalize


class Trainable(str, Enum):
    """Which adapter factor(s) a round trains."""

    B = "B"
    A = "A"
    BOTH = "AB"


def _frozen_array(x: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LoraAdapter:
    """Factor pair (a: d x r, b: r x d) with scaling alpha.

    Arrays are copied and marked read-only so broadcast copies stay
    bit-identical between distribution and aggregation.
    """

    a: np.ndarray
    b: np.ndarray
    alpha: float = 1.0

    def __post_init__(self) -> None:
        a = _frozen_array(self.a)
        b = _frozen_array(self.b)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeMismatch("adapter factors must be 2-d")
        if a.shape[1] != b.shape[0] or a.shape[0] != b.shape[1]:
            raise ShapeMismatch(
                f"incompatible factor shapes {a.shape} x {b.shape}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise BadSpec("adapter factors contain non-finite entries")
        if self.alpha <= 0:
            raise BadSpec(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def with_a(self, a: np.ndarray) -> "LoraAdapter":
        return LoraAdapter(a, self.b, self.alpha)

    def with_b(self, b: np.ndarray) -> "LoraAdapter":
        return LoraAdapter(self.a, b, self.alpha)


def effective_update(ad: LoraAdapter) -> np.ndarray:
    """The d x d weight update alpha * a @ b the adapter represents."""
    return ad.alpha * (ad.a @ ad.b)


@dataclass(frozen=True)
class UpdateSchedule:
    """Ordered trainable-factor pattern over communication rounds.

    Round t uses pattern[t % len] when repeat is true; otherwise the pattern
    clamps to its last entry, which expresses mixed strategies such as
    "alternate for the first k rounds, then freeze a forever".
    """

    pattern: tuple[Trainable, ...]
    repeat: bool = True

    def __post_init__(self) -> None:
        if not self.pattern:
            raise BadSpec("schedule pattern must be nonempty")
        object.__setattr__(self, "pattern", tuple(Trainable(p) for p in self.pattern))


ROLORA_SCHEDULE = UpdateSchedule((Trainable.B, Trainable.A))
FFA_SCHEDULE = UpdateSchedule((Trainable.B,))
BOTH_SCHEDULE = UpdateSchedule((Trainable.BOTH,))


def trainable_mask(sched: UpdateSchedule, rnd: int) -> Trainable:
    """Trainable factor for communication round rnd (0-based)."""
    if rnd < 0:
        raise BadSpec("round index must be >= 0")
    if sched.repeat:
        return sched.pattern[rnd % len(sched.pattern)]
    return sched.pattern[min(rnd, len(sched.pattern) - 1)]


@dataclass(frozen=True)
class InitSpec:
    """How to draw the initial adapter.

    a_init: "gaussian" (entries N(0, a_std^2)), "gaussian-unit" (rank-1 only:
    a is a uniform unit vector), or an explicit matrix. b_init: "zero",
    "gaussian", or an explicit matrix. a_std/b_std default to 1/sqrt(d).
    a_angle, when set on a rank-1 task run, places a at that initial angle
    distance from the task's ground-truth direction.
    """

    a_init: str | np.ndarray = "gaussian"
    b_init: str | np.ndarray = "zero"
    a_std: float | None = None
    b_std: float | None = None
    a_angle: float | None = None
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("a_init", "b_init"):
            val = getattr(self, name)
            if isinstance(val, np.ndarray):
                object.__setattr__(self, name, _frozen_array(val))


_INIT_TAG_A = 0xA0
_INIT_TAG_B = 0xB0


def init_adapter(spec: InitSpec, d: int, r: int) -> LoraAdapter:
    """Deterministic adapter from spec; same spec gives identical factors."""
    if d < r or r < 1:
        raise BadSpec(f"need d >= r >= 1, got d={d}, r={r}")

    if isinstance(spec.a_init, np.ndarray):
        a = np.array(spec.a_init, dtype=float)
        if a.shape != (d, r):
            raise BadSpec(f"given a has shape {a.shape}, want {(d, r)}")
    elif spec.a_init == "gaussian":
        std = spec.a_std if spec.a_std is not None else 1.0 / np.sqrt(d)
        a = std * derive_rng(spec.seed, _INIT_TAG_A).standard_normal((d, r))
    elif spec.a_init == "gaussian-unit":
        if r != 1:
            raise BadSpec("gaussian-unit a_init only applies to rank 1")
        a = derive_rng(spec.seed, _INIT_TAG_A).standard_normal((d, 1))
        a = unit_normalize(a[:, 0]).reshape(d, 1)
    else:
        raise BadSpec(f"unknown a_init {spec.a_init!r}")

    if isinstance(spec.b_init, np.ndarray):
        b = np.array(spec.b_init, dtype=float)
        if b.shape != (r, d):
            raise BadSpec(f"given b has shape {b.shape}, want {(r, d)}")
    elif spec.b_init == "zero":
        b = np.zeros((r, d))
    elif spec.b_init == "gaussian":
        std = spec.b_std if spec.b_std is not None else 1.0 / np.sqrt(d)
        b = std * derive_rng(spec.seed, _INIT_TAG_B).standard_normal((r, d))
    else:
        raise BadSpec(f"unknown b_init {spec.b_init!r}")

    return LoraAdapter(a, b, spec.alpha)


def init_with_angle(a_star: np.ndarray, delta0: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Unit vector at angle distance exactly delta0 from unit vector a_star.

    Construction: sqrt(1 - delta0^2) * a_star + delta0 * w with w a seeded
    uniform unit direction in the orthogonal complement of a_star.
    """
    n = np.linalg.norm(a_star)
    if abs(n - 1.0) > 1e-9:
        raise NotUnit(f"a_star must be a unit vector, got norm {n!r}")
    if not 0.0 < delta0 < 1.0:
        raise BadAngle(f"delta0 must lie in (0, 1), got {delta0}")
    g = rng.standard_normal(a_star.shape[0])
    w = g - a_star * (a_star @ g)
    w = unit_normalize(w)
    return np.sqrt(1.0 - delta0**2) * a_star + delta0 * w
