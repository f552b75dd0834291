"""Executable closed-form predictions for the rank-1 linear model and the
estimators that test them: the alternating minimization / gradient-descent
iteration, its contraction bound, the freeze-a loss floors (Monte Carlo in
the homogeneous finite-sample case, exact in the heterogeneous population
case), and the single-round population update map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadAngle, BadRange, FiniteSampleModeError, StepTooLarge
from .linalg import unit_normalize
from .tasks import (
    FINITE,
    POPULATION,
    LinearTask,
    gen_linear_shard,
    grad_a_linear,
    local_loss_linear,
    solve_b_exact,
)

# Angles below this are numerically meaningless; ratio tracking stops there.
ANGLE_FLOOR = 1e-12

THEORY_COLUMNS = ("round", "trained_factor", "global_loss", "angle_distance",
                  "test_accuracy", "elapsed_ms", "ratio", "bound",
                  "predicted_loss", "empirical_loss", "std_err")


def contraction_bound(delta0: float, eta: float, b_star_norm: float) -> float:
    """Per-iteration factor sqrt(1 - eta (1 - delta0^2) ||b*||^2).

    Requires eta <= 1 / ||b*||^2; see notes on step sizes in the package
    README: the alternating iteration only realizes this factor for
    eta <= 1 / (2 ||b*||^2).
    """
    if not 0.0 < delta0 < 1.0:
        raise BadAngle(f"delta0 must lie in (0, 1), got {delta0}")
    if eta <= 0 or eta > 1.0 / b_star_norm**2 * (1 + 1e-12):
        raise StepTooLarge(f"need 0 < eta <= 1/||b*||^2, got {eta}")
    return math.sqrt(1.0 - eta * (1.0 - delta0**2) * b_star_norm**2)


def iterations_needed(delta0: float, eps: float, c: float) -> int:
    """ceil( 2 / (c (1 - delta0^2)) * log(delta0 / eps) )."""
    if not 0.0 < delta0 < 1.0:
        raise BadRange(f"delta0 must lie in (0, 1), got {delta0}")
    if not 0.0 < eps <= delta0:
        raise BadRange(f"need 0 < eps <= delta0, got eps={eps}")
    if not 0.0 < c < 1.0:
        raise BadRange(f"c must lie in (0, 1), got {c}")
    return math.ceil(2.0 / (c * (1.0 - delta0**2)) * math.log(delta0 / eps))


@dataclass(frozen=True)
class FfaLossPrediction:
    """Closed-form expected global loss (1 + c_tilde) ||b*||^2 delta0^2 of the
    freeze-a scheme after one exact local solve and server average."""

    predicted: float
    c_tilde: float
    n_clients: int
    m: int
    delta0: float
    b_star_norm: float


def ffa_homog_predicted_loss(n_clients: int, m: int, delta0: float,
                             b_star_norm: float) -> FfaLossPrediction:
    """c_tilde = (N(4-m) - 2) / (N^2 m (m-2)); exact for all N >= 1, m >= 3."""
    if n_clients < 1:
        raise BadRange(f"need n_clients >= 1, got {n_clients}")
    if m < 3:
        raise BadRange(f"need m >= 3 (the formula divides by m-2), got {m}")
    if not 0.0 < delta0 < 1.0:
        raise BadRange(f"delta0 must lie in (0, 1), got {delta0}")
    c_tilde = (n_clients * (4 - m) - 2) / (n_clients**2 * m * (m - 2))
    predicted = (1.0 + c_tilde) * b_star_norm**2 * delta0**2
    return FfaLossPrediction(predicted, c_tilde, n_clients, m, delta0, b_star_norm)


def ffa_homog_empirical_loss(task: LinearTask, a0: np.ndarray, trials: int,
                             rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo estimate of the freeze-a global loss.

    Each trial draws fresh client designs, solves every client's b exactly
    at the frozen a0, averages them, and evaluates the global loss on the
    same designs. Returns (mean, standard error) over trials.
    """
    if task.mode != FINITE or not task.homogeneous:
        raise BadRange("the Monte Carlo floor needs a homogeneous finite-sample task")
    if trials < 100:
        raise BadRange(f"need at least 100 trials for a usable std error, got {trials}")
    losses = np.empty(trials)
    for t in range(trials):
        shards = [gen_linear_shard(task, i, rng) for i in range(task.n_clients)]
        b_ffa = np.mean([solve_b_exact(s, a0) for s in shards], axis=0)
        losses[t] = float(np.mean(
            [local_loss_linear(s, a0, b_ffa) for s in shards]))
    return float(losses.mean()), float(losses.std(ddof=1) / np.sqrt(trials))


def ffa_heter_loss_exact(task: LinearTask, a0: np.ndarray) -> float:
    """Exact population global loss of the freeze-a scheme at a0.

    Equals gamma^2 + ||b_bar*||^2 delta0^2: the client-variance floor plus
    the angular-error term that freezing a can never remove.
    """
    if task.mode != POPULATION:
        raise FiniteSampleModeError("exact freeze-a loss needs a population task")
    a0 = np.asarray(a0, dtype=float)
    b_ffa = task.b_bar_star * float(task.a_star @ a0)
    # Direct evaluation of (1/N) sum_i ||a* b_i*^T - a0 b_ffa^T||^2.
    total = 0.0
    for b_i in task.b_stars:
        diff = np.outer(task.a_star, b_i) - np.outer(a0, b_ffa)
        total += float(np.sum(diff**2))
    return total / task.n_clients


def heter_population_round(a: np.ndarray, task: LinearTask,
                           eta: float) -> tuple[np.ndarray, np.ndarray]:
    """One exact population round: b_bar = b_bar* (a*^T a), then a moves down
    the averaged gradient 2 (a b_bar^T b_bar - a* b_bar*^T b_bar) and is
    renormalized. Requires eta <= 1 / (2 L_max^2)."""
    l_max = task.step_bound()
    if eta <= 0 or eta > 1.0 / (2.0 * l_max**2) * (1 + 1e-12):
        raise StepTooLarge(f"need 0 < eta <= 1/(2 L_max^2) = {1/(2*l_max**2):.3e}")
    if task.mode != POPULATION:
        raise FiniteSampleModeError("population round needs a population task")
    a = np.asarray(a, dtype=float)
    b_bar_star = task.b_bar_star
    b_bar = b_bar_star * float(task.a_star @ a)
    a_plus = a - 2.0 * eta * (a * float(b_bar @ b_bar)
                              - task.a_star * float(b_bar_star @ b_bar))
    return unit_normalize(a_plus), b_bar


@dataclass
class ContractionReport:
    """Per-iteration angle distances and ratios from an alternating run.

    ratios[t] = deltas[t+1] / deltas[t], recorded only while deltas[t] stays
    above ANGLE_FLOOR. violations counts ratios above bound + slack.
    """

    deltas: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    bound: float = float("nan")
    slack: float = 0.05
    violations: int = 0
    final_a: np.ndarray | None = None
    final_b: np.ndarray | None = None

    def rows(self) -> list[dict]:
        out = []
        for t, delta in enumerate(self.deltas):
            out.append({
                "round": t,
                "trained_factor": "",
                "global_loss": repr(self.losses[t]) if t < len(self.losses) else "",
                "angle_distance": repr(delta),
                "test_accuracy": "",
                "elapsed_ms": "",
                "ratio": repr(self.ratios[t]) if t < len(self.ratios) else "",
                "bound": repr(self.bound),
                "predicted_loss": "",
                "empirical_loss": "",
                "std_err": "",
            })
        return out


def altmin_gd(task: LinearTask, a0: np.ndarray, eta: float, iterations: int,
              rng: np.random.Generator, fixed_design: bool = False,
              slack: float = 0.05) -> ContractionReport:
    """Alternating minimization on b / gradient descent on a.

    Per iteration: every client solves its b exactly at the current a, the
    server averages those to b_bar, clients compute the a-gradient at
    (a, b_bar), and the averaged gradient step is renormalized. In
    finite-sample mode every iteration draws fresh designs unless
    fixed_design is set (exploratory only; the theory assumes fresh draws).
    """
    a0 = np.asarray(a0, dtype=float)
    a_star = task.a_star
    delta0 = float(np.linalg.norm(a0 - a_star * (a_star @ a0)))
    if not ANGLE_FLOOR < delta0 < 1.0:
        raise BadAngle(f"initial angle {delta0!r} outside (0, 1)")
    b_norm = float(np.linalg.norm(task.b_bar_star))
    l_max = task.step_bound()
    if eta <= 0 or eta > 1.0 / l_max**2 * (1 + 1e-12):
        raise StepTooLarge(f"need 0 < eta <= 1/L_max^2 = {1/l_max**2:.3e}")

    report = ContractionReport(slack=slack)
    report.bound = contraction_bound(delta0, min(eta, 1.0 / b_norm**2), b_norm)

    population = task.mode == POPULATION
    shards = None
    if not population and fixed_design:
        shards = [gen_linear_shard(task, i, rng) for i in range(task.n_clients)]

    a = a0.copy()
    report.deltas.append(delta0)
    b_bar = np.zeros(task.d)
    for _ in range(iterations):
        if population:
            cos = float(a_star @ a)
            b_bar = task.b_bar_star * cos
            loss = _population_global_loss(task, a, b_bar)
            grad = 2.0 * (a * float(b_bar @ b_bar)
                          - a_star * float(task.b_bar_star @ b_bar))
        else:
            if not fixed_design:
                shards = [gen_linear_shard(task, i, rng)
                          for i in range(task.n_clients)]
            b_bar = np.mean([solve_b_exact(s, a) for s in shards], axis=0)
            loss = float(np.mean([local_loss_linear(s, a, b_bar) for s in shards]))
            grad = np.mean([grad_a_linear(s, a, b_bar) for s in shards], axis=0)
        report.losses.append(loss)
        a = unit_normalize(a - eta * grad)
        delta = float(np.linalg.norm(a - a_star * (a_star @ a)))
        prev = report.deltas[-1]
        if prev > ANGLE_FLOOR:
            ratio = delta / prev
            report.ratios.append(ratio)
            if ratio > report.bound + slack:
                report.violations += 1
        report.deltas.append(delta)

    if population:
        b_bar = task.b_bar_star * float(a_star @ a)
        report.losses.append(_population_global_loss(task, a, b_bar))
    elif shards is not None:
        if not fixed_design:
            shards = [gen_linear_shard(task, i, rng) for i in range(task.n_clients)]
        b_bar = np.mean([solve_b_exact(s, a) for s in shards], axis=0)
        report.losses.append(float(np.mean(
            [local_loss_linear(s, a, b_bar) for s in shards])))
    report.final_a = a
    report.final_b = b_bar
    return report


def _population_global_loss(task: LinearTask, a: np.ndarray,
                            b: np.ndarray) -> float:
    total = 0.0
    for b_i in task.b_stars:
        diff = np.outer(task.a_star, b_i) - np.outer(a, b)
        total += float(np.sum(diff**2))
    return total / task.n_clients
