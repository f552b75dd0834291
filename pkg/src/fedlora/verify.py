"""Named theory checks runnable from the CLI (`fedlora verify`).

Each check compares simulator output against a closed-form prediction and
reports PASS/FAIL. One check is expected to fail: the homogeneous
contraction run at the largest step size the stated theory admits. The
alternating iteration provably overshoots there (the a-update's
along-direction coefficient 1 - 2 eta ||b_bar||^2 flips sign once
eta (1 - delta^2) ||b*||^2 > 1/2), so the per-iteration factor is only
realized for eta <= 1/(2 ||b*||^2). The companion check at half the step
size passes with the same tolerances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adapters import init_with_angle
from .linalg import derive_rng
from .oracles import (
    altmin_gd,
    contraction_bound,
    ffa_heter_loss_exact,
    ffa_homog_empirical_loss,
    ffa_homog_predicted_loss,
    heter_population_round,
    iterations_needed,
)
from .tasks import (
    POPULATION,
    client_variance,
    make_heterogeneous_task,
    make_homogeneous_task,
    population_shard,
    solve_b_exact,
)

_SEED = 20240901


@dataclass
class CheckResult:
    name: str
    passed: bool
    expected_pass: bool
    detail: str
    elapsed_s: float

    @property
    def as_expected(self) -> bool:
        return self.passed == self.expected_pass


def _timed(fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return passed, detail, time.perf_counter() - t0


def check_ffa_homog_floor() -> CheckResult:
    """Monte Carlo freeze-a loss vs the exact expectation, 4 sigma gate."""
    def body():
        n, m, d, b_norm, trials = 10, 50, 20, 2.0, 2000
        worst = 0.0
        lines = []
        for k, delta0 in enumerate((0.3, 0.5, 0.8)):
            rng = derive_rng(_SEED, 3, k)
            task = make_homogeneous_task(d, m, n, b_norm, rng)
            a0 = init_with_angle(task.a_star, delta0, rng)
            pred = ffa_homog_predicted_loss(n, m, delta0, b_norm).predicted
            mean, se = ffa_homog_empirical_loss(task, a0, trials, rng)
            z = abs(mean - pred) / se
            worst = max(worst, z)
            lines.append(f"delta0={delta0}: |emp-pred|/se={z:.2f}")
        return worst <= 4.0, "; ".join(lines)

    passed, detail, dt = _timed(body)
    return CheckResult("ffa-homog-floor", passed, True, detail, dt)


def _contraction_run(eta_scale: float) -> tuple[bool, str]:
    d, m, n, b_norm, delta0 = 20, 1000, 10, 2.0, 0.5
    eta = eta_scale / b_norm**2
    bound = contraction_bound(delta0, eta, b_norm)
    budget = iterations_needed(delta0, 1e-3, 0.5)
    n_seeds = 20
    decreases = total = 0
    ratios_ok = ratios_all = 0
    reached = 0
    for s in range(n_seeds):
        rng = derive_rng(_SEED, 4, s)
        task = make_homogeneous_task(d, m, n, b_norm, rng)
        a0 = init_with_angle(task.a_star, delta0, rng)
        rep = altmin_gd(task, a0, eta, budget, rng)
        for t, ratio in enumerate(rep.ratios):
            total += 1
            if rep.deltas[t + 1] <= rep.deltas[t]:
                decreases += 1
            ratios_all += 1
            if ratio <= bound + 0.05:
                ratios_ok += 1
        if min(rep.deltas) <= 1e-3:
            reached += 1
    frac_dec = decreases / max(total, 1)
    frac_ok = ratios_ok / max(ratios_all, 1)
    ok = frac_dec >= 0.95 and frac_ok >= 0.90 and reached == n_seeds
    detail = (f"eta={eta_scale}/||b*||^2 bound={bound:.3f}: "
              f"non-increasing {frac_dec:.1%}, within bound+0.05 {frac_ok:.1%}, "
              f"reached 1e-3 in <= {budget} iters: {reached}/{n_seeds}")
    return ok, detail


def check_contraction_stated_step() -> CheckResult:
    """Contraction at eta = 1/||b*||^2, the largest stated step size.

    Expected to FAIL: the iteration stalls once the angle is small. Kept
    red on purpose; see the module docstring and README.
    """
    passed, detail, dt = _timed(lambda: _contraction_run(1.0))
    return CheckResult("homog-contraction-stated-step", passed, False, detail, dt)


def check_contraction_half_step() -> CheckResult:
    """Same protocol at eta = 1/(2 ||b*||^2), where the bound is realized."""
    passed, detail, dt = _timed(lambda: _contraction_run(0.5))
    return CheckResult("homog-contraction-half-step", passed, True, detail, dt)


def check_heter_population() -> CheckResult:
    """Machine-precision heterogeneous population identities on random tasks."""
    def body():
        rng = derive_rng(_SEED, 5)
        worst = {"b_bar": 0.0, "contraction": 0.0, "loss": 0.0, "recovery": 0.0}
        for _ in range(100):
            d = int(rng.integers(2, 33))
            n = int(rng.integers(1, 21))
            b_bar = rng.standard_normal(d)
            b_bar *= float(rng.uniform(0.5, 2.0)) / np.linalg.norm(b_bar)
            gamma = float(rng.uniform(0.0, 2.0))
            task = make_heterogeneous_task(d, 1, n, b_bar, gamma, rng, POPULATION)
            delta0 = float(rng.uniform(0.05, 0.95))
            a = init_with_angle(task.a_star, delta0, rng)
            l_max = task.step_bound()
            eta = float(rng.uniform(0.3, 1.0)) / (2 * l_max**2)

            # (a) aggregated closed form vs per-client exact solves
            a_next, b_bar_engine = heter_population_round(a, task, eta)
            b_bar_clients = np.mean(
                [solve_b_exact(population_shard(task, i), a) for i in range(n)],
                axis=0)
            worst["b_bar"] = max(worst["b_bar"], float(
                np.max(np.abs(b_bar_engine - b_bar_clients))))

            # (b) ten rounds of the deterministic contraction inequality
            bb = float(np.linalg.norm(task.b_bar_star))
            factor = 1.0 - 2.0 * eta * (1.0 - delta0**2) * bb**2
            cur = a
            delta = delta0
            for _ in range(10):
                nxt, _ = heter_population_round(cur, task, eta)
                d_next = float(np.linalg.norm(
                    nxt - task.a_star * (task.a_star @ nxt)))
                worst["contraction"] = max(
                    worst["contraction"], d_next - delta * factor)
                cur, delta = nxt, d_next

            # (c) exact freeze-a loss vs gamma^2 + ||b_bar*||^2 delta0^2
            loss = ffa_heter_loss_exact(task, a)
            floor = client_variance(task).gamma_sq + bb**2 * delta0**2
            worst["loss"] = max(worst["loss"], abs(loss - floor))

            # (d) recovery of the global minimizer once the angle converges
            eps = 1e-6
            cur, delta, it = a, delta0, 0
            while delta > eps and it < 20000:
                cur, _ = heter_population_round(cur, task, eta)
                delta = float(np.linalg.norm(
                    cur - task.a_star * (task.a_star @ cur)))
                it += 1
            _, b_final = heter_population_round(cur, task, eta)
            err = float(np.linalg.norm(
                np.outer(cur, b_final) - np.outer(task.a_star, task.b_bar_star)))
            target = np.linalg.norm(task.b_bar_star)
            worst["recovery"] = max(worst["recovery"], err - eps * target)
        ok = (worst["b_bar"] <= 1e-12 and worst["contraction"] <= 1e-10
              and worst["loss"] <= 1e-10 and worst["recovery"] <= 1e-9)
        detail = (f"worst: b_bar dev {worst['b_bar']:.2e}, contraction excess "
                  f"{worst['contraction']:.2e}, loss dev {worst['loss']:.2e}, "
                  f"recovery excess {worst['recovery']:.2e}")
        return ok, detail

    passed, detail, dt = _timed(body)
    return CheckResult("heter-population-identities", passed, True, detail, dt)


def check_ffa_saturation_vs_altmin() -> CheckResult:
    """Freeze-a loss never moves off its floor; the alternating run escapes."""
    def body():
        rng = derive_rng(_SEED, 6)
        d, n = 16, 5
        b_bar = rng.standard_normal(d)
        b_bar *= 1.5 / np.linalg.norm(b_bar)
        task = make_heterogeneous_task(d, 1, n, b_bar, 0.8, rng, POPULATION)
        delta0 = 0.6
        a0 = init_with_angle(task.a_star, delta0, rng)
        gamma_sq = client_variance(task).gamma_sq
        bb = float(np.linalg.norm(task.b_bar_star))
        floor = gamma_sq + bb**2 * delta0**2

        ffa_losses = [ffa_heter_loss_exact(task, a0) for _ in range(5)]
        stuck = max(abs(l - floor) for l in ffa_losses) <= 1e-10

        eta = 0.4 / task.step_bound()**2
        c = 2 * eta * bb**2
        budget = iterations_needed(delta0, 1e-4, c)
        rep = altmin_gd(task, a0, eta, budget, rng)
        escaped = rep.losses[-1] <= gamma_sq + 1e-6
        detail = (f"freeze-a stays at {floor:.6f} ({'yes' if stuck else 'NO'}); "
                  f"alt-min loss {rep.losses[-1]:.3e} vs floor gamma^2={gamma_sq:.6f} "
                  f"within {budget} iterations")
        return stuck and escaped, detail

    passed, detail, dt = _timed(body)
    return CheckResult("ffa-saturation-vs-altmin", passed, True, detail, dt)


ALL_CHECKS = (
    check_ffa_homog_floor,
    check_contraction_stated_step,
    check_contraction_half_step,
    check_heter_population,
    check_ffa_saturation_vs_altmin,
)


def run_all_checks() -> list[CheckResult]:
    return [fn() for fn in ALL_CHECKS]
