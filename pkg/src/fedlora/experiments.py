"""Experiment front end: flat key = value configs, run dispatch, CSV traces,
a summary table, and rendered figures alongside the delimited output.

Config format: one `key = value` per line, `#` comments, blank lines
ignored. List-valued fields either take comma-separated values (seeds,
delta0s, cells) or repeat the key once per entry (strategy, schedule).
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .adapters import InitSpec, Trainable, UpdateSchedule, init_with_angle
from .errors import ParseError, SchemaMismatch, ValidationError
from .fedsim import (
    FedConfig,
    Strategy,
    TrainingTrace,
    run_federated,
    write_trace_csv,
)
from .linalg import derive_rng
from .oracles import (
    THEORY_COLUMNS,
    altmin_gd,
    contraction_bound,
    ffa_heter_loss_exact,
    ffa_homog_empirical_loss,
    ffa_homog_predicted_loss,
    heter_population_round,
)
from .tasks import (
    FINITE,
    POPULATION,
    client_variance,
    make_cluster_task,
    make_heterogeneous_task,
    make_homogeneous_task,
    make_idx_task,
)

KINDS = ("compare-protocols", "nonlinear-toy", "theory-homog", "theory-heter",
         "ffa-monte-carlo", "ablation-schedule", "ablation-local-steps")

_TAG_TASK = 0x7A5C


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = ""
    out: str = "results"
    seeds: tuple[int, ...] = (1,)
    strategies: tuple[Strategy, ...] = (
        Strategy.ROLORA, Strategy.FFA_LORA, Strategy.FEDAVG_LORA)
    schedules: tuple[UpdateSchedule, ...] = ()
    cells: tuple[tuple[int, int], ...] = ()
    rounds: int = 30
    local_steps: int = 1
    batch_size: int = 64
    eta: float = 0.01
    alpha: float = 1.0
    n_clients: int = 10
    d: int = 64
    rank: int = 8
    classes: int = 10
    labels_per_client: int | None = None
    dirichlet_alpha: float | None = None
    margin: float = 4.0
    train_per_class: int = 60
    test_per_class: int = 100
    b_init: str = "gaussian"
    m: int = 1000
    b_norm: float = 2.0
    gamma: float = 0.0
    delta0: float = 0.5
    delta0s: tuple[float, ...] = (0.3, 0.5, 0.8)
    trials: int = 2000
    workers: int = 1
    plots: bool = True
    idx_train_images: str | None = None
    idx_train_labels: str | None = None
    idx_test_images: str | None = None
    idx_test_labels: str | None = None


_INT_KEYS = {"rounds", "local_steps", "batch_size", "n_clients", "d", "rank",
             "classes", "labels_per_client", "m", "trials", "workers",
             "train_per_class", "test_per_class"}
_FLOAT_KEYS = {"eta", "alpha", "dirichlet_alpha", "margin", "b_norm", "gamma",
               "delta0"}
_STR_KEYS = {"experiment", "out", "b_init", "idx_train_images",
             "idx_train_labels", "idx_test_images", "idx_test_labels"}
_BOOL_KEYS = {"plots"}


def _parse_schedule(text: str, where: str) -> UpdateSchedule:
    repeat = True
    if text.startswith("norepeat:"):
        repeat = False
        text = text[len("norepeat:"):]
    try:
        pattern = tuple(Trainable(tok.strip()) for tok in text.split(","))
    except ValueError as exc:
        raise ValidationError(
            f"field 'schedule' {where}: tokens must be B, A or AB") from exc
    return UpdateSchedule(pattern, repeat)


def _parse_cells(text: str, where: str) -> tuple[tuple[int, int], ...]:
    out = []
    for tok in text.split(","):
        parts = tok.strip().split("x")
        if len(parts) != 2:
            raise ValidationError(
                f"field 'cells' {where}: entries look like '5x120', got {tok!r}")
        try:
            out.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise ValidationError(
                f"field 'cells' {where}: non-integer in {tok!r}") from exc
    return tuple(out)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a flat key = value config.

    Raises ParseError with a line number for malformed lines and
    ValidationError naming the offending field for bad keys or values.
    """
    values: dict[str, object] = {}
    strategies: list[Strategy] = []
    schedules: list[UpdateSchedule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        where = f"(line {lineno})"
        if not value:
            raise ParseError(f"line {lineno}: empty value for {key!r}")
        try:
            if key == "strategy":
                try:
                    strategies.append(Strategy(value))
                except ValueError:
                    raise ValidationError(
                        f"field 'strategy' {where}: unknown strategy {value!r}; "
                        f"choose from {[s.value for s in Strategy]}")
            elif key == "schedule":
                schedules.append(_parse_schedule(value, where))
            elif key == "cells":
                values["cells"] = _parse_cells(value, where)
            elif key == "seeds":
                values["seeds"] = tuple(int(tok) for tok in value.split(","))
            elif key == "delta0s":
                values["delta0s"] = tuple(float(tok) for tok in value.split(","))
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _BOOL_KEYS:
                if value.lower() not in ("true", "false"):
                    raise ValidationError(
                        f"field {key!r} {where}: expected true/false, got {value!r}")
                values[key] = value.lower() == "true"
            elif key in _STR_KEYS:
                values[key] = value
            else:
                raise ValidationError(f"field {key!r} {where}: unknown key")
        except ValueError as exc:
            raise ValidationError(f"field {key!r} {where}: {exc}") from exc
    if strategies:
        values["strategies"] = tuple(strategies)
    if schedules:
        values["schedules"] = tuple(schedules)
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in KINDS:
        raise ValidationError(
            f"field 'experiment': got {cfg.experiment!r}, choose from {list(KINDS)}")
    if not cfg.seeds:
        raise ValidationError("field 'seeds': seed list must be nonempty")
    if not cfg.strategies:
        raise ValidationError("field 'strategy': at least one strategy required")
    if cfg.experiment == "ablation-schedule" and not cfg.schedules:
        raise ValidationError(
            "field 'schedule': ablation-schedule needs at least one schedule")
    if cfg.experiment == "ablation-local-steps" and not cfg.cells:
        raise ValidationError(
            "field 'cells': ablation-local-steps needs 'cells = QxT,...'")
    if cfg.workers < 1:
        raise ValidationError("field 'workers': must be >= 1")
    idx_keys = (cfg.idx_train_images, cfg.idx_train_labels,
                cfg.idx_test_images, cfg.idx_test_labels)
    if any(k is not None for k in idx_keys) and not all(k is not None for k in idx_keys):
        raise ValidationError(
            "field 'idx_*': either all four IDX paths or none must be set")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse(serialize(parse(x))) == parse(x)."""
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if val is None:
            continue
        if f.name == "strategies":
            lines.extend(f"strategy = {s.value}" for s in val)
        elif f.name == "schedules":
            for sched in val:
                prefix = "" if sched.repeat else "norepeat:"
                lines.append(
                    "schedule = " + prefix + ",".join(p.value for p in sched.pattern))
        elif f.name == "cells":
            if val:
                lines.append("cells = " + ",".join(f"{q}x{t}" for q, t in val))
        elif f.name in ("seeds", "delta0s"):
            lines.append(f"{f.name} = " + ",".join(repr(v) if isinstance(v, float)
                                                   else str(v) for v in val))
        elif isinstance(val, bool):
            lines.append(f"{f.name} = {'true' if val else 'false'}")
        elif isinstance(val, float):
            lines.append(f"{f.name} = {val!r}")
        else:
            lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("label", "n_seeds", "final_loss_mean", "final_loss_std",
                   "final_accuracy_mean", "final_accuracy_std",
                   "final_angle_mean", "final_angle_std")


def _mean_std(vals: list[float]) -> tuple[float, float]:
    arr = np.asarray(vals, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def summarize(groups: dict[str, list[TrainingTrace]]) -> list[dict]:
    """Final-round mean and sample std per label over seeds."""
    rows = []
    for label in sorted(groups):
        traces = groups[label]
        if not traces or any(not t.records for t in traces):
            raise SchemaMismatch(f"group {label!r} has an empty trace")
        finals = [t.records[-1] for t in traces]
        has_acc = {rec.test_accuracy is not None for rec in finals}
        has_angle = {rec.angle_distance is not None for rec in finals}
        if len(has_acc) > 1 or len(has_angle) > 1:
            raise SchemaMismatch(f"group {label!r} mixes metric schemas")
        row = {"label": label, "n_seeds": len(traces)}
        loss_m, loss_s = _mean_std([rec.global_loss for rec in finals])
        row["final_loss_mean"], row["final_loss_std"] = repr(loss_m), repr(loss_s)
        if has_acc == {True}:
            acc_m, acc_s = _mean_std([rec.test_accuracy for rec in finals])
            row["final_accuracy_mean"], row["final_accuracy_std"] = repr(acc_m), repr(acc_s)
        else:
            row["final_accuracy_mean"] = row["final_accuracy_std"] = ""
        if has_angle == {True}:
            ang_m, ang_s = _mean_std([rec.angle_distance for rec in finals])
            row["final_angle_mean"], row["final_angle_std"] = repr(ang_m), repr(ang_s)
        else:
            row["final_angle_mean"] = row["final_angle_std"] = ""
        rows.append(row)
    return rows


def _write_summary(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(SUMMARY_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: str
    files: list[str] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)


def _classifier_task(cfg: ExperimentConfig, seed: int):
    if cfg.idx_train_images is not None:
        if cfg.labels_per_client is None:
            raise ValidationError("field 'labels_per_client': required for IDX tasks")
        return make_idx_task(cfg.idx_train_images, cfg.idx_train_labels,
                             cfg.idx_test_images, cfg.idx_test_labels,
                             cfg.rank, cfg.n_clients, cfg.labels_per_client, seed)
    return make_cluster_task(
        cfg.d, cfg.rank, cfg.classes, cfg.n_clients, seed=seed,
        labels_per_client=cfg.labels_per_client,
        dirichlet_alpha=cfg.dirichlet_alpha, margin=cfg.margin,
        train_per_class=cfg.train_per_class, test_per_class=cfg.test_per_class)


def _run_units(units, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda u: u(), units))
    return [u() for u in units]


def _schedule_label(sched: UpdateSchedule) -> str:
    tail = "" if sched.repeat else "-clamp"
    return "sched-" + "-".join(p.value for p in sched.pattern) + tail


def _federated_kind(cfg: ExperimentConfig, result: ExperimentResult) -> None:
    runs: list[tuple[str, Strategy, UpdateSchedule | None, int, int, int]] = []
    if cfg.experiment == "ablation-schedule":
        for sched in cfg.schedules:
            runs.extend((_schedule_label(sched), Strategy.ROLORA, sched,
                         cfg.rounds, cfg.local_steps, seed) for seed in cfg.seeds)
    elif cfg.experiment == "ablation-local-steps":
        for strat in cfg.strategies:
            for q, t in cfg.cells:
                runs.extend((f"{strat.value}-q{q}xr{t}", strat, None, t, q, seed)
                            for seed in cfg.seeds)
    else:
        for strat in cfg.strategies:
            runs.extend((strat.value, strat, None, cfg.rounds, cfg.local_steps, seed)
                        for seed in cfg.seeds)

    def make_unit(label, strat, sched, rounds, steps, seed):
        def unit():
            task = _classifier_task(cfg, seed)
            fed = FedConfig(
                n_clients=cfg.n_clients, rounds=rounds, local_steps=steps,
                batch_size=cfg.batch_size, eta=cfg.eta, strategy=strat,
                schedule=sched,
                init=InitSpec(a_init="gaussian", b_init=cfg.b_init,
                              alpha=cfg.alpha, seed=seed),
                seed=seed)
            return label, seed, run_federated(fed, task)
        return unit

    outcomes = _run_units([make_unit(*r) for r in runs], cfg.workers)
    groups: dict[str, list[TrainingTrace]] = {}
    for label, seed, trace in outcomes:
        path = os.path.join(result.out_dir, f"{label}_seed{seed}.csv")
        trace.to_csv(path)
        result.files.append(path)
        groups.setdefault(label, []).append(trace)

    result.summary = summarize(groups)
    if cfg.plots:
        from . import figures
        curves = {}
        for label, traces in groups.items():
            accs = np.array([[rec.test_accuracy for rec in t.records]
                             for t in traces], dtype=float)
            curves[label] = (accs.mean(axis=0), accs.std(axis=0))
        fig_path = os.path.join(result.out_dir, f"{cfg.experiment}.png")
        figures.plot_metric_curves(fig_path, curves, "test accuracy",
                                   cfg.experiment)
        result.files.append(fig_path)


def _theory_homog(cfg: ExperimentConfig, result: ExperimentResult) -> None:
    bound = contraction_bound(cfg.delta0, min(cfg.eta, 1 / cfg.b_norm**2),
                              cfg.b_norm)

    def make_unit(seed):
        def unit():
            rng = derive_rng(seed, _TAG_TASK)
            task = make_homogeneous_task(cfg.d, cfg.m, cfg.n_clients,
                                         cfg.b_norm, rng, FINITE)
            a0 = init_with_angle(task.a_star, cfg.delta0, rng)
            return seed, altmin_gd(task, a0, cfg.eta, cfg.rounds, rng)
        return unit

    outcomes = _run_units([make_unit(s) for s in cfg.seeds], cfg.workers)
    delta_runs = []
    summary_rows = []
    for seed, rep in outcomes:
        path = os.path.join(result.out_dir, f"theory-homog_seed{seed}.csv")
        write_trace_csv(path, rep.rows(), THEORY_COLUMNS)
        result.files.append(path)
        delta_runs.append((f"seed {seed}", rep.deltas))
        summary_rows.append({
            "label": f"seed{seed}", "n_seeds": 1,
            "final_loss_mean": repr(rep.losses[-1]), "final_loss_std": repr(0.0),
            "final_accuracy_mean": "", "final_accuracy_std": "",
            "final_angle_mean": repr(rep.deltas[-1]), "final_angle_std": repr(0.0)})
    result.summary = summary_rows
    if cfg.plots:
        from . import figures
        fig_path = os.path.join(result.out_dir, "theory-homog.png")
        figures.plot_delta_curves(fig_path, delta_runs, bound,
                                  "alternating minimization contraction")
        result.files.append(fig_path)


def _theory_heter(cfg: ExperimentConfig, result: ExperimentResult) -> None:
    delta_runs = []
    summary_rows = []
    for seed in cfg.seeds:
        rng = derive_rng(seed, _TAG_TASK)
        b_bar = rng.standard_normal(cfg.d)
        b_bar *= cfg.b_norm / np.linalg.norm(b_bar)
        task = make_heterogeneous_task(cfg.d, 1, cfg.n_clients, b_bar,
                                       cfg.gamma, rng, POPULATION)
        a0 = init_with_angle(task.a_star, cfg.delta0, rng)
        bb = float(np.linalg.norm(task.b_bar_star))
        factor = 1.0 - 2.0 * cfg.eta * (1.0 - cfg.delta0**2) * bb**2
        floor = client_variance(task).gamma_sq + bb**2 * cfg.delta0**2
        ffa_loss = ffa_heter_loss_exact(task, a0)

        a = a0
        deltas = [cfg.delta0]
        rows = []
        for t in range(cfg.rounds):
            a, b_bar_t = heter_population_round(a, task, cfg.eta)
            delta = float(np.linalg.norm(a - task.a_star * (task.a_star @ a)))
            loss = client_variance(task).gamma_sq + bb**2 * delta**2
            rows.append({
                "round": t, "trained_factor": "", "global_loss": repr(loss),
                "angle_distance": repr(delta), "test_accuracy": "",
                "elapsed_ms": "", "ratio": repr(delta / deltas[-1]),
                "bound": repr(factor), "predicted_loss": repr(floor),
                "empirical_loss": repr(ffa_loss), "std_err": ""})
            deltas.append(delta)
        path = os.path.join(result.out_dir, f"theory-heter_seed{seed}.csv")
        write_trace_csv(path, rows, THEORY_COLUMNS)
        result.files.append(path)
        delta_runs.append((f"seed {seed}", deltas))
        summary_rows.append({
            "label": f"seed{seed}", "n_seeds": 1,
            "final_loss_mean": rows[-1]["global_loss"], "final_loss_std": repr(0.0),
            "final_accuracy_mean": "", "final_accuracy_std": "",
            "final_angle_mean": repr(deltas[-1]), "final_angle_std": repr(0.0)})
    result.summary = summary_rows
    if cfg.plots:
        from . import figures
        fig_path = os.path.join(result.out_dir, "theory-heter.png")
        figures.plot_delta_curves(
            fig_path, delta_runs, None,
            "heterogeneous population contraction")
        result.files.append(fig_path)


def _ffa_monte_carlo(cfg: ExperimentConfig, result: ExperimentResult) -> None:
    rows = []
    preds, emps, ses = [], [], []
    for k, delta0 in enumerate(cfg.delta0s):
        rng = derive_rng(cfg.seeds[0], _TAG_TASK, k)
        task = make_homogeneous_task(cfg.d, cfg.m, cfg.n_clients, cfg.b_norm,
                                     rng, FINITE)
        a0 = init_with_angle(task.a_star, delta0, rng)
        pred = ffa_homog_predicted_loss(cfg.n_clients, cfg.m, delta0,
                                        cfg.b_norm).predicted
        mean, se = ffa_homog_empirical_loss(task, a0, cfg.trials, rng)
        rows.append({
            "round": k, "trained_factor": "", "global_loss": "",
            "angle_distance": repr(delta0), "test_accuracy": "",
            "elapsed_ms": "", "ratio": "", "bound": "",
            "predicted_loss": repr(pred), "empirical_loss": repr(mean),
            "std_err": repr(se)})
        preds.append(pred)
        emps.append(mean)
        ses.append(se)
    path = os.path.join(result.out_dir, "ffa_monte_carlo.csv")
    write_trace_csv(path, rows, THEORY_COLUMNS)
    result.files.append(path)
    result.summary = [{
        "label": f"delta0={d0}", "n_seeds": cfg.trials,
        "final_loss_mean": repr(emp), "final_loss_std": repr(se),
        "final_accuracy_mean": "", "final_accuracy_std": "",
        "final_angle_mean": "", "final_angle_std": ""}
        for d0, emp, se in zip(cfg.delta0s, emps, ses)]
    if cfg.plots:
        from . import figures
        fig_path = os.path.join(result.out_dir, "ffa_monte_carlo.png")
        figures.plot_mc_floor(fig_path, list(cfg.delta0s), preds, emps, ses,
                              "freeze-a loss floor: closed form vs Monte Carlo")
        result.files.append(fig_path)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the configured experiment and write CSVs and figures.

    Writes one trace CSV per unit run plus summary.csv; figures are rendered
    next to them unless plots = false.
    """
    _validate(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    result = ExperimentResult(out_dir=cfg.out)
    if cfg.experiment in ("compare-protocols", "nonlinear-toy",
                          "ablation-schedule", "ablation-local-steps"):
        _federated_kind(cfg, result)
    elif cfg.experiment == "theory-homog":
        _theory_homog(cfg, result)
    elif cfg.experiment == "theory-heter":
        _theory_heter(cfg, result)
    elif cfg.experiment == "ffa-monte-carlo":
        _ffa_monte_carlo(cfg, result)
    summary_path = os.path.join(cfg.out, "summary.csv")
    _write_summary(summary_path, result.summary)
    result.files.append(summary_path)
    return result


def apply_overrides(cfg: ExperimentConfig, out: str | None = None,
                    seeds: tuple[int, ...] | None = None,
                    workers: int | None = None,
                    plots: bool | None = None) -> ExperimentConfig:
    updates = {}
    if out is not None:
        updates["out"] = out
    if seeds is not None:
        updates["seeds"] = seeds
    if workers is not None:
        updates["workers"] = workers
    if plots is not None:
        updates["plots"] = plots
    return replace(cfg, **updates) if updates else cfg
