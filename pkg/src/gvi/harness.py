"""Run experiments described by an :class:`ExperimentConfig` and write tidy CSV.

Layout under ``<out>/<name>/<label>/``:

* tabular: ``seed_<s>.csv`` (iter, lambda, err_norm, gap, bound_thm2,
  bound_thm1), ``seed_<s>.bound.csv`` (the full bound breakdown),
  ``seed_<s>.trace.json`` (input for certification) and ``aggregate.csv``
  (mean/std over seeds per iteration);
* deep: ``seed_<s>.csv`` (evaluation rows), ``seed_<s>.series.csv``
  (per-gradient-step TD max and coefficients), optional
  ``seed_<s>.ckpt`` and ``aggregate.csv``.

Seeds run in sorted order and every number is written with ``repr``, so a
rerun with the same config reproduces the files byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gvi.bounds import BoundReport, theorem1_bound, theorem2_bound
from gvi.config import ExperimentConfig, config_to_json, expand
from gvi.deep.dgvi import LOG_COLUMNS, DeepConfig, Trainer, TrainingLog
from gvi.envs.control import make_task
from gvi.envs.finite import random_mdp, two_state_mdp
from gvi.envs.maze import MazeSpec, build_maze
from gvi.exceptions import ConfigError, TraceFileError
from gvi.mdp import TabularMdp
from gvi.tabular import (
    CoefficientSchedule,
    ErrorModel,
    IterationTrace,
    averaged_iteration_run,
    gvi_explicit_run,
    gvi_stable_run,
    mdvi_run,
)

log = logging.getLogger(__name__)

TRACE_FORMAT = "gvi-trace"
TRACE_VERSION = 1
TRACE_COLUMNS = ("iter", "lambda", "err_norm", "gap", "bound_thm2", "bound_thm1")


def _num(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _run_dir(cfg: ExperimentConfig, out_dir) -> Path:
    root = Path(cfg.out if out_dir is None else out_dir) / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(config_to_json(cfg))
    return root


# --- tabular -------------------------------------------------------------------------


def build_tabular_mdp(cfg: ExperimentConfig, seed: int) -> TabularMdp:
    env = cfg.env
    if env.kind == "maze":
        spec = MazeSpec(width=env.width, height=env.height, success_prob=env.success_prob,
                        slip_prob=env.slip_prob, goal_reward=env.goal_reward, horizon=env.horizon,
                        gamma=env.gamma, wall_density=env.wall_density,
                        rng_seed=seed if env.maze_seed is None else env.maze_seed)
        return build_maze(spec).mdp
    if env.kind == "random_mdp":
        return random_mdp(env.num_states, env.num_actions, env.gamma, seed=seed)
    if env.kind == "two_state":
        return two_state_mdp(env.big_k, env.gamma)[0]
    raise ConfigError(f"{env.kind!r} is not a tabular environment")


def error_model(cfg: ExperimentConfig) -> ErrorModel:
    e = cfg.errors
    return ErrorModel(e.kind, period=e.period, scale=e.scale, application_mode=e.application_mode)


def run_scheme(cfg: ExperimentConfig, seed: int, mdp: TabularMdp | None = None) -> IterationTrace:
    """One seeded tabular run; the seed drives both the environment and the errors."""
    mdp = build_tabular_mdp(cfg, seed) if mdp is None else mdp
    em, iters, s = error_model(cfg), cfg.tabular.iterations, cfg.schedule
    if cfg.scheme == "mdvi":
        return mdvi_run(mdp, s.lambda_const, em, iters, seed)
    schedule = CoefficientSchedule(s.alpha1, s.alpha2, s.lambda_init)
    if cfg.scheme == "gvi_explicit":
        return gvi_explicit_run(mdp, schedule, em, iters, seed)
    if cfg.scheme == "gvi_stable":
        return gvi_stable_run(mdp, schedule, em, iters, seed, log_floor=cfg.tabular.log_floor)
    if cfg.scheme == "averaged":
        return averaged_iteration_run(mdp, schedule, em, iters, seed)
    raise ConfigError(f"scheme {cfg.scheme!r} is not tabular")


def trace_bounds(trace: IterationTrace) -> tuple[BoundReport, np.ndarray]:
    """(dynamic-coefficient report, constant-coefficient bound or all-NaN)."""
    report = theorem2_bound(trace)
    if trace.constant_lambda:
        thm1 = theorem1_bound(trace)
    else:
        thm1 = np.full(trace.iterations, np.nan)
    return report, thm1


def trace_to_dict(trace: IterationTrace, **meta) -> dict:
    return {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        **meta,
        "scheme": trace.scheme,
        "gamma": trace.gamma,
        "num_actions": trace.num_actions,
        "lambdas": list(trace.lambdas),
        "err_norms": list(trace.err_norms),
        "gaps": list(trace.gaps),
        "q_norms": list(trace.q_norms),
        "weighted_err_sums": list(trace.weighted_err_sums),
        "uniform_err_sums": list(trace.uniform_err_sums),
    }


def _float_list(data, key, length, path) -> list[float]:
    seq = data.get(key)
    if not isinstance(seq, list) or len(seq) != length:
        raise TraceFileError(f"{path}: field {key!r} must be a list of {length} numbers")
    try:
        out = [float(x) for x in seq]
    except (TypeError, ValueError):
        raise TraceFileError(f"{path}: field {key!r} holds a non-numeric entry") from None
    if not all(math.isfinite(x) for x in out):
        raise TraceFileError(f"{path}: field {key!r} holds a non-finite entry")
    return out


def trace_from_dict(data, path="<trace>") -> IterationTrace:
    if not isinstance(data, dict) or data.get("format") != TRACE_FORMAT:
        raise TraceFileError(f"{path}: not a {TRACE_FORMAT} file")
    if data.get("version") != TRACE_VERSION:
        raise TraceFileError(f"{path}: unsupported trace version {data.get('version')!r}")
    gaps = data.get("gaps")
    if not isinstance(gaps, list) or not gaps:
        raise TraceFileError(f"{path}: no iterations recorded")
    n = len(gaps)
    try:
        gamma, num_actions = float(data["gamma"]), int(data["num_actions"])
    except (KeyError, TypeError, ValueError):
        raise TraceFileError(f"{path}: missing or malformed gamma/num_actions") from None
    if not 0 < gamma < 1 or num_actions < 1:
        raise TraceFileError(f"{path}: gamma must lie in (0, 1) and num_actions be positive")
    lambdas = _float_list(data, "lambdas", n + 1, path)
    if min(lambdas) <= 0:
        raise TraceFileError(f"{path}: coefficients must be positive")
    return IterationTrace(
        scheme=str(data.get("scheme", "unknown")),
        gamma=gamma,
        num_actions=num_actions,
        lambdas=lambdas,
        err_norms=_float_list(data, "err_norms", n, path),
        gaps=_float_list(data, "gaps", n, path),
        q_norms=_float_list(data, "q_norms", n + 1, path),
        weighted_err_sums=_float_list(data, "weighted_err_sums", n + 1, path),
        uniform_err_sums=_float_list(data, "uniform_err_sums", n + 1, path),
    )


def write_trace(trace: IterationTrace, stem: Path, **meta) -> tuple[BoundReport, np.ndarray]:
    report, thm1 = trace_bounds(trace)
    rows = [(k + 1, _num(trace.lambdas[k]), _num(trace.err_norms[k]), _num(trace.gaps[k]),
             _num(report.bound[k]), _num(thm1[k])) for k in range(trace.iterations)]
    _write_csv(stem.with_suffix(".csv"), TRACE_COLUMNS, rows)
    _write_csv(stem.with_suffix(".bound.csv"), BoundReport.COLUMNS,
               ((r[0], *(_num(x) for x in r[1:-1]), int(r[-1])) for r in report.rows()))
    stem.with_suffix(".trace.json").write_text(json.dumps(trace_to_dict(trace, **meta)) + "\n")
    return report, thm1


@dataclass
class TabularResult:
    root: Path
    traces: dict[str, dict[int, IterationTrace]] = field(default_factory=dict)
    violations: dict[str, int] = field(default_factory=dict)

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


def run_tabular(cfg: ExperimentConfig, out_dir=None) -> TabularResult:
    if cfg.is_deep:
        raise ConfigError(f"scheme {cfg.scheme!r} is a deep scheme; use run_deep")
    root = _run_dir(cfg, out_dir)
    result = TabularResult(root)
    for label, vcfg in expand(cfg):
        if vcfg.is_deep:
            raise ConfigError(f"variant {label!r} selects deep scheme {vcfg.scheme!r}")
        vdir = root / label
        vdir.mkdir(exist_ok=True)
        traces, gaps, lams, bounds, bad = {}, [], [], [], 0
        for seed in sorted(vcfg.seeds):
            trace = run_scheme(vcfg, seed)
            report, _ = write_trace(trace, vdir / f"seed_{seed}", seed=seed, label=label)
            bad += report.violations
            traces[seed] = trace
            gaps.append(trace.gaps)
            lams.append(trace.lambdas[:-1])
            bounds.append(report.bound)
            log.info("%s seed %d: final gap %.3g, %d bound violations", label, seed, trace.gaps[-1],
                     report.violations)
        gaps, lams, bounds = np.array(gaps), np.array(lams), np.array(bounds)
        rows = ((k + 1, _num(gaps[:, k].mean()), _num(gaps[:, k].std()), _num(lams[:, k].mean()),
                 _num(lams[:, k].std()), _num(bounds[:, k].mean()), len(traces))
                for k in range(gaps.shape[1]))
        _write_csv(vdir / "aggregate.csv",
                   ("iter", "gap_mean", "gap_std", "lambda_mean", "lambda_std", "bound_thm2_mean", "n_seeds"), rows)
        result.traces[label] = traces
        result.violations[label] = bad
    return result


# --- bound certification ---------------------------------------------------------------


@dataclass
class CertificationReport:
    rows: list[tuple] = field(default_factory=list)

    COLUMNS = ("file", "scheme", "iterations", "violations_thm2", "max_gap_over_bound_thm2",
               "thm1_checked", "violations_thm1")

    @property
    def runs(self) -> int:
        return len(self.rows)

    @property
    def iterations_checked(self) -> int:
        return sum(r[2] for r in self.rows)

    @property
    def violations(self) -> int:
        return sum(r[3] + r[6] for r in self.rows)

    def summary(self) -> str:
        thm1 = sum(1 for r in self.rows if r[5])
        return (f"runs checked: {self.runs}; iterations checked: {self.iterations_checked}; "
                f"constant-coefficient runs also checked against their own bound: {thm1}; "
                f"violations: {self.violations}")

    def write_csv(self, path) -> None:
        _write_csv(Path(path), self.COLUMNS,
                   ((r[0], r[1], r[2], r[3], _num(r[4]), int(r[5]), r[6]) for r in self.rows))


def find_traces(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(p.rglob("*.trace.json"))
        elif p.is_file():
            found.append(p)
        else:
            raise TraceFileError(f"{p}: no such file or directory")
    if not found:
        raise TraceFileError(f"no traces found in {', '.join(map(str, paths)) or '<nothing>'}")
    return found


def certify_bounds(paths, slack: float = 1e-9) -> CertificationReport:
    report = CertificationReport()
    for path in find_traces(paths):
        try:
            data = json.loads(path.read_text())
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as err:
            raise TraceFileError(f"{path}: unreadable trace ({err})") from None
        trace = trace_from_dict(data, path)
        bound2, thm1 = trace_bounds(trace)
        gap = np.asarray(trace.gaps)
        v2 = int(np.count_nonzero(gap > bound2.bound + slack))
        ratio = float(np.max(gap / bound2.bound))
        checked1 = trace.constant_lambda
        v1 = int(np.count_nonzero(gap[1:] > thm1[1:] + slack)) if checked1 else 0
        report.rows.append((str(path), trace.scheme, trace.iterations, v2, ratio, checked1, v1))
    return report


# --- deep ----------------------------------------------------------------------------------


def deep_config(cfg: ExperimentConfig, seed: int) -> DeepConfig:
    d, s = cfg.deep, cfg.schedule
    return DeepConfig(
        algorithm=cfg.scheme, seed=seed, total_steps=d.total_steps, buffer_capacity=d.buffer_capacity,
        batch_size=d.batch_size, learning_starts=d.learning_starts, lr=d.lr, gamma=cfg.env.gamma,
        hidden=tuple(d.hidden), alpha1=s.alpha1, alpha2=s.alpha2, nu=d.nu, nu_slow=d.nu_slow,
        lambda_init=s.lambda_init, lambda_const=s.lambda_const, log_floor=d.log_floor,
        eval_every=d.eval_every, eval_episodes=d.eval_episodes, exploration=d.exploration,
        epsilon=d.epsilon, target_network=d.target_network, polyak=d.polyak, dtype=d.dtype,
    )


def train_seed(cfg: ExperimentConfig, seed: int, checkpoint: Path | None = None,
               resume: bool = False) -> TrainingLog:
    """Train one seed, saving to ``checkpoint`` every ``deep.checkpoint_every`` steps.

    With ``resume`` an existing checkpoint is continued instead of starting over.
    """
    task = make_task(cfg.env.kind)
    dcfg = deep_config(cfg, seed)
    if resume and checkpoint is not None and checkpoint.exists():
        trainer = Trainer.load(checkpoint, task, total_steps=dcfg.total_steps)
        if trainer.config != dcfg:
            raise ConfigError(f"{checkpoint} was written with different settings; refusing to resume")
        log.info("resuming %s from step %d", checkpoint, trainer.steps)
    else:
        trainer = Trainer(task, dcfg)
    every = cfg.deep.checkpoint_every
    if checkpoint is None or every is None:
        return trainer.run()
    while trainer.steps < dcfg.total_steps:
        trainer.run(until=trainer.steps + every)
        trainer.save(checkpoint)
    return trainer.log


@dataclass
class DeepResult:
    root: Path
    logs: dict[str, dict[int, TrainingLog]] = field(default_factory=dict)


def final_third(values: np.ndarray) -> np.ndarray:
    """Trailing third of an evaluation series (at least one entry)."""
    n = len(values)
    return values[n - max(1, n // 3):]


def deep_statistics(logs: dict[int, TrainingLog]) -> dict[str, float]:
    """Seed-level summaries used to compare algorithms.

    ``final_third_std``: standard deviation across seeds of each seed's mean
    evaluation return over the last third of training. ``td_max_mean``: mean
    over seeds of the time-averaged per-gradient-step batch TD max.
    """
    seeds = sorted(logs)
    per_seed = np.array([final_third(logs[s].column("return_mean")).mean() for s in seeds])
    tds = np.array([np.mean(logs[s].td_max) for s in seeds])
    return {
        "final_third_mean": float(per_seed.mean()),
        "final_third_std": float(per_seed.std()),
        "final10_mean": float(np.mean([logs[s].column("return_mean")[-10:].mean() for s in seeds])),
        "td_max_mean": float(tds.mean()),
        "lambda_final_mean": float(np.mean([logs[s].lam[-1] if logs[s].lam else math.nan for s in seeds])),
    }


def run_deep(cfg: ExperimentConfig, out_dir=None, resume: bool = False) -> DeepResult:
    if not cfg.is_deep:
        raise ConfigError(f"scheme {cfg.scheme!r} is tabular; use run_tabular")
    root = _run_dir(cfg, out_dir)
    result = DeepResult(root)
    for label, vcfg in expand(cfg):
        if not vcfg.is_deep:
            raise ConfigError(f"variant {label!r} selects tabular scheme {vcfg.scheme!r}")
        vdir = root / label
        vdir.mkdir(exist_ok=True)
        logs = {}
        for seed in sorted(vcfg.seeds):
            ckpt = vdir / f"seed_{seed}.ckpt" if vcfg.deep.checkpoint_every else None
            tlog = train_seed(vcfg, seed, ckpt, resume)
            tlog.write_csv(vdir / f"seed_{seed}.csv")
            tlog.write_series_csv(vdir / f"seed_{seed}.series.csv")
            logs[seed] = tlog
            log.info("%s seed %d: last evaluation %.1f, mean TD max %.3g", label, seed,
                     tlog.rows[-1][1] if tlog.rows else math.nan,
                     np.mean(tlog.td_max) if tlog.td_max else math.nan)
        _write_deep_aggregate(vdir / "aggregate.csv", logs)
        stats = deep_statistics(logs) if all(l.rows and l.td_max for l in logs.values()) else {}
        _write_csv(vdir / "summary.csv", ("statistic", "value"), ((k, _num(v)) for k, v in stats.items()))
        result.logs[label] = logs
    return result


def _write_deep_aggregate(path: Path, logs: dict[int, TrainingLog]) -> None:
    seeds = sorted(logs)
    n = min(len(logs[s].rows) for s in seeds)
    cols = ("return_mean", "lambda", "lambda_prime", "td_max", "loss")
    table = {c: np.array([logs[s].column(c)[:n] for s in seeds]) for c in cols}
    header = ["step"]
    for c in cols:
        header += [f"{c}_mean", f"{c}_std"]
    rows = []
    for i in range(n):
        row = [logs[seeds[0]].rows[i][0]]
        for c in cols:
            v = table[c][:, i]
            row += [_num(np.mean(v)), _num(np.std(v))]
        rows.append(row)
    _write_csv(path, header + ["n_seeds"], (r + [len(seeds)] for r in rows))


__all__ = [
    "LOG_COLUMNS",
    "CertificationReport",
    "DeepResult",
    "TabularResult",
    "build_tabular_mdp",
    "certify_bounds",
    "deep_config",
    "deep_statistics",
    "error_model",
    "find_traces",
    "run_deep",
    "run_scheme",
    "run_tabular",
    "trace_bounds",
    "trace_from_dict",
    "trace_to_dict",
    "train_seed",
    "write_trace",
]
