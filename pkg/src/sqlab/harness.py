"""Deterministic experiment runner: trials in, one CSV plus a JSON sidecar out."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from sqlab import __version__, privacy
from sqlab.analysts import SignAggregation, run_trial
from sqlab.config import ExperimentConfig
from sqlab.core import REAL_VECTORS, Dataset
from sqlab.errors import SQLabError
from sqlab.mechanisms import open_session
from sqlab.verify import slack_limit, within_slack

RESULT_COLUMNS = (
    "experiment_id",
    "trial",
    "completed[bool]",
    "halted[bool]",
    "reported[query units]",
    "empirical[query units]",
    "true_expectation[query units]",
    "true_se[query units]",
    "final_query_gap[query units]",
    "generalization_gap[query units]",
    "violation[bool]",
    "rounds_detected[count]",
    "epsilon_spent[nats]",
    "delta_spent[probability]",
    "queries_answered[count]",
    "reported_unrescaled[raw units]",
    "true_unrescaled[raw units]",
)

STREAM_LAYOUT = {
    "dataset": "(seed, trial, 0)",
    "session": "(seed, trial, 1)",
    "analyst": "(seed, trial, 2)",
    "monte_carlo": "(seed, trial, 3)",
    "reference_query": "(seed, trial, 4)",
}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else format(float(x), ".17g")
    return str(x)


def _row(exp_id: str, tau: float, o) -> list:
    ex = o.extra
    return [exp_id, o.trial, o.completed, o.halted, o.reported, o.empirical, o.true, o.true_se, o.gap,
            o.generalization_gap, bool(o.completed and o.generalization_gap > tau), o.rounds_detected,
            o.epsilon_spent, o.delta_spent, o.queries_answered, ex.get("reported_unrescaled"),
            ex.get("true_unrescaled")]


def results_csv_text(cfg: ExperimentConfig, outcomes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for o in sorted(outcomes, key=lambda o: o.trial):
        w.writerow([_fmt(v) for v in _row(cfg.id, cfg.mechanism.tau, o)])
    return buf.getvalue()


def _atomic_write(files) -> None:
    """Write every ``(path, text)`` pair to a temporary file, then rename all into place.

    If any rename fails, files already renamed by this call are removed again.
    """
    staged = []
    try:
        for path, text in files:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            staged.append((tmp, path))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
                fh.flush()
                os.fsync(fh.fileno())
        placed = []
        try:
            for tmp, path in staged:
                os.replace(tmp, path)
                placed.append(path)
        except BaseException:
            for path in placed:
                path.unlink(missing_ok=True)
            raise
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


def sidecar_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".meta.json")


def formula_evaluations(cfg: ExperimentConfig, log_universe: Optional[float]) -> dict:
    """Every sample-size formula whose inputs the config supplies."""
    m = cfg.mechanism
    out = {}
    for key, (desc, _) in privacy.FORMULAS.items():
        try:
            n = privacy.required_sample_size(key, m.tau, m.beta, m=m.m, log_universe=log_universe, r=m.r,
                                             C=cfg.C, epsilon=m.epsilon or None, delta=m.delta or None)
        except SQLabError:
            continue
        out[key] = {"formula": desc, "n": n}
    return out


def _resolved_noise(cfg: ExperimentConfig, pop) -> dict:
    """Session metadata (sigma, per-query epsilon, splits) for a placeholder dataset of size n."""
    u = pop.universe
    shape = (cfg.n, u.dim) if u.kind != "indexed" else (cfg.n,)
    dtype = np.float64 if u.kind == REAL_VECTORS else np.int64
    try:
        session = open_session(cfg.mechanism, Dataset(u, np.zeros(shape, dtype=dtype)), 0)
    except SQLabError as exc:
        return {"error": str(exc)}
    return session.metadata()


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.6g} vs {self.bound}"


def sign_aggregation_target(d: int, n: int) -> float:
    return math.sqrt(2.0 * d / (math.pi * n))


def evaluate_checks(cfg: ExperimentConfig, outcomes) -> list:
    checks = []
    done = [o for o in outcomes if o.completed]
    for name in cfg.checks:
        if name == "sign_aggregation_mean":
            target = sign_aggregation_target(cfg.strategy.d, cfg.n)
            vals = [o.extra["reported_unrescaled"] for o in done]
            mean = float(np.mean(vals)) if vals else math.nan
            ok = bool(vals) and abs(mean - target) <= 0.1 * target
            checks.append(CheckResult(name, ok, mean, f"{target:.6g} +/- 10%"))
        elif name == "transfer_rate":
            v = sum(o.generalization_gap > cfg.mechanism.tau for o in done)
            ok = within_slack(v, len(outcomes), cfg.mechanism.beta)
            checks.append(CheckResult(name, ok, v / max(1, len(outcomes)),
                                      f"beta={cfg.mechanism.beta} (<= {slack_limit(len(outcomes), cfg.mechanism.beta)}"
                                      f" of {len(outcomes)} with 99% slack)"))
        elif name == "final_gap_rate":
            v = sum(o.gap > cfg.mechanism.tau for o in done) + (len(outcomes) - len(done))
            ok = within_slack(v, len(outcomes), cfg.mechanism.beta)
            checks.append(CheckResult(name, ok, v / max(1, len(outcomes)), f"beta={cfg.mechanism.beta}"))
    return checks


@dataclass
class ExperimentResult:
    csv_path: Optional[Path]
    meta_path: Optional[Path]
    csv_text: str
    metadata: dict
    outcomes: list
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _timed_trial(args):
    t0 = time.perf_counter()
    o = run_trial(*args)
    return o, time.perf_counter() - t0


def run_experiment(cfg: ExperimentConfig, out=None) -> ExperimentResult:
    """Run all trials and write ``out`` (or ``cfg.output``) plus its ``.meta.json`` sidecar.

    Both files are written through a temporary file and renamed into place,
    so an interrupted run leaves neither behind.  The CSV depends only on
    the config and seed; timings go to the sidecar.
    """
    cfg.validate()
    pop = cfg.population.build()
    jobs = [(pop, cfg.n, cfg.mechanism, cfg.strategy, cfg.seed, t, cfg.mc_trials) for t in range(cfg.trials)]
    start = time.perf_counter()
    if cfg.workers > 1 and cfg.trials > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            timed = list(pool.map(_timed_trial, jobs))
    else:
        timed = [_timed_trial(j) for j in jobs]
    elapsed = time.perf_counter() - start
    outcomes = sorted((o for o, _ in timed), key=lambda o: o.trial)
    csv_text = results_csv_text(cfg, outcomes)
    checks = evaluate_checks(cfg, outcomes)
    u = pop.universe
    log_x = u.log_size if u.discrete else None
    done = [o for o in outcomes if o.completed]
    summary = {
        "trials": len(outcomes),
        "completed": len(done),
        "mean_reported": float(np.mean([o.reported for o in done])) if done else None,
        "mean_true": float(np.mean([o.true for o in done])) if done else None,
        "violations": sum(o.generalization_gap > cfg.mechanism.tau for o in done),
    }
    if isinstance(cfg.strategy, SignAggregation) and done:
        rep = [o.extra["reported_unrescaled"] for o in done]
        tru = [o.extra["true_unrescaled"] for o in done]
        summary.update(mean_reported_unrescaled=float(np.mean(rep)), mean_true_unrescaled=float(np.mean(tru)),
                       sign_aggregation_target=sign_aggregation_target(cfg.strategy.d, cfg.n),
                       truncation_bound=done[0].extra["bound"],
                       mean_truncation_discrepancy=float(np.mean(
                           [o.extra["reported_unrescaled"] - o.extra["empirical_untruncated"] for o in done])))
    metadata = {
        "experiment_id": cfg.id,
        "tool_version": __version__,
        "master_seed": cfg.seed,
        "stream_ids": STREAM_LAYOUT,
        "per_trial_streams": [[cfg.seed, t] for t in range(cfg.trials)],
        "config": cfg.to_dict(),
        "C": cfg.C,
        "log_base": privacy.LOG_BASE_NOTE,
        "resolved_mechanism": _resolved_noise(cfg, pop),
        "formula_evaluations": formula_evaluations(cfg, log_x),
        "columns": list(RESULT_COLUMNS),
        "summary": summary,
        "checks": [{"name": c.name, "passed": c.passed, "value": c.value, "bound": c.bound} for c in checks],
        "wall_time_seconds": {"total": elapsed, "per_trial": [t for _, t in sorted(
            timed, key=lambda p: p[0].trial)]},
    }
    target = out if out is not None else cfg.output
    csv_path = meta_path = None
    if target is not None:
        csv_path = Path(target)
        meta_path = sidecar_path(csv_path)
        meta_text = json.dumps(metadata, indent=2, sort_keys=True, default=_json_default) + "\n"
        _atomic_write([(csv_path, csv_text), (meta_path, meta_text)])
    return ExperimentResult(csv_path, meta_path, csv_text, metadata, outcomes, checks)


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (tuple, set)):
        return list(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
