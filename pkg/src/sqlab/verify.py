"""Numeric oracles for moment and tail bounds, plus Monte Carlo checks of
generalization guarantees.

Closed-form bounds are compared against exact binomial sums computed here
by direct summation, never against another bound.  Monte Carlo checks
decide pass/fail with :func:`within_slack`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from sqlab import privacy
from sqlab.analysts import (
    NonAdaptiveRandom,
    RoundStructured,
    Strategy,
    drive,
    make_analyst,
    run_trials,
)
from sqlab.core import (
    Population,
    Query,
    Universe,
    make_rng,
    sample_dataset,
    true_expectation,
)
from sqlab.errors import ConditionViolated, MomentOverflow, ValidationError
from sqlab.mechanisms import (
    EFFECTIVE_ROUNDS,
    NAIVE,
    SPARSE_VECTOR,
    OracleConfig,
    effective_rounds_sizes,
    open_session,
)

MOMENT_N_LIMIT = 10**6
DEFAULT_CONFIDENCE = 0.99


# --------------------------------------------------------------------------
# Exact binomial quantities


@dataclass(frozen=True)
class MomentSpec:
    n: int
    p: float
    k: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValidationError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError("p must lie in [0, 1]")


def binomial_moment(n: Union[int, MomentSpec], p: Optional[float] = None, k: Optional[int] = None) -> float:
    """k-th moment of Bin(n, p)/n, summed term by term in log space."""
    spec = n if isinstance(n, MomentSpec) else MomentSpec(n, p, k)
    n, p, k = spec.n, spec.p, spec.k
    if n > MOMENT_N_LIMIT:
        raise MomentOverflow(f"n = {n} exceeds the exact-summation limit {MOMENT_N_LIMIT}")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    j = np.arange(1, n + 1)
    log_terms = stats.binom.logpmf(j, n, p) + k * np.log(j / n)
    return math.fsum(np.exp(log_terms).tolist())


def binomial_tail_ge(n: int, p: float, fraction: float) -> float:
    """Exact Pr[Bin(n, p)/n >= fraction] by summing the pmf."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError("p must lie in [0, 1]")
    j_min = max(0, math.ceil(n * fraction - 1e-9))
    if j_min > n:
        return 0.0
    j = np.arange(j_min, n + 1)
    return min(1.0, math.fsum(stats.binom.pmf(j, n, p).tolist()))


def binomial_tail_le(n: int, p: float, fraction: float) -> float:
    """Exact Pr[Bin(n, p)/n <= fraction] by summing the pmf."""
    j_max = min(n, math.floor(n * fraction + 1e-9))
    if j_max < 0:
        return 0.0
    j = np.arange(0, j_max + 1)
    return min(1.0, math.fsum(stats.binom.pmf(j, n, p).tolist()))


# --------------------------------------------------------------------------
# Closed-form bounds


def hoeffding_bound(n: int, tau: float) -> float:
    """Two-sided Hoeffding bound 2 exp(-2 tau^2 n)."""
    if tau < 0:
        raise ValidationError("tau must be >= 0")
    return 2.0 * math.exp(-2.0 * tau * tau * n)


def chernoff_mult_bound(n: int, p: float, gamma: float) -> float:
    """Upper tail Pr[mean >= (1 + gamma) p] <= exp(-n p ((1+g) ln(1+g) - g))."""
    if p <= 0 or gamma <= 0:
        raise ValidationError("need p > 0 and gamma > 0")
    return math.exp(-n * p * ((1.0 + gamma) * math.log1p(gamma) - gamma))


def mcdiarmid_bound(n: int, c: float, alpha: float) -> float:
    """Bounded-differences tail exp(-2 alpha^2 / (n c^2))."""
    if c <= 0:
        raise ValidationError("c must be > 0")
    return math.exp(-2.0 * alpha * alpha / (n * c * c))


def moment_upper_bound(n: int, p: float, k: int) -> float:
    return p**k + (k * math.log(n) + 1.0) * (k / n) ** k


def check_moment_upper_bound(n: int, p: float, k: int) -> tuple[float, float, bool]:
    """(exact moment, closed-form bound, whether the bound holds to 1e-12 relative)."""
    lhs = binomial_moment(n, p, k)
    rhs = moment_upper_bound(n, p, k)
    return lhs, rhs, lhs <= rhs * (1.0 + 1e-12)


def loglog_floor(n: int) -> int:
    """Minimum moment order from the log-log condition, read as ceil(2 log2(ln n))."""
    ln_n = math.log(n)
    if ln_n <= 1.0:
        return 0
    return math.ceil(2.0 * math.log2(ln_n) - 1e-12)


LOGLOG_READING = "2 log log n read as ceil(2 * log2(ln n))"


@dataclass
class MarkovTail:
    """Markov bound on Pr[V >= p + tau] for V with a DP-inflated k-th moment."""

    bound: float
    beta_form: float
    beta: float
    moment: float
    conditions: dict
    loglog_reading: str = LOGLOG_READING

    @property
    def conditions_hold(self) -> bool:
        return all(self.conditions.values())


def markov_moment_tail(n: int, p: float, k: int, eps: float, delta_term: float, tau: float,
                       beta: Optional[float] = None, strict: bool = True) -> MarkovTail:
    """Evaluate e^{eps k} M_k/(p+tau)^k + delta/(p+tau)^k and beta + delta/(p+tau)^k.

    When ``beta`` is omitted the smallest beta allowed by the moment-order
    condition, 2 exp(-k tau / (4p)), is used.  With ``strict`` any failed
    side condition raises :class:`ConditionViolated` naming it.
    """
    if p <= 0:
        raise ValidationError("p must be > 0")
    if beta is None:
        beta = 2.0 * math.exp(-k * tau / (4.0 * p))
    moment = binomial_moment(n, p, k)
    scale = (p + tau) ** k
    bound = math.exp(eps * k) * moment / scale + delta_term / scale
    need_k = 4.0 * p * math.log(2.0 / beta) / tau if 0 < beta and tau > 0 else math.inf
    conditions = {
        "n > k": n > k,
        "eps <= tau/2": eps <= tau / 2.0 * (1 + 1e-12),
        "0 <= tau <= 1/3": 0.0 <= tau <= 1.0 / 3.0,
        "0 < beta <= 2/3": 0.0 < beta <= 2.0 / 3.0,
        "k >= 4p ln(2/beta)/tau": k >= need_k * (1 - 1e-12),
        "k >= 2 log log n": k >= loglog_floor(n),
        "n >= 3k/tau": tau > 0 and n >= 3.0 * k / tau * (1 - 1e-12),
    }
    if strict:
        failed = [name for name, ok in conditions.items() if not ok]
        if failed:
            raise ConditionViolated(failed)
    return MarkovTail(bound, beta + delta_term / scale, beta, moment, conditions)


# --------------------------------------------------------------------------
# Monte Carlo domination check


def _uniform_law(p):
    if p <= 0.5:
        return lambda rng, size: 2.0 * p * rng.random(size)
    return lambda rng, size: 1.0 - 2.0 * (1.0 - p) * rng.random(size)


LAWS = {
    "uniform": _uniform_law,
    "bernoulli": lambda p: (lambda rng, size: (rng.random(size) < p).astype(np.float64)),
    "constant": lambda p: (lambda rng, size: np.full(size, float(p))),
}


@dataclass
class DominationReport:
    estimate: float
    se: float
    moment: float
    trials: int
    law: str

    @property
    def holds(self) -> bool:
        return self.estimate <= self.moment + 3.0 * self.se


def check_bernoulli_domination(n: int, p: float, k: int, trials: int = 100_000, seed=0,
                               law: Union[str, Callable] = "uniform") -> DominationReport:
    """Monte Carlo estimate of E[(mean of n draws)^k] for a [0,1] law with mean p.

    ``law`` names one of :data:`LAWS` or is a callable ``(rng, shape) -> array``.
    """
    sampler = LAWS[law](p) if isinstance(law, str) else law
    rng = make_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    chunk = max(1, 2_000_000 // n)
    total = total_sq = 0.0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        x = sampler(rng, (size, n))
        if x.min() < 0.0 or x.max() > 1.0:
            raise ValidationError("law produced values outside [0, 1]")
        v = x.mean(axis=1) ** k
        total += math.fsum(v.tolist())
        total_sq += math.fsum((v * v).tolist())
        done += size
    mean = total / trials
    var = max(0.0, total_sq / trials - mean * mean) * trials / max(1, trials - 1)
    return DominationReport(mean, math.sqrt(var / trials), binomial_moment(n, p, k), trials,
                            law if isinstance(law, str) else getattr(law, "__name__", "custom"))


# --------------------------------------------------------------------------
# Binomial confidence slack


def within_slack(violations: int, trials: int, rate: float, confidence: float = DEFAULT_CONFIDENCE) -> bool:
    """Whether ``violations`` out of ``trials`` is consistent with a true rate <= ``rate``.

    Passes iff the exact upper tail Pr[Bin(trials, rate) >= violations] is
    at least (1 - confidence)/2, i.e. the two-sided Clopper-Pearson
    interval at ``confidence`` reaches down to ``rate``.
    """
    if violations <= 0:
        return True
    if violations > trials:
        raise ValidationError("violations cannot exceed trials")
    rate = min(max(rate, 0.0), 1.0)
    return binomial_tail_ge(trials, rate, violations / trials) >= (1.0 - confidence) / 2.0


def slack_limit(trials: int, rate: float, confidence: float = DEFAULT_CONFIDENCE) -> int:
    """Largest violation count that :func:`within_slack` accepts."""
    lo, hi = 0, trials
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if within_slack(mid, trials, rate, confidence):
            lo = mid
        else:
            hi = mid - 1
    return lo


# --------------------------------------------------------------------------
# Report rows


CHECK_COLUMNS = ("check_id", "parameters", "lhs", "bound", "holds", "trials", "violations")


@dataclass
class CheckRow:
    check_id: str
    parameters: str
    lhs: float
    bound: float
    holds: bool
    trials: int = 0
    violations: int = 0


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_check_csv(rows: Sequence[CheckRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CHECK_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CHECK_COLUMNS])


def check_csv_text(rows: Sequence[CheckRow]) -> str:
    buf = io.StringIO()
    write_check_csv(rows, buf)
    return buf.getvalue()


MOMENT_GRID_N = tuple(range(10, 201, 10))
MOMENT_GRID_K = tuple(range(1, 11))
MOMENT_GRID_P = (0.0, 0.01, 0.1, 0.5, 0.9, 1.0)


def moment_grid(ns=MOMENT_GRID_N, ks=MOMENT_GRID_K, ps=MOMENT_GRID_P) -> list:
    rows = []
    for n in ns:
        for k in ks:
            if k > n:
                continue
            for p in ps:
                lhs, rhs, ok = check_moment_upper_bound(n, p, k)
                rows.append(CheckRow("moment_upper_bound", f"n={n};k={k};p={p}", lhs, rhs, ok))
    return rows


def bound_oracle_rows() -> list:
    """Each closed-form tail bound next to the exact binomial tail it dominates."""
    rows = []
    for n, p, g in ((100, 0.5, 0.2), (1000, 0.1, 0.5), (50, 0.3, 1.0)):
        exact = binomial_tail_ge(n, p, (1 + g) * p)
        b = chernoff_mult_bound(n, p, g)
        rows.append(CheckRow("chernoff_vs_exact", f"n={n};p={p};gamma={g}", exact, b, exact <= b))
    for n, tau in ((1000, 0.05), (200, 0.1), (100, 0.2)):
        exact = binomial_tail_ge(n, 0.5, 0.5 + tau) + binomial_tail_le(n, 0.5, 0.5 - tau)
        b = hoeffding_bound(n, tau)
        rows.append(CheckRow("hoeffding_vs_exact", f"n={n};p=0.5;tau={tau}", exact, b, exact <= b))
    for n, p, tau, eps, k in ((1000, 0.1, 0.1, 0.05, 20), (2000, 0.2, 0.2, 0.1, 20)):
        mt = markov_moment_tail(n, p, k, eps, 0.0, tau, strict=False)
        exact = binomial_tail_ge(n, p, p + tau)
        rows.append(CheckRow("markov_tail_vs_exact", f"n={n};p={p};tau={tau};eps={eps};k={k}",
                             exact * math.exp(eps * k), mt.bound, exact * math.exp(eps * k) <= mt.bound))
    return rows


# --------------------------------------------------------------------------
# Monte Carlo generalization checks


APPROX_DELTA_NOTE = ("approximate-DP transfer uses delta = exp(-4 ln(8/beta)/tau); an alternative "
                  "in-proof condition reads exp(-2 ln(4/beta)/tau)")


@dataclass
class TransferReport:
    mechanism: str
    strategy: str
    tau: float
    beta: float
    trials: int
    violations: int
    hoeffding_violations: int
    bound: float
    bound_name: str
    incomplete: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.violations / self.trials if self.trials else 0.0

    @property
    def passes(self) -> bool:
        return within_slack(self.violations, self.trials, self.bound)

    def row(self) -> CheckRow:
        return CheckRow(f"transfer:{self.mechanism}:{self.strategy}", f"tau={self.tau};beta={self.beta}",
                        self.rate, self.bound, self.passes, self.trials, self.violations)


def _strategy_name(s) -> str:
    return type(s).__name__


def _is_adaptive(strategy) -> bool:
    return not isinstance(strategy, NonAdaptiveRandom)


def transfer_check(cfg: OracleConfig, strategy: Strategy, pop: Population, n: int, trials: int = 500,
                   seed: int = 0, tau: Optional[float] = None, bound: Optional[float] = None,
                   workers: Optional[int] = None, mc_trials: int = 1000) -> TransferReport:
    """Count trials where the final query's empirical mean misses its true mean by more than tau.

    The default bound is the Hoeffding bound for a naive oracle with a
    non-adaptive analyst and beta otherwise.
    """
    tau = cfg.tau if tau is None else tau
    outcomes = run_trials(pop, n, cfg, strategy, seed, trials, mc_trials, workers)
    done = [o for o in outcomes if o.completed]
    violations = sum(o.generalization_gap > tau for o in done)
    baseline = sum(abs(o.reference_empirical - o.reference_true) > tau for o in outcomes)
    if bound is None:
        if cfg.mechanism == NAIVE and not _is_adaptive(strategy):
            bound, name = hoeffding_bound(n, tau), "hoeffding"
        else:
            bound, name = cfg.beta, "beta"
    else:
        name = "supplied"
    meta = {"n": n, "epsilon": cfg.epsilon, "delta": cfg.delta, "seed": seed,
            "hoeffding_bound": hoeffding_bound(n, tau), "slack_limit": slack_limit(trials, bound)}
    if cfg.delta > 0:
        meta["delta_note"] = APPROX_DELTA_NOTE
    return TransferReport(cfg.mechanism, _strategy_name(strategy), tau, cfg.beta, trials, violations,
                          baseline, bound, name, trials - len(done), meta)


@dataclass
class GapReport:
    gap: float
    se: float
    bound: float
    trials: int

    @property
    def exceeds(self) -> bool:
        return abs(self.gap) > self.bound + 3.0 * self.se


def expectation_gap_check(cfg: OracleConfig, strategy: Strategy, pop: Population, n: int, trials: int = 500,
                          seed: int = 0, workers: Optional[int] = None, mc_trials: int = 1000) -> GapReport:
    """Mean over trials of E_S[phi] - P[phi] for the final query, against e^eps - 1 + delta."""
    outcomes = [o for o in run_trials(pop, n, cfg, strategy, seed, trials, mc_trials, workers) if o.completed]
    diffs = np.array([o.empirical - o.true for o in outcomes])
    if diffs.size == 0:
        raise ValidationError("no trial reached its final query")
    se = float(diffs.std(ddof=1) / math.sqrt(diffs.size)) if diffs.size > 1 else math.inf
    return GapReport(float(diffs.mean()), se, math.expm1(cfg.epsilon) + cfg.delta, int(diffs.size))


@dataclass
class EventReport:
    events: int
    trials: int
    beta: float
    bound: float

    @property
    def rate(self) -> float:
        return self.events / self.trials if self.trials else 0.0

    @property
    def passes(self) -> bool:
        return within_slack(self.events, self.trials, self.bound)


def bad_event_monitor(cfg: OracleConfig, strategy: Strategy, pop: Population, n: int, tau: float,
                      trials: int = 500, seed: int = 0, workers: Optional[int] = None,
                      bound: Optional[float] = None) -> EventReport:
    """Frequency of S landing in {S : |E_S[psi] - P[psi]| > tau} for the final query psi.

    Uses beta = hoeffding_bound(n, tau); the default bound is 3 sqrt(beta).
    The mechanism's epsilon must not exceed ``calibrate_epsilon_events(beta, n)``.
    """
    beta = min(1.0, hoeffding_bound(n, tau))
    limit = privacy.calibrate_epsilon_events(beta, n)
    if cfg.epsilon > limit * (1 + 1e-12):
        raise ValidationError(f"epsilon = {cfg.epsilon} exceeds sqrt(ln(1/beta)/(2n)) = {limit}")
    outcomes = run_trials(pop, n, cfg, strategy, seed, trials, 1000, workers)
    events = sum(o.completed and o.generalization_gap > tau for o in outcomes)
    return EventReport(events, trials, beta, 3.0 * math.sqrt(beta) if bound is None else bound)


# --------------------------------------------------------------------------
# Sparse vector and EffectiveRounds contracts


@dataclass
class ContractReport:
    check_id: str
    trials: int
    violations: int
    bound: float
    details: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.violations / self.trials if self.trials else 0.0

    @property
    def passes(self) -> bool:
        return within_slack(self.violations, self.trials, self.bound)

    def row(self, parameters: str = "") -> CheckRow:
        return CheckRow(self.check_id, parameters, self.rate, self.bound, self.passes, self.trials,
                        self.violations)


def sparse_vector_contract_check(n: int, r: int = 3, tau: float = 0.1, beta: float = 0.05,
                                 epsilon: float = 0.5, threshold: float = 0.2, queries: int = 200,
                                 bad_positions: Sequence[int] = (60, 130, 199), bad_offset: float = 0.4,
                                 trials: int = 500, seed: int = 0, universe_size: int = 1024) -> ContractReport:
    """Per-trial contract of a sparse-vector session fed mostly exact guesses.

    Guesses equal the true mean except at ``bad_positions``, where they are
    off by ``bad_offset``.  A trial violates the contract if some Bottom
    has |E_S - g| > T + tau or some released value has |E_S - a| > tau.
    Queries after the session halts are not answered and not counted.
    """
    if len(bad_positions) > r:
        raise ValidationError("more bad guesses than firings")
    universe = Universe.indexed(universe_size)
    pop = Population.uniform(universe)
    cfg = OracleConfig(SPARSE_VECTOR, tau=tau, beta=beta, m=queries, epsilon=epsilon, r=r, threshold=threshold)
    bad = set(bad_positions)
    violations = answered = firings = 0
    for t in range(trials):
        S = sample_dataset(pop, n, make_rng(seed, t, 0))
        session = open_session(cfg, S, make_rng(seed, t, 1))
        qrng = make_rng(seed, t, 2)
        broken = False
        for i in range(queries):
            q = Query.tabulated(qrng.random(universe_size), id=f"q{i}")
            guess = true_expectation(pop, q) + (bad_offset if i in bad else 0.0)
            if session.halted:
                break
            a = session.answer(q, guess)
            e_s = session.transcript.entries[-1].empirical
            if a is None:
                broken |= abs(e_s - guess) > threshold + tau
            else:
                broken |= abs(e_s - a) > tau
                firings += 1
            answered += 1
        violations += broken
    return ContractReport("sparse_vector_contract", trials, violations, beta,
                          {"answered": answered, "firings": firings, "n": n, "threshold": threshold})


@dataclass
class RoundsReport:
    trials: int
    completed: int
    answers: int
    valid_answers: int
    beta: float
    rounds_detected: list = field(default_factory=list)
    split_sizes: tuple = ()

    @property
    def validity_rate(self) -> float:
        return self.valid_answers / self.answers if self.answers else 1.0


def effective_rounds_check(r: int = 3, tau: float = 0.25, beta: float = 0.1, trials: int = 100, seed: int = 0,
                           per_round: int = 10, n: Optional[int] = None, universe_size: int = 1024,
                           noiseless: bool = False) -> RoundsReport:
    """Run an r-round analyst against EffectiveRounds sized at its input gate.

    Completion means every planned query was answered; validity is
    |answer - P[phi]| <= tau per answer.
    """
    if n is None:
        n = effective_rounds_sizes(tau, beta, r)[0]
    universe = Universe.indexed(universe_size)
    pop = Population.uniform(universe)
    strategy = RoundStructured(r, per_round)
    cfg = OracleConfig(EFFECTIVE_ROUNDS, tau=tau, beta=beta, m=strategy.query_count, r=r, noiseless=noiseless)
    report = RoundsReport(trials, 0, 0, 0, beta)
    for t in range(trials):
        S = sample_dataset(pop, n, make_rng(seed, t, 0))
        session = open_session(cfg, S, make_rng(seed, t, 1))
        run = drive(make_analyst(strategy, universe, n, make_rng(seed, t, 2)), session)
        report.split_sizes = session.split_sizes
        report.completed += len(run.queries) == strategy.query_count and not run.transcript.halted
        report.rounds_detected.append(run.transcript.rounds_detected)
        for entry, q in zip(run.transcript.entries, run.queries):
            entry.true_expectation = true_expectation(pop, q)
            report.answers += 1
            report.valid_answers += abs(entry.answer - entry.true_expectation) <= tau
    return report
