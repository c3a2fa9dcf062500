"""Adaptive analysts that choose queries from past answers.

An analyst sees only the public shape of the data (universe, n) and the
``(query, answer)`` pairs it has received.  It never receives a
:class:`~sqlab.core.Dataset`, so any oracle it talks to keeps its privacy
guarantee under post-processing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from sqlab.core import (
    REAL_VECTORS,
    Dataset,
    Population,
    Query,
    Transcript,
    Universe,
    default_truncation,
    empirical_mean,
    make_rng,
    monte_carlo_expectation,
    sample_dataset,
    true_expectation,
    truncate_rescale,
    unrescale,
)
from sqlab.errors import SessionError, UniverseTooSmall, ValidationError
from sqlab.mechanisms import OracleConfig, OracleSession, open_session


@dataclass(frozen=True)
class NonAdaptiveRandom:
    """``m`` random queries fixed before any answer arrives."""

    m: int
    binary: bool = True

    @property
    def query_count(self) -> int:
        return self.m


@dataclass(frozen=True)
class SignAggregation:
    """Learn the sign of every coordinate mean, then query the aggregated direction.

    Queries are truncated at ``bound`` and rescaled into [0, 1]; the
    default bound is 4 sqrt(ln(d n)).
    """

    d: int
    bound: Optional[float] = None

    @property
    def query_count(self) -> int:
        return self.d + 1


@dataclass(frozen=True)
class ReconstructionProbe:
    """Random 0/1 probes, then one query built from the above-quantile probes.

    With ``strict`` the universe must hold at least 2n points.
    """

    m_probe: int
    quantile: float = 0.5
    strict: bool = True

    @property
    def query_count(self) -> int:
        return self.m_probe + 1


@dataclass(frozen=True)
class RoundStructured:
    """``r + 1`` batches of ``per_round`` queries; batch j depends on batch j-1's answers."""

    r: int
    per_round: int

    @property
    def query_count(self) -> int:
        return (self.r + 1) * self.per_round

    @property
    def cut_indices(self) -> list:
        """1-based index of the first query of each adaptive batch."""
        return [j * self.per_round + 1 for j in range(1, self.r + 1)]


Strategy = Union[NonAdaptiveRandom, SignAggregation, ReconstructionProbe, RoundStructured]


def _random_table(rng, size, binary):
    if binary:
        return rng.integers(0, 2, size=size).astype(np.float64)
    return rng.random(size)


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def _aggregate_above(tables, answers, quantile):
    """Mean of the tables whose answers exceed the given quantile, min-max scaled."""
    answers = np.asarray(answers, dtype=np.float64)
    cut = np.quantile(answers, quantile)
    chosen = answers > cut
    if not chosen.any():
        chosen = answers >= cut
    return _minmax(np.asarray(tables)[chosen].mean(axis=0))


class _NonAdaptiveAnalyst:
    def __init__(self, spec: NonAdaptiveRandom, universe: Universe, n: int, rng):
        self.spec, self.universe, self.rng = spec, universe, rng
        self.bound = default_truncation(universe.dim, n) if universe.kind == REAL_VECTORS else None

    def propose(self, history):
        i = len(history)
        if i >= self.spec.m:
            return None
        if self.universe.kind == REAL_VECTORS:
            v = self.rng.standard_normal(self.universe.dim)
            v /= np.linalg.norm(v)
            bound = self.bound
            return Query.evaluable(lambda pts, v=v: truncate_rescale(pts @ v, bound), id=f"random-{i}")
        size = self.universe.require_tabulatable()
        return Query.tabulated(_random_table(self.rng, size, self.spec.binary), id=f"random-{i}")


class _SignAggregationAnalyst:
    def __init__(self, spec: SignAggregation, universe: Universe, n: int, rng):
        if universe.kind != REAL_VECTORS or universe.dim != spec.d:
            raise ValidationError(f"sign aggregation needs a real-vector universe of dimension {spec.d}")
        self.spec = spec
        self.bound = spec.bound if spec.bound is not None else default_truncation(spec.d, n)
        self.direction = None

    def propose(self, history):
        i, d, bound = len(history), self.spec.d, self.bound
        if i < d:
            return Query.evaluable(lambda pts, i=i: truncate_rescale(pts[:, i], bound), id=f"coord-{i}")
        if i > d:
            return None
        answers = np.array([a for _, a in history], dtype=np.float64)
        signs = np.where(answers - 0.5 >= 0.0, 1.0, -1.0)
        u = signs / math.sqrt(d)
        self.direction = u
        return Query.evaluable(lambda pts: truncate_rescale(pts @ u, bound), id="final")


class _ReconstructionAnalyst:
    def __init__(self, spec: ReconstructionProbe, universe: Universe, n: int, rng):
        size = universe.require_tabulatable()
        if spec.strict and size < 2 * n:
            raise UniverseTooSmall(f"|X| = {size} < 2n = {2 * n}")
        self.spec, self.size, self.rng = spec, size, rng
        self.probes = rng.integers(0, 2, size=(spec.m_probe, size), dtype=np.uint8)

    def propose(self, history):
        i, m = len(history), self.spec.m_probe
        if i < m:
            return Query.tabulated(self.probes[i], id=f"probe-{i}")
        if i > m:
            return None
        if m == 0:
            return Query.tabulated(self.rng.random(self.size), id="final")
        answers = [a for _, a in history]
        return Query.tabulated(_aggregate_above(self.probes, answers, self.spec.quantile), id="final")


class _RoundStructuredAnalyst:
    def __init__(self, spec: RoundStructured, universe: Universe, n: int, rng):
        self.spec, self.size, self.rng = spec, universe.require_tabulatable(), rng

    def propose(self, history):
        i, k = len(history), self.spec.per_round
        if i >= self.spec.query_count:
            return None
        round_, pos = divmod(i, k)
        if round_ > 0 and pos == 0:
            prev = history[i - k:i]
            table = _aggregate_above([q.table for q, _ in prev], [a for _, a in prev], 0.5)
            return Query.tabulated(table, id=f"round{round_}-agg")
        return Query.tabulated(self.rng.random(self.size), id=f"round{round_}-{pos}")


_ANALYSTS = {
    NonAdaptiveRandom: _NonAdaptiveAnalyst,
    SignAggregation: _SignAggregationAnalyst,
    ReconstructionProbe: _ReconstructionAnalyst,
    RoundStructured: _RoundStructuredAnalyst,
}


def make_analyst(strategy: Strategy, universe: Universe, n: int, rng: np.random.Generator):
    """Instantiate ``strategy`` given only public information."""
    return _ANALYSTS[type(strategy)](strategy, universe, n, rng)


@dataclass
class Run:
    transcript: Transcript
    queries: list = field(default_factory=list)

    @property
    def final_query(self) -> Optional[Query]:
        return self.queries[-1] if self.queries else None


def drive(analyst, session: OracleSession, guesser: Optional[Callable[[Query], float]] = None) -> Run:
    """Alternate analyst proposals and session answers until either stops.

    Session errors end the run and leave ``transcript.halted`` set.
    """
    history = []
    run = Run(session.transcript)
    while True:
        q = analyst.propose(history)
        if q is None:
            break
        guess = guesser(q) if guesser is not None else None
        try:
            a = session.answer(q, guess)
        except SessionError as exc:
            if not session.transcript.halted:
                session.transcript.halt(str(exc))
            break
        run.queries.append(q)
        history.append((q, a))
    return run


def score(run: Run, pop: Population, seed=0, mc_trials: int = 1000) -> None:
    """Fill in true expectations: exact for discrete populations, Monte Carlo
    for the final query only on Gaussian populations."""
    entries = run.transcript.entries
    if pop.kind == "gaussian":
        if entries:
            est, _ = monte_carlo_expectation(pop, run.queries[-1], mc_trials, seed)
            entries[-1].true_expectation = est
        return
    for entry, q in zip(entries, run.queries):
        entry.true_expectation = true_expectation(pop, q)


def run_analyst(strategy: Strategy, session: OracleSession, pop: Population, seed=0,
                guesser: Optional[Callable[[Query], float]] = None, mc_trials: int = 1000) -> Transcript:
    """Drive a fresh session with ``strategy`` and score the transcript."""
    if len(session.transcript):
        raise ValidationError("run_analyst needs a fresh session")
    analyst = make_analyst(strategy, session.universe, session.n, make_rng(seed, 0))
    run = drive(analyst, session, guesser)
    score(run, pop, make_rng(seed, 1), mc_trials)
    return run.transcript


@dataclass
class AttackResult:
    """Final-query outcome of an attack.

    ``reported`` and ``true`` are on the [0, 1] query scale; the
    ``*_unrescaled`` fields undo the affine map for Gaussian attacks.
    """

    reported: float
    true: float
    true_se: float = 0.0
    reported_unrescaled: Optional[float] = None
    true_unrescaled: Optional[float] = None
    empirical_untruncated: Optional[float] = None

    @property
    def gap(self) -> float:
        return abs(self.reported - self.true)


def sign_aggregation_attack(session: OracleSession, d: Optional[int] = None, seed=0,
                            mc_trials: int = 1000, bound: Optional[float] = None) -> AttackResult:
    """Run the sign-aggregation analyst and score its final query.

    The true value is an independent Monte Carlo estimate over fresh
    N(0, 1)^d draws.
    """
    d = d if d is not None else session.universe.dim
    if session.universe.kind != REAL_VECTORS:
        raise ValidationError("sign aggregation needs a Gaussian (real-vector) dataset")
    analyst = _SignAggregationAnalyst(SignAggregation(d, bound), session.universe, session.n, make_rng(seed, 0))
    run = drive(analyst, session)
    if run.transcript.halted or len(run.queries) != d + 1:
        raise SessionError("session halted before the final query")
    reported = run.transcript.entries[-1].answer
    est, se = monte_carlo_expectation(Population.gaussian_product(d), run.final_query, mc_trials,
                                      make_rng(seed, 1))
    run.transcript.entries[-1].true_expectation = est
    b = analyst.bound
    return AttackResult(reported, est, se, unrescale(reported, b), unrescale(est, b))


def reconstruction_probe(session: OracleSession, m_probe: int, pop: Population, seed=0,
                         strict: bool = True) -> float:
    """Gap |reported - true| of the probe attack's final query."""
    analyst = make_analyst(ReconstructionProbe(m_probe, strict=strict), session.universe, session.n,
                           make_rng(seed, 0))
    run = drive(analyst, session)
    if len(run.queries) != m_probe + 1:
        raise SessionError("session halted before the final query")
    reported = run.transcript.entries[-1].answer
    truth = true_expectation(pop, run.final_query)
    run.transcript.entries[-1].true_expectation = truth
    return abs(reported - truth)


@dataclass
class TrialOutcome:
    """One (dataset, session, analyst) execution, measured on its final query.

    ``empirical`` is the final query's mean over the whole dataset;
    ``reference_*`` describe a data-independent query drawn for the same
    dataset (the non-adaptive baseline).
    """

    trial: int
    completed: bool
    halted: bool
    reported: float
    empirical: float
    true: float
    true_se: float
    rounds_detected: int
    epsilon_spent: float
    delta_spent: float
    queries_answered: int
    reference_empirical: float = math.nan
    reference_true: float = math.nan
    extra: dict = field(default_factory=dict)
    transcript: Optional[Transcript] = None

    @property
    def gap(self) -> float:
        return abs(self.reported - self.true)

    @property
    def generalization_gap(self) -> float:
        return abs(self.empirical - self.true)


def run_trial(pop: Population, n: int, cfg: OracleConfig, strategy: Strategy, seed: int, trial: int,
              mc_trials: int = 1000, keep_transcript: bool = False) -> TrialOutcome:
    """Execute trial ``trial`` of an experiment with independent streams.

    Streams are ``(seed, trial, k)`` with k = 0 dataset, 1 session,
    2 analyst, 3 Monte Carlo scoring, 4 reference query.
    """
    S = sample_dataset(pop, n, make_rng(seed, trial, 0))
    session = open_session(cfg, S, make_rng(seed, trial, 1))
    analyst = make_analyst(strategy, S.universe, S.n, make_rng(seed, trial, 2))
    run = drive(analyst, session)
    t = run.transcript
    completed = len(run.queries) == strategy.query_count
    reported = empirical = truth = se = math.nan
    extra = {}
    if completed:
        q = run.final_query
        reported = t.entries[-1].answer
        empirical = empirical_mean(S, q)
        if pop.kind == "gaussian":
            truth, se = monte_carlo_expectation(pop, q, mc_trials, make_rng(seed, trial, 3))
        else:
            truth, se = true_expectation(pop, q), 0.0
        t.entries[-1].true_expectation = truth
        if isinstance(strategy, SignAggregation):
            b = analyst.bound
            extra = {"reported_unrescaled": unrescale(reported, b), "true_unrescaled": unrescale(truth, b),
                     "empirical_untruncated": float(np.mean(S.points @ analyst.direction)), "bound": b}
    ref_rng = make_rng(seed, trial, 4)
    if pop.kind == "gaussian":
        v = ref_rng.standard_normal(pop.universe.dim)
        v /= np.linalg.norm(v)
        b = default_truncation(pop.universe.dim, n)
        ref = Query.evaluable(lambda pts: truncate_rescale(pts @ v, b))
        ref_true = 0.5
    else:
        ref = Query.tabulated(ref_rng.random(pop.universe.size))
        ref_true = true_expectation(pop, ref)
    spent = session.spent
    return TrialOutcome(
        trial=trial, completed=completed, halted=t.halted, reported=reported, empirical=empirical,
        true=truth, true_se=se, rounds_detected=t.rounds_detected, epsilon_spent=spent.epsilon,
        delta_spent=spent.delta, queries_answered=len(t), reference_empirical=empirical_mean(S, ref),
        reference_true=ref_true, extra=extra, transcript=t if keep_transcript else None)


def _trial_job(args):
    return run_trial(*args)


def run_trials(pop: Population, n: int, cfg: OracleConfig, strategy: Strategy, seed: int, trials: int,
               mc_trials: int = 1000, workers: Optional[int] = None) -> list:
    """Trials ``0 .. trials-1`` in index order, optionally across processes.

    Every trial derives its streams from ``(seed, trial)``, so the result
    does not depend on ``workers``.
    """
    jobs = [(pop, n, cfg, strategy, seed, t, mc_trials) for t in range(trials)]
    if not workers or workers <= 1 or trials <= 1:
        return [_trial_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs, chunksize=max(1, trials // (4 * workers))))
