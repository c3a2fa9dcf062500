"""Stateful oracles answering adaptively chosen statistical queries.

A session owns its dataset(s) and random stream.  Callers interact with it
only through :meth:`OracleSession.answer`; every answer is appended to the
session transcript.  Sessions are single-owner and strictly sequential.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from sqlab import privacy
from sqlab.core import Dataset, Query, Transcript, TranscriptEntry, empirical_mean, make_rng
from sqlab.errors import (
    ConfigError,
    DatasetTooSmall,
    FiringBudgetExhausted,
    HardUpdateBudgetExhausted,
    QueryBudgetExceeded,
    SessionHalted,
    UniverseNotTabulatable,
    ValidationError,
)

NAIVE = "naive"
LAPLACE = "laplace"
PMW = "pmw"
SPARSE_VECTOR = "sparse_vector"
EFFECTIVE_ROUNDS = "effective_rounds"
MECHANISMS = (NAIVE, LAPLACE, PMW, SPARSE_VECTOR, EFFECTIVE_ROUNDS)


@dataclass(frozen=True)
class OracleConfig:
    """Parameters of one oracle session.

    ``threshold`` is the sparse-vector threshold T.  ``pmw_eta`` and
    ``pmw_threshold`` override the PMW defaults tau/8 and tau/2.
    ``enforce_sample_size`` turns the EffectiveRounds input-size gate off
    for small-scale tests.
    """

    mechanism: str
    tau: float = 0.1
    beta: float = 0.05
    m: int = 1000
    epsilon: float = 0.0
    delta: float = 0.0
    r: int = 1
    threshold: Optional[float] = None
    noiseless: bool = False
    clamp: bool = False
    C: float = privacy.DEFAULT_C
    pmw_eta: Optional[float] = None
    pmw_threshold: Optional[float] = None
    enforce_sample_size: bool = True

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError("mechanism", f"must be one of {', '.join(MECHANISMS)}")
        for name in ("tau", "beta"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(name, "must lie in (0, 1)")
        if self.m < 1:
            raise ConfigError("m", "must be >= 1")
        if self.epsilon < 0:
            raise ConfigError("epsilon", "must be >= 0")
        if not 0.0 <= self.delta < 1.0:
            raise ConfigError("delta", "must lie in [0, 1)")
        if self.r < 1:
            raise ConfigError("r", "must be >= 1")
        needs_eps = self.mechanism in (LAPLACE, PMW, SPARSE_VECTOR)
        if needs_eps and not self.noiseless and self.epsilon <= 0:
            raise ConfigError("epsilon", f"{self.mechanism} needs epsilon > 0 unless noiseless")
        if self.mechanism == SPARSE_VECTOR and self.threshold is None:
            raise ConfigError("threshold", "sparse_vector needs a threshold T")

    @property
    def pure(self) -> bool:
        return self.delta == 0.0

    def replace(self, **changes) -> "OracleConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = ""
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = format(v, ".17g")
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OracleConfig":
        """Parse ``key = value`` lines (``#`` starts a comment)."""
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, values: dict) -> "OracleConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(key, "unknown oracle config key")
            kwargs[key] = _coerce(key, types[key], raw)
        if "mechanism" not in kwargs:
            raise ConfigError("mechanism", "missing")
        return cls(**kwargs)


def parse_key_values(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    if raw == "" and "Optional" in typ:
        return None
    try:
        if "bool" in typ:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "int" in typ:
            return int(raw)
        if "float" in typ:
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ}") from None
    return raw


class OracleSession:
    """Base class; use :func:`open_session` to construct one."""

    mechanism = ""
    _exhausted_error = SessionHalted

    def __init__(self, config: OracleConfig, dataset: Dataset, rng: np.random.Generator):
        self.config = config
        self._dataset = dataset
        self.rng = rng
        self.transcript = Transcript(max_queries=config.m)
        self.ledger = privacy.BudgetLedger()

    @property
    def n(self) -> int:
        return self._dataset.n

    @property
    def universe(self):
        return self._dataset.universe

    @property
    def halted(self) -> bool:
        return self.transcript.halted

    @property
    def spent(self) -> privacy.PrivacyParams:
        return self.ledger.total()

    def _laplace(self, scale: float) -> float:
        if self.config.noiseless or scale == 0.0:
            return 0.0
        return float(self.rng.laplace(0.0, scale))

    def answer(self, q: Query, guess: Optional[float] = None) -> Optional[float]:
        """Answer ``q``; returns None for a sparse-vector Bottom."""
        if self.transcript.halted:
            raise self._exhausted_error(self.transcript.halt_reason or "session halted")
        if len(self.transcript) >= self.config.m:
            raise QueryBudgetExceeded(f"all m = {self.config.m} queries used")
        value, empirical, note = self._answer(q, guess)
        if value is not None and self.config.clamp:
            value = min(1.0, max(0.0, value))
        self.transcript.append(TranscriptEntry(q.id, value, empirical, None, note))
        return value

    def _answer(self, q, guess):
        raise NotImplementedError

    def metadata(self) -> dict:
        return {"mechanism": self.mechanism, "n": self.n, "log_base": privacy.LOG_BASE_NOTE}


class NaiveSession(OracleSession):
    mechanism = NAIVE

    def _answer(self, q, guess):
        a = empirical_mean(self._dataset, q)
        return a, a, ""


def _per_query_epsilon(cfg: OracleConfig) -> float:
    """Per-query share of epsilon over m queries.

    Pure: eps/m under basic composition.  Approximate: solve the advanced
    composition bound, eps_i = eps / (2 sqrt(2 m ln(1/delta))).
    """
    if cfg.pure:
        return cfg.epsilon / cfg.m
    return cfg.epsilon / (2.0 * math.sqrt(2.0 * cfg.m * math.log(1.0 / cfg.delta)))


def _ledger_for(cfg: OracleConfig) -> privacy.BudgetLedger:
    if cfg.pure:
        return privacy.BudgetLedger(privacy.BASIC)
    return privacy.BudgetLedger(privacy.ADVANCED, delta_prime=cfg.delta)


class LaplaceSession(OracleSession):
    """Empirical mean plus Laplace noise of a scale fixed at open."""

    mechanism = LAPLACE

    def __init__(self, config, dataset, rng):
        super().__init__(config, dataset, rng)
        self.ledger = _ledger_for(config)
        if config.epsilon > 0:
            self.query_epsilon = _per_query_epsilon(config)
            self.sigma = 1.0 / (dataset.n * self.query_epsilon)
        else:
            self.query_epsilon = 0.0
            self.sigma = 0.0

    def _answer(self, q, guess):
        a = empirical_mean(self._dataset, q)
        self.ledger.charge(privacy.PrivacyParams(self.query_epsilon))
        return a + self._laplace(self.sigma), a, ""

    def metadata(self):
        return {**super().metadata(), "sigma": self.sigma, "query_epsilon": self.query_epsilon,
                "accounting": self.ledger.policy}


class PMWSession(OracleSession):
    """Private multiplicative weights over a tabulated universe.

    Each round releases a noisy error of the synthetic distribution; large
    errors trigger a multiplicative update and a noisy empirical answer,
    small errors are answered from the synthetic distribution.  Every
    round is charged to the ledger, lazy or not.
    """

    mechanism = PMW

    def __init__(self, config, dataset, rng):
        super().__init__(config, dataset, rng)
        if not dataset.universe.tabulatable:
            raise UniverseNotTabulatable("PMW needs a tabulatable universe (|X| <= 2^20)")
        size = dataset.universe.size
        self.log_weights = np.zeros(size)
        self.weights = np.full(size, 1.0 / size)
        self.eta = config.pmw_eta if config.pmw_eta is not None else config.tau / 8.0
        self.update_threshold = config.pmw_threshold if config.pmw_threshold is not None else config.tau / 2.0
        self.update_cap = math.ceil(16.0 * dataset.universe.log_size / config.tau**2)
        self.hard_updates = 0
        self.ledger = _ledger_for(config)
        if config.epsilon > 0:
            self.round_epsilon = _per_query_epsilon(config)
            # Two Laplace releases per round, each with half the round's share.
            self.sigma = 2.0 / (dataset.n * self.round_epsilon)
        else:
            self.round_epsilon = 0.0
            self.sigma = 0.0

    def synthetic_mean(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))

    def _answer(self, q, guess):
        values = q.values_on(self.universe)
        a_s = empirical_mean(self._dataset, q)
        a_w = self.synthetic_mean(values)
        self.ledger.charge(privacy.PrivacyParams(self.round_epsilon))
        d_hat = a_s - a_w + self._laplace(self.sigma)
        if abs(d_hat) <= self.update_threshold:
            return a_w, a_s, "lazy"
        if self.hard_updates >= self.update_cap:
            self.transcript.halt("hard-update budget exhausted")
            raise HardUpdateBudgetExhausted(f"more than {self.update_cap} hard updates")
        self.log_weights += self.eta * math.copysign(1.0, d_hat) * values
        shifted = np.exp(self.log_weights - self.log_weights.max())
        self.weights = shifted / shifted.sum()
        self.hard_updates += 1
        return a_s + self._laplace(self.sigma), a_s, f"hard update {self.hard_updates}"

    def metadata(self):
        log_x = self.universe.log_size
        return {**super().metadata(), "eta": self.eta, "update_threshold": self.update_threshold,
                "update_cap": self.update_cap, "sigma": self.sigma, "round_epsilon": self.round_epsilon,
                "accounting": self.ledger.policy,
                "coupled_success_bound": 1.0 - self.n * log_x * self.config.beta}


class SparseVectorSession(OracleSession):
    """Numeric sparse vector with a budget of ``r`` above-threshold answers.

    Epsilon is split 8/9 for the threshold test and 1/9 for the released
    values.  The threshold noise is redrawn after every firing and the
    session halts once all ``r`` firings are spent.
    """

    mechanism = SPARSE_VECTOR
    _exhausted_error = FiringBudgetExhausted

    def __init__(self, config, dataset, rng):
        super().__init__(config, dataset, rng)
        self.threshold = config.threshold
        self.remaining = config.r
        eps = config.epsilon
        n, r = dataset.n, config.r
        if eps > 0:
            eps_test, eps_answer = 8.0 * eps / 9.0, eps / 9.0
            self.threshold_scale = 2.0 * r / (eps_test * n)
            self.test_scale = 4.0 * r / (eps_test * n)
            self.answer_scale = r / (eps_answer * n)
        else:
            self.threshold_scale = self.test_scale = self.answer_scale = 0.0
        self.noisy_threshold = self.threshold + self._laplace(self.threshold_scale)

    def _answer(self, q, guess):
        if guess is None:
            raise ValidationError("sparse vector queries need a guess")
        a = empirical_mean(self._dataset, q)
        if abs(a - guess) + self._laplace(self.test_scale) <= self.noisy_threshold:
            return None, a, "bottom"
        value = a + self._laplace(self.answer_scale)
        self.remaining -= 1
        self.transcript.rounds_detected += 1
        self.ledger.charge(privacy.PrivacyParams(self.config.epsilon / self.config.r))
        self.noisy_threshold = self.threshold + self._laplace(self.threshold_scale)
        return value, a, f"fired ({self.remaining} left)"

    def answer(self, q, guess=None):
        value = super().answer(q, guess)
        if self.remaining == 0:
            self.transcript.halt("firing budget exhausted")
        return value

    def metadata(self):
        return {**super().metadata(), "threshold": self.threshold, "r": self.config.r,
                "threshold_noise_scale": self.threshold_scale, "test_noise_scale": self.test_scale,
                "answer_noise_scale": self.answer_scale}


def effective_rounds_sizes(tau: float, beta: float, r: int) -> tuple[int, int, int]:
    """(input gate, estimation-set size, minimum holdout size), all ceilinged."""
    lg = math.log(12.0 / beta)
    gate = privacy.required_sample_size("rounds_gate", tau, beta, r=r)
    est = privacy._ceil(4.0 * lg / tau**2)
    hold = privacy._ceil(1152.0 * r * lg / tau**2)
    return gate, est, hold


class EffectiveRoundsSession(OracleSession):
    """Estimation sets S_1..S_r checked by a sparse vector on a holdout S_h.

    The current estimation set answers each query and doubles as the guess
    for the holdout's sparse vector.  A firing replaces the answer with the
    holdout value and retires the estimation set; the session halts once
    more than ``r`` sets would be needed.
    """

    mechanism = EFFECTIVE_ROUNDS

    def __init__(self, config, dataset, rng):
        super().__init__(config, dataset, rng)
        tau, beta, r = config.tau, config.beta, config.r
        gate, est, hold = effective_rounds_sizes(tau, beta, r)
        if config.enforce_sample_size and dataset.n < gate:
            raise DatasetTooSmall(f"|S| = {dataset.n} < 1156 r ln(12/beta)/tau^2 = {gate}")
        if dataset.n <= r * est:
            raise DatasetTooSmall(f"|S| = {dataset.n} leaves no holdout after {r} sets of {est}")
        perm = rng.permutation(dataset.n)
        self.estimation_sets = [dataset.subset(perm[i * est:(i + 1) * est]) for i in range(r)]
        holdout = dataset.subset(perm[r * est:])
        self.holdout_min_size = hold
        inner_cfg = OracleConfig(SPARSE_VECTOR, tau=tau / 8.0, beta=beta / 3.0, m=config.m,
                                 epsilon=tau / 16.0, r=r, threshold=tau / 4.0,
                                 noiseless=config.noiseless)
        self._sparse = SparseVectorSession(inner_cfg, holdout, make_rng(int(rng.integers(2**63)), 1))
        self.ledger = self._sparse.ledger
        self.c = 1

    @property
    def split_sizes(self) -> tuple:
        return tuple(s.n for s in self.estimation_sets) + (self._sparse.n,)

    def _answer(self, q, guess):
        a_t = empirical_mean(self.estimation_sets[self.c - 1], q)
        a_h = self._sparse.answer(q, a_t)
        if a_h is None:
            return a_t, a_t, f"c={self.c}"
        holdout_value = self._sparse.transcript.entries[-1].empirical
        self.c += 1
        self.transcript.rounds_detected += 1
        return a_h, holdout_value, f"round change, c={self.c}"

    def answer(self, q, guess=None):
        value = super().answer(q, guess)
        if self.c > self.config.r:
            self.transcript.halt("c > r")
        return value

    def metadata(self):
        return {**super().metadata(), "split_sizes": list(self.split_sizes),
                "holdout_min_size": self.holdout_min_size, "sparse": self._sparse.metadata()}


_SESSIONS = {
    NAIVE: NaiveSession,
    LAPLACE: LaplaceSession,
    PMW: PMWSession,
    SPARSE_VECTOR: SparseVectorSession,
    EFFECTIVE_ROUNDS: EffectiveRoundsSession,
}


def open_session(cfg: OracleConfig, S: Dataset, seed) -> OracleSession:
    """Open a fresh session of ``cfg.mechanism`` over ``S``.

    ``seed`` is an integer or a ``numpy.random.Generator`` owned by the
    session from here on.
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return _SESSIONS[cfg.mechanism](cfg, S, rng)
