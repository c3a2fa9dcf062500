"""Privacy parameter algebra and sample-size calculators.

Every logarithm here is natural.  Formula constants that the underlying
results leave as "a sufficiently large constant" are multiplied by ``C``
(default 32); formulas with explicit constants ignore ``C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from sqlab.errors import MissingParameter, SampleTooSmall, ValidationError

LOG_BASE_NOTE = "natural logarithm (ln) for every formula"
DEFAULT_C = 32.0


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValidationError("epsilon must be >= 0")
        if not 0.0 <= self.delta < 1.0:
            raise ValidationError("delta must lie in [0, 1)")

    def __iter__(self):
        yield self.epsilon
        yield self.delta


def group_privacy(p: PrivacyParams, k: int) -> PrivacyParams:
    """Guarantee for datasets differing in at most ``k`` elements."""
    if k < 1:
        raise ValidationError("group size k must be >= 1")
    return PrivacyParams(k * p.epsilon, math.exp(p.epsilon * (k - 1)) * p.delta)


def compose_basic(charges: Iterable[PrivacyParams]) -> PrivacyParams:
    charges = list(charges)
    return PrivacyParams(math.fsum(c.epsilon for c in charges), math.fsum(c.delta for c in charges))


def compose_advanced(eps: float, delta: float, k: int, delta_prime: float) -> PrivacyParams:
    """k-fold adaptive composition of (eps, delta) mechanisms.

    Returns (sqrt(2k ln(1/delta')) eps + k eps (e^eps - 1), k delta + delta').
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if not 0.0 < delta_prime < 1.0:
        raise ValidationError("delta_prime must lie in (0, 1)")
    eps_total = math.sqrt(2.0 * k * math.log(1.0 / delta_prime)) * eps + k * eps * math.expm1(eps)
    return PrivacyParams(eps_total, k * delta + delta_prime)


def _check_unit(name, value):
    if not 0.0 < value < 1.0:
        raise ValidationError(f"{name} must lie in (0, 1)")


def pure_transfer_requirement(tau: float, beta: float) -> float:
    """Minimum n for which epsilon = tau/2 transfers accuracy: 12 ln(4/beta)/tau^2."""
    return 12.0 * math.log(4.0 / beta) / tau**2


def approx_transfer_requirement(tau: float, beta: float) -> float:
    return 48.0 * math.log(4.0 / beta) / tau**2


def approx_transfer_delta(tau: float, beta: float) -> float:
    return math.exp(-4.0 * math.log(8.0 / beta) / tau)


def calibrate_epsilon_pure(tau: float, beta: float, n: int) -> float:
    _check_unit("tau", tau)
    _check_unit("beta", beta)
    need = pure_transfer_requirement(tau, beta)
    if n < need:
        raise SampleTooSmall(f"n = {n} < 12 ln(4/beta)/tau^2 = {need:.6g} (short by {need - n:.6g})")
    return tau / 2.0


def calibrate_eps_delta(tau: float, beta: float, n: int) -> tuple[float, float]:
    _check_unit("tau", tau)
    _check_unit("beta", beta)
    need = approx_transfer_requirement(tau, beta)
    if n < need:
        raise SampleTooSmall(f"n = {n} < 48 ln(4/beta)/tau^2 = {need:.6g} (short by {need - n:.6g})")
    return tau / 4.0, approx_transfer_delta(tau, beta)


def calibrate_epsilon_events(beta: float, n: int) -> float:
    """Largest epsilon for which a beta-unlikely bad event stays 3 sqrt(beta)-unlikely."""
    if not 0.0 < beta <= 1.0:
        raise ValidationError("beta must lie in (0, 1]")
    return math.sqrt(math.log(1.0 / beta) / (2.0 * n))


def _ceil(x: float) -> int:
    # Absorb last-ulp noise so that exact integers are not bumped up.
    return math.ceil(x * (1.0 - 1e-12))


def _need(name, value):
    if value is None:
        raise MissingParameter(f"formula requires {name}")
    if value <= 0:
        raise ValidationError(f"{name} must be positive")
    return value


# (key, description, uses C)
FORMULAS = {
    "laplace": ("Laplace, pure DP: m ln(1/beta)/(eps tau)", True),
    "laplace_delta": ("Laplace, (eps,delta): sqrt(m ln(1/delta)) ln(1/beta)/(eps tau)", True),
    "laplace_sq": ("Laplace statistical queries: m ln(1/beta)/tau^2", True),
    "laplace_sq_delta": ("Laplace statistical queries, (eps,delta): sqrt(m) ln(1/beta)^1.5/tau^2.5", True),
    "pmw": ("PMW, pure DP: ln|X| ln(1/beta)/(eps tau^3)", True),
    "pmw_delta": ("PMW, (eps,delta): sqrt(ln|X| ln(1/delta)) ln(1/beta)/(eps tau^2)", True),
    "pmw_sq": ("PMW statistical queries: ln|X| ln(1/beta)/tau^4", True),
    "pmw_sq_delta": ("PMW statistical queries, (eps,delta): sqrt(ln|X|) ln(1/beta)^1.5/tau^3.5", True),
    "sparse": ("Sparse vector, pure DP: 9 r ln(4/beta)/(tau eps)", False),
    "sparse_delta": ("Sparse vector, (eps,delta): (sqrt(512)+1) sqrt(r ln(2/delta)) ln(4/beta)/(tau eps)", False),
    "rounds": ("r rounds of adaptivity: r ln(1/beta)/tau^2", True),
    "rounds_gate": ("EffectiveRounds input gate: 1156 r ln(12/beta)/tau^2", False),
}


def sample_size_formula(mechanism: str, tau: float, beta: float, m: Optional[int] = None,
                        log_universe: Optional[float] = None, r: Optional[int] = None,
                        epsilon: Optional[float] = None, delta: Optional[float] = None) -> float:
    """Unscaled value of the named sample-size formula (before C and ceiling)."""
    _check_unit("tau", tau)
    _check_unit("beta", beta)
    lb = math.log(1.0 / beta)
    if mechanism == "laplace":
        return _need("m", m) * lb / (_need("epsilon", epsilon) * tau)
    if mechanism == "laplace_delta":
        return math.sqrt(_need("m", m) * math.log(1.0 / _need("delta", delta))) * lb / (_need("epsilon", epsilon) * tau)
    if mechanism == "laplace_sq":
        return _need("m", m) * lb / tau**2
    if mechanism == "laplace_sq_delta":
        return math.sqrt(_need("m", m)) * lb**1.5 / tau**2.5
    if mechanism == "pmw":
        return _need("log_universe", log_universe) * lb / (_need("epsilon", epsilon) * tau**3)
    if mechanism == "pmw_delta":
        return (math.sqrt(_need("log_universe", log_universe) * math.log(1.0 / _need("delta", delta))) * lb
                / (_need("epsilon", epsilon) * tau**2))
    if mechanism == "pmw_sq":
        return _need("log_universe", log_universe) * lb / tau**4
    if mechanism == "pmw_sq_delta":
        return math.sqrt(_need("log_universe", log_universe)) * lb**1.5 / tau**3.5
    if mechanism == "sparse":
        return 9.0 * _need("r", r) * math.log(4.0 / beta) / (tau * _need("epsilon", epsilon))
    if mechanism == "sparse_delta":
        return ((math.sqrt(512.0) + 1.0) * math.sqrt(_need("r", r) * math.log(2.0 / _need("delta", delta)))
                * math.log(4.0 / beta) / (tau * _need("epsilon", epsilon)))
    if mechanism == "rounds":
        return _need("r", r) * lb / tau**2
    if mechanism == "rounds_gate":
        return 1156.0 * _need("r", r) * math.log(12.0 / beta) / tau**2
    raise ValidationError(f"unknown sample-size formula {mechanism!r}; choose from {sorted(FORMULAS)}")


def required_sample_size(mechanism: str, tau: float, beta: float, m: Optional[int] = None,
                         log_universe: Optional[float] = None, r: Optional[int] = None,
                         C: float = DEFAULT_C, epsilon: Optional[float] = None,
                         delta: Optional[float] = None) -> int:
    """ceil(C * formula), with C forced to 1 for explicit-constant formulas."""
    value = sample_size_formula(mechanism, tau, beta, m=m, log_universe=log_universe, r=r,
                                epsilon=epsilon, delta=delta)
    scale = C if FORMULAS[mechanism][1] else 1.0
    return _ceil(scale * value)


BASIC = "basic"
ADVANCED = "advanced"


@dataclass
class BudgetLedger:
    """Running record of privacy charges for one session.

    ``policy`` is fixed at construction: ``"basic"`` sums the charges,
    ``"advanced"`` applies the k-fold composition bound with slack
    ``delta_prime`` and requires every charge to be identical.
    """

    policy: str = BASIC
    delta_prime: Optional[float] = None
    charges: list = field(default_factory=list)

    def __post_init__(self):
        if self.policy not in (BASIC, ADVANCED):
            raise ValidationError(f"unknown ledger policy {self.policy!r}")
        if self.policy == ADVANCED:
            _check_unit("delta_prime", self.delta_prime or 0.0)

    def charge(self, p: PrivacyParams) -> None:
        if self.policy == ADVANCED and self.charges and self.charges[0] != p:
            raise ValidationError("advanced composition needs a homogeneous sequence of charges")
        self.charges.append(p)

    def total(self) -> PrivacyParams:
        if not self.charges:
            return PrivacyParams(0.0, 0.0)
        if self.policy == BASIC:
            return compose_basic(self.charges)
        first = self.charges[0]
        return compose_advanced(first.epsilon, first.delta, len(self.charges), self.delta_prime)
