import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqlab.analysts import NonAdaptiveRandom, ReconstructionProbe, SignAggregation
from sqlab.core import Population
from sqlab.errors import ConditionViolated, MomentOverflow, ValidationError
from sqlab.mechanisms import LAPLACE, NAIVE, OracleConfig
from sqlab.privacy import pure_transfer_requirement
from sqlab.verify import (
    CHECK_COLUMNS,
    MomentSpec,
    bad_event_monitor,
    binomial_moment,
    binomial_tail_ge,
    bound_oracle_rows,
    check_bernoulli_domination,
    check_csv_text,
    check_moment_upper_bound,
    chernoff_mult_bound,
    effective_rounds_check,
    expectation_gap_check,
    hoeffding_bound,
    loglog_floor,
    markov_moment_tail,
    mcdiarmid_bound,
    moment_grid,
    slack_limit,
    sparse_vector_contract_check,
    transfer_check,
    within_slack,
)


def exact_moment(n, p, k):
    """Rational-arithmetic moment of Bin(n, p)/n."""
    p = Fraction(p)
    return sum(math.comb(n, j) * p**j * (1 - p) ** (n - j) * Fraction(j, n) ** k for j in range(n + 1))


def exact_tail(n, p, j_min):
    p = Fraction(p)
    return sum(math.comb(n, j) * p**j * (1 - p) ** (n - j) for j in range(j_min, n + 1))


class TestBinomialMoment:
    def test_closed_form_second_moment(self):
        assert binomial_moment(10, 0.5, 2) == pytest.approx(0.275, rel=1e-12)

    @given(st.integers(1, 300), st.floats(0, 1))
    def test_first_moment_is_p(self, n, p):
        assert binomial_moment(n, p, 1) == pytest.approx(p, rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_point_mass(self, k):
        assert binomial_moment(5, 1.0, k) == 1.0

    @settings(max_examples=60)
    @given(st.integers(1, 80), st.sampled_from([0.01, 0.1, 0.37, 0.5, 0.9]), st.integers(1, 12))
    def test_matches_rational_oracle(self, n, p, k):
        if k > n:
            return
        assert binomial_moment(n, p, k) == pytest.approx(float(exact_moment(n, p, k)), rel=1e-12)

    def test_large_n_against_mpmath(self):
        mpmath.mp.dps = 30
        n, p, k = 10_000, 0.3, 32
        want = mpmath.fsum(mpmath.binomial(n, j) * mpmath.mpf(p) ** j * mpmath.mpf(1 - p) ** (n - j)
                           * (mpmath.mpf(j) / n) ** k for j in range(n + 1))
        assert binomial_moment(n, p, k) == pytest.approx(float(want), rel=1e-12)

    def test_monotone_in_p(self):
        ps = np.linspace(0, 1, 41)
        for n, k in ((10, 2), (50, 5), (200, 10)):
            vals = [binomial_moment(n, p, k) for p in ps]
            assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_spec_object_and_guards(self):
        assert binomial_moment(MomentSpec(10, 0.5, 2)) == binomial_moment(10, 0.5, 2)
        with pytest.raises(ValidationError):
            MomentSpec(3, 0.5, 4)
        with pytest.raises(ValidationError):
            MomentSpec(3, 1.5, 1)
        with pytest.raises(MomentOverflow):
            binomial_moment(10**6 + 1, 0.5, 2)


class TestDomination:
    def test_bernoulli_equality(self):
        rep = check_bernoulli_domination(20, 0.3, 3, trials=200_000, seed=1, law="bernoulli")
        assert abs(rep.estimate - rep.moment) <= 3 * rep.se + 1e-4
        assert rep.holds

    def test_constant_law(self):
        rep = check_bernoulli_domination(20, 0.3, 3, trials=1000, law="constant")
        assert rep.estimate == pytest.approx(0.3**3)
        assert rep.estimate <= rep.moment

    def test_uniform_law(self):
        rep = check_bernoulli_domination(20, 0.5, 4, trials=1_000_000, seed=2)
        assert rep.holds

    def test_rejects_out_of_range_law(self):
        with pytest.raises(ValidationError):
            check_bernoulli_domination(5, 0.5, 2, trials=10, law=lambda rng, size: np.full(size, 2.0))


class TestMomentUpperBound:
    def test_example(self):
        lhs, rhs, ok = check_moment_upper_bound(100, 0.1, 2)
        assert lhs == pytest.approx(0.0109, rel=1e-12)
        assert rhs == pytest.approx(0.01 + (2 * math.log(100) + 1) * 0.02**2, rel=1e-12)
        assert rhs == pytest.approx(0.0140841, abs=1e-7)
        assert ok

    @pytest.mark.parametrize("n", [1, 2, 5, 10])
    def test_n_equals_k(self, n):
        lhs, rhs, ok = check_moment_upper_bound(n, 0.5, n)
        assert rhs >= 1 >= lhs and ok

    def test_grid_rows_use_exact_values(self):
        rows = moment_grid(ns=(30,), ks=(3,), ps=(0.5,))
        assert rows[0].lhs == pytest.approx(float(exact_moment(30, 0.5, 3)), rel=1e-12)
        # This cell is a counterexample to the closed-form bound.
        assert not rows[0].holds

    def test_csv_columns(self):
        text = check_csv_text(moment_grid(ns=(10,), ks=(1,), ps=(0.5,)))
        assert text.splitlines()[0] == ",".join(CHECK_COLUMNS)
        fields = text.splitlines()[1].split(",")
        assert fields[:2] == ["moment_upper_bound", "n=10;k=1;p=0.5"]
        assert float(fields[2]) == pytest.approx(0.5, rel=1e-12)
        assert fields[4:] == ["true", "0", "0"]


class TestMarkovTail:
    def test_plain_markov(self):
        mt = markov_moment_tail(1000, 0.1, 20, 0.0, 0.0, 0.1, strict=False)
        assert mt.bound == pytest.approx(binomial_moment(1000, 0.1, 20) / 0.2**20, rel=1e-12)

    def test_dominates_exact_tail(self):
        mt = markov_moment_tail(1000, 0.1, 20, 0.05, 0.0, 0.1, strict=False)
        tail = float(exact_tail(1000, Fraction(1, 10), 200))
        assert mt.bound >= tail * math.exp(0.05 * 20)
        assert binomial_tail_ge(1000, 0.1, 0.2) == pytest.approx(tail, rel=1e-9)

    def test_delta_term(self):
        a = markov_moment_tail(1000, 0.1, 20, 0.05, 0.0, 0.1, strict=False)
        b = markov_moment_tail(1000, 0.1, 20, 0.05, 1e-9, 0.1, strict=False)
        assert b.bound - a.bound == pytest.approx(1e-9 / 0.2**20, rel=1e-9)
        assert b.beta_form == pytest.approx(b.beta + 1e-9 / 0.2**20, rel=1e-12)

    def test_monotone_in_tau(self):
        taus = np.linspace(0.01, 0.33, 30)
        vals = [markov_moment_tail(500, 0.2, 12, 0.0, 0.0, t, strict=False).bound for t in taus]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_conditions_named(self):
        with pytest.raises(ConditionViolated, match="eps <= tau/2"):
            markov_moment_tail(1000, 0.1, 20, 0.2, 0.0, 0.1)
        with pytest.raises(ConditionViolated, match="n >= 3k/tau"):
            markov_moment_tail(100, 0.1, 20, 0.0, 0.0, 0.1)
        mt = markov_moment_tail(1000, 0.1, 20, 0.05, 0.0, 0.1, strict=False)
        assert mt.conditions_hold

    def test_loglog_reading(self):
        assert loglog_floor(1000) == math.ceil(2 * math.log2(math.log(1000)))
        assert loglog_floor(2) == 0


class TestClosedFormBounds:
    def test_hoeffding(self):
        assert hoeffding_bound(1000, 0.05) == pytest.approx(2 * math.exp(-5), rel=1e-12)
        assert hoeffding_bound(1000, 0.05) == pytest.approx(0.013475, abs=1e-6)
        assert hoeffding_bound(10, 0.0) == 2.0
        vals = [hoeffding_bound(n, 0.1) for n in (10, 100, 1000, 10000)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_chernoff(self):
        assert chernoff_mult_bound(100, 0.5, 0.2) == pytest.approx(0.3909, abs=1e-4)
        assert chernoff_mult_bound(100, 0.5, 1e-9) == pytest.approx(1.0, abs=1e-12)
        assert chernoff_mult_bound(100, 0.5, 0.2) >= float(exact_tail(100, Fraction(1, 2), 60))

    def test_mcdiarmid(self):
        assert mcdiarmid_bound(100, 0.1, 0.5) == pytest.approx(math.exp(-0.5), rel=1e-12)
        assert mcdiarmid_bound(100, 0.1, 0.0) == 1.0

    @given(st.integers(1, 1000), st.floats(0.01, 1), st.floats(0, 5))
    def test_mcdiarmid_scaling(self, n, c, a):
        assert mcdiarmid_bound(n, c, a) == pytest.approx(mcdiarmid_bound(n, 2 * c, 2 * a), rel=1e-12)

    def test_oracle_rows_hold(self):
        rows = bound_oracle_rows()
        assert rows and all(r.holds for r in rows)


class TestSlack:
    def test_zero_always_passes(self):
        assert within_slack(0, 10, 0.0)

    def test_limit_boundary(self):
        lim = slack_limit(500, 0.05)
        assert lim == 38
        assert within_slack(lim, 500, 0.05)
        assert not within_slack(lim + 1, 500, 0.05)

    def test_limit_matches_scipy_tail(self):
        from scipy import stats
        lim = slack_limit(500, 0.05)
        assert stats.binom.sf(lim - 1, 500, 0.05) >= 0.005 > stats.binom.sf(lim, 500, 0.05)

    def test_rate_zero_rejects_any_violation(self):
        assert not within_slack(1, 100, 0.0)


class TestTransfer:
    def test_naive_non_adaptive_within_hoeffding(self):
        pop = Population.uniform(256)
        rep = transfer_check(OracleConfig(NAIVE, tau=0.1, m=5), NonAdaptiveRandom(5), pop, 100, trials=300, seed=3)
        assert rep.bound_name == "hoeffding"
        assert rep.bound == pytest.approx(hoeffding_bound(100, 0.1))
        assert rep.passes

    def test_laplace_probe_within_beta(self):
        tau, beta = 0.2, 0.05
        n = math.ceil(pure_transfer_requirement(tau, beta))
        cfg = OracleConfig(LAPLACE, tau=tau, beta=beta, m=501, epsilon=tau / 2)
        rep = transfer_check(cfg, ReconstructionProbe(500), Population.uniform(4096), n, trials=100, seed=4)
        assert rep.bound_name == "beta" and rep.passes
        assert rep.incomplete == 0

    def test_naive_probe_fails(self):
        cfg = OracleConfig(NAIVE, tau=0.2, beta=0.05, m=4001)
        rep = transfer_check(cfg, ReconstructionProbe(4000), Population.uniform(1024), 100, trials=20, seed=5)
        assert rep.rate >= 0.5 and not rep.passes

    def test_delta_note(self):
        cfg = OracleConfig(LAPLACE, tau=0.2, beta=0.05, m=3, epsilon=0.05, delta=1e-6)
        rep = transfer_check(cfg, NonAdaptiveRandom(3), Population.uniform(16), 50, trials=2)
        assert "delta_note" in rep.metadata


class TestExpectationGap:
    def test_data_independent_final_query(self):
        rep = expectation_gap_check(OracleConfig(NAIVE, m=20), NonAdaptiveRandom(20), Population.uniform(1024), 100,
                                    trials=200, seed=1)
        assert rep.bound == 0.0 and not rep.exceeds

    def test_laplace_sign_aggregation(self):
        d = 20
        cfg = OracleConfig(LAPLACE, m=d + 1, epsilon=0.1)
        rep = expectation_gap_check(cfg, SignAggregation(d), Population.gaussian_product(d), 200, trials=200,
                                    seed=2, mc_trials=200)
        assert rep.bound == pytest.approx(math.expm1(0.1))
        assert not rep.exceeds

    def test_naive_probe_negative_control(self):
        rep = expectation_gap_check(OracleConfig(NAIVE, m=1001), ReconstructionProbe(1000), Population.uniform(1024),
                                    100, trials=20, seed=3)
        assert rep.exceeds and rep.gap > 0.1


class TestBadEvents:
    def test_corollary_numeric(self):
        beta = hoeffding_bound(500, 0.1)
        assert 3 * math.sqrt(beta) == pytest.approx(3 * math.sqrt(2) * math.exp(-5), rel=1e-12)
        assert 3 * math.sqrt(beta) == pytest.approx(0.02859, abs=1e-5)

    def test_data_independent(self):
        rep = bad_event_monitor(OracleConfig(NAIVE, m=5), NonAdaptiveRandom(5), Population.uniform(256), 500, 0.1,
                                trials=200, bound=hoeffding_bound(500, 0.1))
        assert rep.passes

    def test_laplace_probe(self):
        cfg = OracleConfig(LAPLACE, m=201, epsilon=0.09)
        rep = bad_event_monitor(cfg, ReconstructionProbe(200), Population.uniform(1024), 500, 0.1, trials=200, seed=1)
        assert rep.bound == pytest.approx(0.02859, abs=1e-5)
        assert rep.passes

    def test_epsilon_too_large(self):
        with pytest.raises(ValidationError, match="exceeds"):
            bad_event_monitor(OracleConfig(LAPLACE, m=3, epsilon=0.5), NonAdaptiveRandom(3),
                              Population.uniform(16), 500, 0.1, trials=1)


class TestContracts:
    def test_sparse_vector_small(self):
        rep = sparse_vector_contract_check(2367, trials=50, seed=1)
        assert rep.passes
        assert rep.details["firings"] >= 3 * 50 * 0.9

    def test_sparse_rejects_too_many_bad(self):
        with pytest.raises(ValidationError):
            sparse_vector_contract_check(100, r=1, bad_positions=(1, 2), trials=1)

    def test_effective_rounds_small(self):
        rep = effective_rounds_check(trials=5, seed=1)
        assert rep.completed == 5
        assert rep.validity_rate >= 0.7
        assert max(rep.rounds_detected) <= 3
