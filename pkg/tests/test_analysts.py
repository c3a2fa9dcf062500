import inspect
import math

import numpy as np
import pytest

from sqlab.analysts import (
    NonAdaptiveRandom,
    ReconstructionProbe,
    RoundStructured,
    SignAggregation,
    drive,
    make_analyst,
    reconstruction_probe,
    run_analyst,
    run_trial,
    run_trials,
    sign_aggregation_attack,
)
from sqlab.core import Dataset, Population, Universe, make_rng, sample_dataset
from sqlab.errors import UniverseTooSmall, ValidationError
from sqlab.mechanisms import EFFECTIVE_ROUNDS, LAPLACE, NAIVE, PMW, OracleConfig, open_session
from sqlab.privacy import required_sample_size


def naive_session(S, m=10_000):
    return open_session(OracleConfig(NAIVE, m=m), S, 0)


class TestInterface:
    def test_analysts_never_receive_a_dataset(self):
        for cls in (NonAdaptiveRandom, SignAggregation, ReconstructionProbe, RoundStructured):
            assert "dataset" not in inspect.signature(cls).parameters
        params = inspect.signature(make_analyst).parameters
        assert list(params) == ["strategy", "universe", "n", "rng"]
        S = sample_dataset(Population.uniform(64), 20, 0)
        for strat in (NonAdaptiveRandom(3), ReconstructionProbe(4), RoundStructured(2, 3)):
            a = make_analyst(strat, S.universe, S.n, make_rng(0))
            assert not any(isinstance(v, Dataset) for v in vars(a).values())
            assert list(inspect.signature(a.propose).parameters) == ["history"]

    def test_query_counts(self):
        assert SignAggregation(7).query_count == 8
        assert ReconstructionProbe(10).query_count == 11
        assert RoundStructured(3, 10).query_count == 40
        assert RoundStructured(3, 10).cut_indices == [11, 21, 31]


class TestRunAnalyst:
    def test_non_adaptive_against_naive(self):
        pop = Population.uniform(32)
        S = sample_dataset(pop, 40, 1)
        t = run_analyst(NonAdaptiveRandom(5), naive_session(S), pop)
        assert len(t) == 5
        for e in t:
            assert e.answer == e.empirical
            assert e.true_expectation is not None

    def test_sign_aggregation_query_count(self):
        pop = Population.gaussian_product(6)
        S = sample_dataset(pop, 30, 2)
        t = run_analyst(SignAggregation(6), naive_session(S), pop)
        assert len(t) == 7
        assert t.entries[-1].true_expectation is not None
        assert all(e.true_expectation is None for e in t.entries[:-1])

    def test_session_errors_mark_halt(self):
        pop = Population.uniform(8)
        S = sample_dataset(pop, 10, 0)
        t = run_analyst(NonAdaptiveRandom(10), naive_session(S, m=4), pop)
        assert len(t) == 4 and t.halted

    def test_requires_fresh_session(self):
        pop = Population.uniform(8)
        s = naive_session(sample_dataset(pop, 10, 0))
        run_analyst(NonAdaptiveRandom(1), s, pop)
        with pytest.raises(ValidationError):
            run_analyst(NonAdaptiveRandom(1), s, pop)

    def test_round_structured_against_effective_rounds(self):
        pop = Population.uniform(256)
        cfg = OracleConfig(EFFECTIVE_ROUNDS, tau=0.25, beta=0.1, r=3, m=40, noiseless=True,
                           enforce_sample_size=False)
        for seed in range(5):
            S = sample_dataset(pop, 5000, seed)
            t = run_analyst(RoundStructured(3, 10), open_session(cfg, S, seed), pop, seed)
            assert t.rounds_detected <= 3


class TestRoundStructured:
    def test_batch_zero_depends_only_on_seed(self):
        u = Universe.indexed(64)
        strat = RoundStructured(0, 6)
        tables = []
        for data_seed in (1, 2):
            S = sample_dataset(Population.uniform(u), 30, data_seed)
            run = drive(make_analyst(strat, u, 30, make_rng(5)), naive_session(S))
            tables.append(np.array([q.table for q in run.queries]))
        assert np.array_equal(tables[0], tables[1])

    def test_later_batches_use_previous_answers(self):
        u = Universe.indexed(64)
        strat = RoundStructured(1, 6)
        firsts = []
        for data_seed in (1, 2):
            S = sample_dataset(Population.uniform(u), 30, data_seed)
            run = drive(make_analyst(strat, u, 30, make_rng(5)), naive_session(S))
            firsts.append(run.queries[6].table)
        assert not np.array_equal(firsts[0], firsts[1])


class TestSignAggregation:
    @pytest.mark.parametrize("d,n", [(100, 100), (500, 50), (1000, 10)])
    def test_naive_mean_matches_closed_form(self, d, n):
        pop = Population.gaussian_product(d)
        cfg = OracleConfig(NAIVE, m=d + 1)
        outs = run_trials(pop, n, cfg, SignAggregation(d), seed=d, trials=100, mc_trials=200)
        mean = np.mean([o.extra["reported_unrescaled"] for o in outs])
        target = math.sqrt(2 * d / (math.pi * n))
        assert abs(mean - target) <= 0.1 * target

    def test_single_dimension_gap(self):
        n = 50
        pop = Population.gaussian_product(1)
        outs = run_trials(pop, n, OracleConfig(NAIVE, m=2), SignAggregation(1), seed=4, trials=400, mc_trials=200)
        gap = np.mean([o.extra["reported_unrescaled"] - o.extra["true_unrescaled"] for o in outs])
        assert gap == pytest.approx(math.sqrt(2 / (math.pi * n)), rel=0.15)

    def test_attack_function(self):
        d = 200
        S = sample_dataset(Population.gaussian_product(d), 100, 3)
        res = sign_aggregation_attack(naive_session(S), seed=3)
        assert res.reported_unrescaled > 0.5 * math.sqrt(2 * d / (math.pi * 100))
        assert abs(res.true - 0.5) <= 4 * res.true_se

    def test_wrong_population(self):
        S = sample_dataset(Population.uniform(8), 10, 0)
        with pytest.raises(ValidationError):
            sign_aggregation_attack(naive_session(S))

    def test_laplace_at_corollary_size(self):
        d, tau, beta = 10, 0.1, 0.05
        n = required_sample_size("laplace_sq", tau, beta, m=d + 1)
        cfg = OracleConfig(LAPLACE, tau=tau, beta=beta, m=d + 1, epsilon=tau / 2)
        outs = run_trials(Population.gaussian_product(d), n, cfg, SignAggregation(d), seed=8, trials=50,
                          mc_trials=1000)
        assert sum(o.gap <= tau for o in outs) >= 45


class TestReconstructionProbe:
    def test_small_universe_rejected(self):
        S = sample_dataset(Population.uniform(100), 100, 0)
        with pytest.raises(UniverseTooSmall):
            reconstruction_probe(naive_session(S), 10, Population.uniform(100))

    def test_no_probes_means_no_gap(self):
        pop = Population.uniform(1024)
        gaps = [reconstruction_probe(naive_session(sample_dataset(pop, 100, s)), 0, pop, seed=s)
                for s in range(20)]
        assert sum(g <= 0.1 for g in gaps) >= 19

    def test_naive_is_fooled(self):
        pop = Population.uniform(1024)
        outs = run_trials(pop, 100, OracleConfig(NAIVE, m=4001), ReconstructionProbe(4000), 11, 20)
        assert sum(o.gap > 0.2 for o in outs) >= 18

    def test_pmw_at_corollary_size(self):
        tau, beta = 0.2, 0.05
        n = required_sample_size("pmw_sq", tau, beta, log_universe=math.log(1024))
        cfg = OracleConfig(PMW, tau=tau, beta=beta, m=4001, epsilon=tau / 2)
        outs = run_trials(Population.uniform(1024), n, cfg, ReconstructionProbe(4000, strict=False), 12, 20)
        assert sum(o.completed and o.gap <= 0.2 for o in outs) >= 18


class TestTrials:
    def test_parallel_equals_serial(self):
        pop = Population.uniform(128)
        cfg = OracleConfig(LAPLACE, m=21, epsilon=1.0)
        a = run_trials(pop, 60, cfg, ReconstructionProbe(20), 3, 4)
        b = run_trials(pop, 60, cfg, ReconstructionProbe(20), 3, 4, workers=2)
        assert [o.reported for o in a] == [o.reported for o in b]

    def test_trial_streams_are_distinct(self):
        pop = Population.uniform(128)
        cfg = OracleConfig(NAIVE, m=21)
        a = run_trial(pop, 60, cfg, ReconstructionProbe(20), 3, 0)
        b = run_trial(pop, 60, cfg, ReconstructionProbe(20), 3, 1)
        assert a.reported != b.reported
