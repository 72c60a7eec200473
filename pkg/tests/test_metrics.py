from __future__ import annotations

import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logit

from prefmatch.closed_form import kl_rlhf_solution, pm_rlhf_solution
from prefmatch.exceptions import ContractError, SentinelWarning, UndefinedConditionalError
from prefmatch.metrics import (
    METRIC_COLUMNS,
    SENTINEL,
    MetricsReport,
    aggregate_pm_divergence,
    avg_length,
    entropy,
    expected_length,
    instance_pm_divergence,
    kl_to_reference,
    perplexity,
    policy_perplexity,
    tabular_perplexity,
    win_rate,
)
from prefmatch.preference import RewardTable, TabularPolicy
from prefmatch.sequence import AutoregressivePolicy, Vocabulary, enumerate_responses, flatten_all, response_lengths


def two_point_kl(q, s):
    return q * math.log(q / s) + (1 - q) * math.log((1 - q) / (1 - s))


class TestInstance:
    def test_pm_policy_is_zero(self):
        r = RewardTable([[0.3, -1.2, 2.0]])
        pol = pm_rlhf_solution(r)
        assert instance_pm_divergence(pol[0][0], pol[0][2], 0.3, 2.0) <= 1e-15

    def test_two_point_value(self):
        got = instance_pm_divergence(0.99, 0.01, float(logit(0.6)), 0.0)
        assert got == pytest.approx(two_point_kl(0.99, 0.6), rel=1e-13)

    def test_symmetric(self):
        assert instance_pm_divergence(0.5, 0.5, 0.0, 0.0) == 0.0

    def test_beta_scales_rewards(self):
        a = instance_pm_divergence(0.7, 0.3, 2.0, 0.0, beta=2.0)
        b = instance_pm_divergence(0.7, 0.3, 1.0, 0.0, beta=1.0)
        assert a == pytest.approx(b, abs=1e-15)

    def test_zero_side_mass(self):
        # p_llm puts everything on y1, reward prefers y1 with 0.75: KL = log(1/0.75)
        assert instance_pm_divergence(0.4, 0.0, math.log(3), 0.0) == pytest.approx(-math.log(0.75), rel=1e-14)

    def test_sentinel(self):
        with pytest.warns(SentinelWarning):
            assert instance_pm_divergence(0.5, 0.5, 1e7, 0.0) == SENTINEL

    def test_both_zero(self):
        with pytest.raises(UndefinedConditionalError):
            instance_pm_divergence(0.0, 0.0, 0.0, 1.0)

    @given(st.floats(1e-6, 1), st.floats(1e-6, 1), st.floats(-5, 5), st.floats(-5, 5))
    def test_nonnegative_and_matches_mpmath(self, p1, p2, r1, r2):
        got = instance_pm_divergence(p1, p2, r1, r2)
        q = mpmath.mpf(p1) / (mpmath.mpf(p1) + mpmath.mpf(p2))
        s = 1 / (1 + mpmath.exp(-(mpmath.mpf(r1) - mpmath.mpf(r2))))
        ref = q * mpmath.log(q / s) + (1 - q) * mpmath.log((1 - q) / (1 - s))
        assert got >= 0
        assert got == pytest.approx(float(ref), abs=1e-12)


class TestAggregate:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.r = RewardTable(rng.normal(size=(3, 6)))
        self.ref = TabularPolicy(rng.dirichlet(np.ones(6), size=3))

    def test_pm_policy_exact_zero(self):
        res = aggregate_pm_divergence(pm_rlhf_solution(self.r), self.r, exact=True)
        assert res.mean <= 1e-12
        assert res.exact and res.n_sentinel == 0

    def test_kl_policy_positive(self):
        pol = kl_rlhf_solution(self.r, self.ref, 1.0)
        assert aggregate_pm_divergence(pol, self.r, exact=True).mean > 1e-3

    def test_kl_with_uniform_reference_is_zero(self):
        pol = kl_rlhf_solution(self.r, TabularPolicy.uniform([6, 6, 6]), 0.5)
        assert aggregate_pm_divergence(pol, self.r, 0.5, exact=True).mean <= 1e-12

    def test_kl_zero_iff_pairwise_uniform_on_sampled_pairs(self):
        # reference uniform on {0, 1}, zero elsewhere; the sampler only ever draws that pair
        r = RewardTable([[1.0, -0.5, 2.0]])
        ref = TabularPolicy([[0.5, 0.5, 0.0]])
        pol = kl_rlhf_solution(r, ref, 1.0)
        assert aggregate_pm_divergence(pol, r, sampler=ref, exact=True).mean <= 1e-12
        skew = TabularPolicy([[0.6, 0.4, 0.0]])
        assert aggregate_pm_divergence(kl_rlhf_solution(r, skew, 1.0), r, sampler=skew, exact=True).mean > 1e-3

    def test_shift_invariant(self):
        pol = kl_rlhf_solution(self.r, self.ref, 1.0)
        a = aggregate_pm_divergence(pol, self.r, exact=True).mean
        b = aggregate_pm_divergence(pol, self.r.shifted([1.0, -3.0, 7.5]), exact=True).mean
        assert a == pytest.approx(b, abs=1e-12)

    def test_monte_carlo_within_three_sigma(self):
        pol = kl_rlhf_solution(self.r, self.ref, 1.0)
        exact = aggregate_pm_divergence(pol, self.r, exact=True).mean
        n = 4000
        hits = 0
        for seed in range(20):
            mc = aggregate_pm_divergence(pol, self.r, n=n, seed=seed)
            hits += abs(mc.mean - exact) <= 3 * mc.std / math.sqrt(n)
        assert hits >= 18

    def test_deterministic(self):
        pol = kl_rlhf_solution(self.r, self.ref, 1.0)
        a = aggregate_pm_divergence(pol, self.r, n=100, seed=5)
        b = aggregate_pm_divergence(pol, self.r, n=100, seed=5)
        np.testing.assert_array_equal(a.instances, b.instances)

    def test_exact_limit(self):
        big = RewardTable(np.zeros((1, 200)))
        with pytest.raises(ContractError):
            aggregate_pm_divergence(TabularPolicy.uniform([200]), big, exact=True)

    def test_mc_needs_n(self):
        with pytest.raises(ContractError):
            aggregate_pm_divergence(pm_rlhf_solution(self.r), self.r)


class TestEntropyKL:
    def test_uniform(self):
        for k in (2, 5, 17):
            assert entropy(TabularPolicy.uniform([k])) == pytest.approx(math.log(k), abs=1e-12)

    def test_point_mass(self):
        assert entropy(TabularPolicy([[0.0, 1.0, 0.0]])) == 0.0

    def test_arbitrary_precision(self):
        p = [mpmath.mpf(6) / 10, mpmath.mpf(3) / 10, mpmath.mpf(1) / 10]
        ref = -sum(q * mpmath.log(q) for q in p)
        assert entropy(TabularPolicy([[0.6, 0.3, 0.1]])) == pytest.approx(float(ref), abs=1e-15)

    def test_kl_self_zero(self):
        p = TabularPolicy([[0.2, 0.8]])
        assert kl_to_reference(p, p) == 0.0

    def test_kl_two_point(self):
        got = kl_to_reference(TabularPolicy([[0.9, 0.1]]), TabularPolicy([[0.5, 0.5]]))
        assert got == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_gibbs(self, seed):
        rng = np.random.default_rng(seed)
        p = TabularPolicy(rng.dirichlet(np.ones(5), size=2))
        q = TabularPolicy(rng.dirichlet(np.ones(5), size=2))
        assert kl_to_reference(p, q) >= 0

    def test_support_violation(self):
        with pytest.warns(SentinelWarning):
            assert kl_to_reference(TabularPolicy([[0.5, 0.5]]), TabularPolicy([[1.0, 0.0]])) == SENTINEL


class TestPerplexityLength:
    def test_quarter_tokens(self):
        pol = AutoregressivePolicy.uniform(Vocabulary(4, 6))
        ys = [(3,), (0, 3), (1, 2, 0, 3)]
        assert perplexity(pol, [0, 0, 0], ys) == pytest.approx(4.0, abs=1e-9)

    def test_deterministic_policy(self):
        vocab = Vocabulary(3, 4)
        table = np.zeros((3, 3))
        table[:, 0] = 1.0
        table[2, :] = [0.0, 0.0, 1.0]  # after token 1 stop; never reached
        pol = AutoregressivePolicy(vocab, 1, (table,))
        # the policy emits 0, 0, 0 then forced EOS
        assert perplexity(pol, [0], [(0, 0, 0, 2)]) == pytest.approx(1.0, abs=1e-12)

    def test_zero_probability_sentinel(self):
        vocab = Vocabulary(3, 4)
        table = np.zeros((3, 3))
        table[:, 0] = 1.0
        pol = AutoregressivePolicy(vocab, 1, (table,))
        with pytest.warns(SentinelWarning):
            assert perplexity(pol, [0], [(1, 2)]) == SENTINEL

    def test_uniform_policy_analytic(self):
        for V, L in [(3, 3), (4, 5), (5, 2)]:
            vocab = Vocabulary(V, L)
            pol = AutoregressivePolicy.uniform(vocab)
            # length-l responses below the cap have all tokens at 1/V; capped ones have a forced EOS
            expected = 0.0
            for c in range(L):
                mass = (1 / V) ** c * ((V - 1) ** c) * (1 / V if c < L - 1 else 1.0)
                ppl = V if c < L - 1 else V ** ((L - 1) / L)
                expected += mass * ppl
            assert policy_perplexity(pol) == pytest.approx(expected, rel=1e-12)
            assert tabular_perplexity(flatten_all(pol), vocab) == pytest.approx(expected, rel=1e-12)

    def test_eval_set_matches_enumeration(self):
        vocab = Vocabulary(3, 4)
        pol = AutoregressivePolicy.random(vocab, np.random.default_rng(8))
        ys = enumerate_responses(vocab)
        flat = flatten_all(pol)[0]
        oracle = np.mean([p ** (-1 / len(y)) for p, y in zip(flat, ys)])
        assert perplexity(pol, [0] * len(ys), ys) == pytest.approx(oracle, rel=1e-12)

    def test_avg_length(self):
        assert avg_length([(0, 1, 0, 3)] * 4) == 3.0
        assert avg_length([(0, 3), (0, 0, 3), (1, 1, 1, 3)]) == 2.0
        with pytest.raises(ContractError):
            avg_length([])

    def test_sampled_length_matches_expectation(self):
        vocab = Vocabulary(3, 5)
        flat = flatten_all(AutoregressivePolicy.uniform(vocab))
        ys = enumerate_responses(vocab)
        rng = np.random.default_rng(0)
        n = 20_000
        idx = rng.choice(len(ys), size=n, p=flat[0])
        lengths = response_lengths(vocab)[idx]
        assert abs(avg_length([ys[i] for i in idx]) - expected_length(flat, vocab)) <= 3 * lengths.std() / math.sqrt(n)


class TestReport:
    def test_round_trip(self, tmp_path):
        rep = MetricsReport(0.5, 2.0, 3.5, 1.2, 0.1, n_sentinel=2)
        path = tmp_path / "m.csv"
        rep.write_csv(path)
        assert path.read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
        back = MetricsReport.read_csv(path)
        assert back.pm_divergence == 0.5 and back.kl == 0.1
        d = json.loads(rep.to_json())
        assert d["n_sentinel"] == 2 and "instances" not in d

    def test_invariants(self):
        with pytest.raises(ContractError):
            MetricsReport(-1.0, 1.0, 2.0, 0.0, 0.0)
        with pytest.raises(ContractError):
            MetricsReport(0.0, 1.0, 0.5, 0.0, 0.0)

    def test_win_rate(self):
        r = RewardTable([[0.0, 1.0, 2.0]])
        assert win_rate(TabularPolicy([[0.1, 0.3, 0.6]]), r) == 1.0
        assert win_rate(TabularPolicy([[0.6, 0.3, 0.1]]), r) == 0.0
