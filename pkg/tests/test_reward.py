from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit
from sklearn.base import clone

from prefmatch.exceptions import (
    ContractError,
    DomainError,
    GenerationError,
    NonRealizableWarning,
    UnidentifiableWarning,
)
from prefmatch.preference import RewardTable, TabularPolicy
from prefmatch.reward import (
    BTLRewardModel,
    ComparisonDataset,
    RewardFitConfig,
    fit_reward_mle,
    fit_reward_population,
    generate_comparisons,
    is_btl_realizable,
    nll_loss,
    pairwise_probabilities,
    read_comparisons_csv,
    write_comparisons_csv,
)


def population_nll(rewards, P):
    """Expected cross-entropy over ordered pairs against exact preferences."""
    r = np.asarray(rewards)
    d = r[:, None] - r[None, :]
    off = ~np.eye(r.size, dtype=bool)
    return -float(np.sum(np.where(off, P * np.log(expit(d)), 0.0)))


class TestGeneration:
    def test_equal_rewards_give_fair_coins(self):
        data = generate_comparisons(RewardTable([[0.0, 0.0, 0.0]]), None, 100_000, 1)
        W = data.win_counts()[0]
        for i in range(3):
            for j in range(i + 1, 3):
                assert W[i, j] / (W[i, j] + W[j, i]) == pytest.approx(0.5, abs=0.01)

    def test_btl_rate(self):
        data = generate_comparisons(RewardTable([[math.log(3), 0.0]]), None, 100_000, 2)
        assert np.mean(data.winners == 0) == pytest.approx(0.75, abs=0.01)

    def test_deterministic(self):
        r = RewardTable([[0.0, 1.0, 2.0], [1.0, -1.0, 0.5]])
        a = generate_comparisons(r, None, 500, 7)
        b = generate_comparisons(r, None, 500, 7)
        for name in ("prompts", "winners", "losers"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_pairs_are_distinct_and_follow_sampler(self):
        sampler = TabularPolicy([[0.7, 0.2, 0.1, 0.0]])
        data = generate_comparisons(RewardTable([[0.0, 0.0, 0.0, 0.0]]), sampler, 5000, 3)
        assert np.all(data.winners != data.losers)
        assert not np.any((data.winners == 3) | (data.losers == 3))

    def test_degenerate_sampler_names_prompt(self):
        sampler = TabularPolicy([[0.5, 0.5], [1.0, 0.0]])
        with pytest.raises(GenerationError, match="prompt 1"):
            generate_comparisons(RewardTable([[0.0, 0.0], [0.0, 0.0]]), sampler, 10, 0)

    def test_dataset_invariants(self):
        with pytest.raises(ContractError):
            ComparisonDataset([0], [1], [1], (3,))
        with pytest.raises(ContractError):
            ComparisonDataset([0], [3], [1], (3,))

    def test_csv_round_trip(self, tmp_path):
        data = generate_comparisons(RewardTable([[0.0, 1.0, 2.0]]), None, 50, 11)
        path = tmp_path / "comp.csv"
        write_comparisons_csv(data, path)
        assert path.read_text().splitlines()[0] == "prompt,winner,loser"
        back = read_comparisons_csv(path)
        np.testing.assert_array_equal(back.winners, data.winners)
        assert back.metadata == data.metadata
        assert back.responses_per_prompt == data.responses_per_prompt


class TestLoss:
    def test_zero_differences(self):
        data = ComparisonDataset([0, 0], [0, 1], [1, 0], (2,))
        assert nll_loss(RewardTable([[0.0, 0.0]]), data) == pytest.approx(math.log(2), abs=1e-15)

    def test_single_record(self):
        data = ComparisonDataset([0], [0], [1], (2,))
        assert nll_loss(RewardTable([[math.log(3), 0.0]]), data) == pytest.approx(-math.log(0.75), abs=1e-15)

    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(-10, 10))
    def test_shift_invariant(self, row, c):
        data = generate_comparisons(RewardTable([[0.0, 0.5, 1.0]]), None, 200, 5)
        a = nll_loss(RewardTable([row]), data)
        b = nll_loss(RewardTable([np.array(row) + c]), data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_true_reward_minimizes_population_loss(self, rng):
        r = rng.normal(size=5)
        P = pairwise_probabilities(RewardTable([r]))[0]
        best = population_nll(r, P)
        for _ in range(100):
            cand = r + rng.normal() + rng.normal(scale=0.3, size=5)
            assert population_nll(cand, P) >= best - 1e-12


class TestPopulationFit:
    def test_three_quarters_gives_ln3(self):
        P = np.array([[0.5, 0.75], [0.25, 0.5]])
        fitted = fit_reward_population([P])
        assert fitted[0][0] - fitted[0][1] == pytest.approx(math.log(3), abs=1e-6)

    def test_uniform_gives_zero(self):
        fitted = fit_reward_population([np.full((4, 4), 0.5)])
        np.testing.assert_allclose(fitted[0], 0.0, atol=1e-12)

    @pytest.mark.parametrize("k", [2, 3, 5, 10])
    def test_recovers_random_btl(self, rng, k):
        r = RewardTable([rng.uniform(-3, 3, size=k)])
        fitted = fit_reward_population(pairwise_probabilities(r))
        np.testing.assert_allclose(pairwise_probabilities(fitted)[0], pairwise_probabilities(r)[0], atol=1e-6)
        np.testing.assert_allclose(fitted[0], r[0] - r[0][0], atol=1e-6)

    def test_cycle_flagged(self):
        P = np.array([[0.5, 0.9, 0.1], [0.1, 0.5, 0.9], [0.9, 0.1, 0.5]])
        with pytest.warns(NonRealizableWarning):
            fitted = fit_reward_population([P])
        np.testing.assert_allclose(fitted[0], 0.0, atol=1e-8)
        assert not is_btl_realizable(P)
        assert is_btl_realizable(pairwise_probabilities(RewardTable([[0.0, 1.0, -2.0]]))[0])

    def test_inconsistent_input(self):
        with pytest.raises(DomainError):
            fit_reward_population([np.array([[0.5, 0.7], [0.7, 0.5]])])


class TestEmpiricalFit:
    def test_recovers_differences(self):
        r = RewardTable([[0.0, 1.0, 2.0]])
        fitted = fit_reward_mle(generate_comparisons(r, None, 100_000, 21))
        np.testing.assert_allclose(fitted[0], [0.0, 1.0, 2.0], atol=0.05)

    def test_normalization_rules(self):
        data = generate_comparisons(RewardTable([[0.0, 1.0, 2.0]]), None, 2000, 4)
        first = fit_reward_mle(data, RewardFitConfig(normalization="first"))
        mean = fit_reward_mle(data, RewardFitConfig(normalization="mean"))
        assert first[0][0] == 0.0
        assert mean[0].mean() == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(np.diff(first[0]), np.diff(mean[0]), atol=1e-12)

    def test_fixed_point_is_stationary(self):
        data = generate_comparisons(RewardTable([[0.0, 0.5, -0.5, 1.0]]), None, 3000, 8)
        fitted = fit_reward_mle(data)
        base = nll_loss(fitted, data)
        for i in range(4):
            for s in (-1e-3, 1e-3):
                bumped = fitted[0].copy()
                bumped[i] += s
                assert nll_loss(RewardTable([bumped]), data) >= base - 1e-12

    def test_unseen_response_warns(self):
        data = ComparisonDataset([0, 0], [0, 1], [1, 0], (3,))
        with pytest.warns(UnidentifiableWarning, match=r"\[2\]"):
            fit_reward_mle(data)

    def test_error_shrinks_with_n(self):
        # mean max error over seeds should fall like 1/sqrt(n), i.e. ~3.2x per decade
        r = RewardTable([[0.0, 1.0, 2.0]])
        P = pairwise_probabilities(r)[0]
        errs = np.zeros(3)
        for seed in range(20):
            for i, n in enumerate((1_000, 10_000, 100_000)):
                fitted = fit_reward_mle(generate_comparisons(r, None, n, seed))
                errs[i] += np.max(np.abs(pairwise_probabilities(fitted)[0] - P)) / 20
        assert np.all(errs[1:] <= 0.5 * errs[:-1])


class TestEstimator:
    def test_fit_predict(self):
        data = generate_comparisons(RewardTable([[0.0, math.log(3)]]), None, 20_000, 0)
        model = BTLRewardModel().fit(data)
        assert model.predict_proba([[0, 1, 0]])[0] == pytest.approx(0.75, abs=0.02)
        np.testing.assert_array_equal(model.predict([[0, 1, 0], [0, 0, 1]]), [1, 0])
        assert model.score(data) < 0

    def test_array_input_and_params(self):
        X = np.array([[0, 0, 1], [0, 1, 0], [0, 0, 1]])
        model = BTLRewardModel(responses_per_prompt=(2,), tol=1e-9)
        assert model.get_params()["tol"] == 1e-9
        fitted = clone(model).fit(X)
        assert fitted.rewards_[0][1] == pytest.approx(-math.log(2), abs=1e-6)

    def test_array_needs_sizes(self):
        with pytest.raises(ContractError):
            BTLRewardModel().fit(np.array([[0, 0, 1]]))
