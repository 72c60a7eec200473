"""Finite-space preference models and the preference-matching policy.

Prompts and responses are dense 0-based integer indices. Each prompt ``x`` owns
``k(x) >= 2`` responses, and rows may have different lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from ._validation import (
    ROW_SUM_ATOL,
    check_finite_scalar,
    check_index,
    check_rows,
    check_same_shape,
)
from .exceptions import ContractError, DomainError, UndefinedConditionalError


class _RowTable:
    rows: tuple[np.ndarray, ...]

    @property
    def num_prompts(self) -> int:
        return len(self.rows)

    @property
    def responses_per_prompt(self) -> tuple[int, ...]:
        return tuple(r.size for r in self.rows)

    def __getitem__(self, prompt: int) -> np.ndarray:
        return self.rows[prompt]

    def __iter__(self):
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def is_rectangular(self) -> bool:
        return len(set(self.responses_per_prompt)) == 1

    def to_array(self) -> np.ndarray:
        if not self.is_rectangular():
            raise ContractError("ragged table cannot be converted to a 2-D array")
        return np.vstack(self.rows)

    def to_lists(self) -> list[list[float]]:
        return [row.tolist() for row in self.rows]

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.responses_per_prompt == other.responses_per_prompt and all(
            np.array_equal(a, b) for a, b in zip(self.rows, other.rows)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False, init=False)
class RewardTable(_RowTable):
    """Rewards ``r(x, y)`` on a finite prompt x response grid (log-odds scale)."""

    rows: tuple[np.ndarray, ...]

    def __init__(self, rows):
        rows = check_rows(rows, "rewards", min_len=2)
        for x, row in enumerate(rows):
            if not np.all(np.isfinite(row)):
                raise DomainError(f"rewards[{x}] contains non-finite values")
        object.__setattr__(self, "rows", rows)

    def shifted(self, offsets) -> "RewardTable":
        offsets = np.broadcast_to(np.asarray(offsets, dtype=float), (self.num_prompts,))
        return RewardTable([row + c for row, c in zip(self.rows, offsets)])

    def scaled(self, factor: float) -> "RewardTable":
        return RewardTable([row * factor for row in self.rows])


@dataclass(frozen=True, eq=False, init=False)
class TabularPolicy(_RowTable):
    """Per-prompt probability vectors ``pi(.|x)``."""

    rows: tuple[np.ndarray, ...]

    def __init__(self, rows, *, atol: float = ROW_SUM_ATOL):
        rows = check_rows(rows, "policy", min_len=1)
        for x, row in enumerate(rows):
            if not np.all(np.isfinite(row)) or np.any(row < 0):
                raise DomainError(f"policy[{x}] must be finite and nonnegative")
            total = float(np.sum(row))
            if abs(total - 1.0) > atol:
                raise DomainError(f"policy[{x}] sums to {total!r}, not 1")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def uniform(cls, responses_per_prompt: Sequence[int]) -> "TabularPolicy":
        return cls([np.full(k, 1.0 / k) for k in responses_per_prompt])

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        return cls([np.exp(log_softmax(np.asarray(z, dtype=float))) for z in logits])

    def log_rows(self) -> tuple[np.ndarray, ...]:
        """Log-probabilities, ``-inf`` where the policy puts zero mass."""
        with np.errstate(divide="ignore"):
            return tuple(np.log(row) for row in self.rows)


@dataclass(frozen=True, init=False)
class RankingPermutation:
    """A full ranking ``tau`` of ``k`` items; ``order[0]`` is the top choice."""

    order: tuple[int, ...]

    def __init__(self, order):
        order = tuple(int(i) for i in order)
        if sorted(order) != list(range(len(order))):
            raise ContractError(f"{order} is not a permutation of 0..{len(order) - 1}")
        object.__setattr__(self, "order", order)

    def __len__(self) -> int:
        return len(self.order)


def btl_preference(r1: float, r2: float) -> float:
    """Bradley-Terry-Luce probability that the response with reward ``r1`` wins."""
    r1 = check_finite_scalar(r1, "r1")
    r2 = check_finite_scalar(r2, "r2")
    return float(expit(r1 - r2))


def pl_ranking_prob(reward_row, tau) -> float:
    """Plackett-Luce probability of the full ranking ``tau``.

    Each stage picks ``tau[i]`` among the items not yet ranked with probability
    proportional to ``exp(reward)``.
    """
    r = np.asarray(reward_row, dtype=float)
    if not isinstance(tau, RankingPermutation):
        tau = RankingPermutation(tau)
    if r.ndim != 1 or r.size != len(tau):
        raise ContractError(f"reward row has {r.size} entries but ranking has {len(tau)}")
    ordered = r[list(tau.order)]
    # tail log-sum-exp: log sum_{j >= i} exp(r_tau(j))
    tails = np.logaddexp.accumulate(ordered[::-1])[::-1]
    return float(np.exp(np.sum(ordered - tails)))


def pm_policy(rewards: RewardTable) -> TabularPolicy:
    """The preference-matching policy: a per-prompt softmax of the rewards."""
    return TabularPolicy([np.exp(log_softmax(row)) for row in rewards.rows])


def conditional_preference(policy: TabularPolicy, prompt: int, i: int, j: int) -> float:
    """``pi(y_i|x) / (pi(y_i|x) + pi(y_j|x))``."""
    prompt = check_index(prompt, policy.num_prompts, "prompt")
    row = policy[prompt]
    i = check_index(i, row.size, "i")
    j = check_index(j, row.size, "j")
    denom = row[i] + row[j]
    if denom <= 0:
        raise UndefinedConditionalError(
            f"responses {i} and {j} both have zero probability under prompt {prompt}"
        )
    return float(row[i] / denom)


def argmax_point_mass(rewards: RewardTable) -> TabularPolicy:
    """Point mass on the highest-reward response (lowest index among ties)."""
    rows = []
    for row in rewards.rows:
        out = np.zeros(row.size)
        out[int(np.argmax(row))] = 1.0
        rows.append(out)
    return TabularPolicy(rows)


def expected_reward(policy: TabularPolicy, rewards: RewardTable) -> float:
    check_same_shape(policy, rewards, "policy", "rewards")
    return float(np.mean([p @ r for p, r in zip(policy.rows, rewards.rows)]))


def total_variation(p: TabularPolicy, q: TabularPolicy) -> np.ndarray:
    """Per-prompt total-variation distance between two policies."""
    check_same_shape(p, q, "p", "q")
    return np.array([0.5 * np.abs(a - b).sum() for a, b in zip(p.rows, q.rows)])


def log_partition(rewards: RewardTable) -> np.ndarray:
    """Per-prompt ``log sum_y exp(r(x, y))``."""
    return np.array([logsumexp(row) for row in rewards.rows])


def sample_distinct_pairs(rng: np.random.Generator, probs, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent draws ``(a, b)`` from ``probs`` conditioned on ``a != b``.

    Clashing pairs are redrawn whole, so each ordered pair ``(i, j)`` with
    ``i != j`` has probability proportional to ``probs[i] * probs[j]``.
    """
    probs = np.asarray(probs, dtype=float)
    if np.count_nonzero(probs > 0) < 2:
        raise ContractError("need at least 2 responses with positive mass to draw distinct pairs")
    a = rng.choice(probs.size, size=size, p=probs)
    b = rng.choice(probs.size, size=size, p=probs)
    clash = np.flatnonzero(a == b)
    while clash.size:
        a[clash] = rng.choice(probs.size, size=clash.size, p=probs)
        b[clash] = rng.choice(probs.size, size=clash.size, p=probs)
        clash = clash[a[clash] == b[clash]]
    return a, b
