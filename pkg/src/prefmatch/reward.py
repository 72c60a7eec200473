"""Synthetic BTL comparison data and maximum-likelihood reward recovery."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive
from .exceptions import (
    ContractError,
    ConvergenceWarning,
    DomainError,
    GenerationError,
    NonRealizableWarning,
    UnidentifiableWarning,
)
from .preference import RewardTable, TabularPolicy, sample_distinct_pairs


@dataclass(frozen=True, eq=False)
class ComparisonDataset:
    """Records ``(prompt, winner, loser)`` with the response count of every prompt."""

    prompts: np.ndarray
    winners: np.ndarray
    losers: np.ndarray
    responses_per_prompt: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = []
        for name in ("prompts", "winners", "losers"):
            a = np.array(getattr(self, name), dtype=np.int64).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays.append(a)
        x, w, l = arrays
        if not (x.size == w.size == l.size):
            raise ContractError("prompts, winners and losers must have equal length")
        k = np.array(self.responses_per_prompt, dtype=np.int64)
        object.__setattr__(self, "responses_per_prompt", tuple(int(v) for v in k))
        if x.size:
            if x.min() < 0 or x.max() >= k.size:
                raise ContractError("prompt index out of range")
            kx = k[x]
            if np.any((w < 0) | (w >= kx) | (l < 0) | (l >= kx)):
                raise ContractError("response index out of range for its prompt")
            if np.any(w == l):
                raise ContractError(f"record {int(np.flatnonzero(w == l)[0])} has winner == loser")

    def __len__(self) -> int:
        return int(self.prompts.size)

    @property
    def num_prompts(self) -> int:
        return len(self.responses_per_prompt)

    def win_counts(self) -> list[np.ndarray]:
        """Per-prompt matrices ``W[i, j]`` = number of records where ``i`` beat ``j``."""
        out = []
        for x, k in enumerate(self.responses_per_prompt):
            sel = self.prompts == x
            W = np.zeros((k, k))
            np.add.at(W, (self.winners[sel], self.losers[sel]), 1.0)
            out.append(W)
        return out


def generate_comparisons(
    true_rewards: RewardTable,
    sampler: TabularPolicy | None,
    n: int,
    seed,
    *,
    sampler_id: str | None = None,
) -> ComparisonDataset:
    """Draw ``n`` labelled comparisons under the BTL model.

    Each record takes a uniform prompt, a distinct response pair drawn from
    ``sampler`` (uniform when ``None``) by rejection, and a winner drawn with
    probability ``sigma(r_i - r_j)``.
    """
    k = true_rewards.responses_per_prompt
    if sampler is None:
        sampler = TabularPolicy.uniform(k)
        sampler_id = sampler_id or "uniform"
    if sampler.responses_per_prompt != k:
        raise ContractError("sampler and rewards disagree on response counts")
    for x, row in enumerate(sampler.rows):
        if np.count_nonzero(row > 0) < 2:
            raise GenerationError(f"sampler puts mass on fewer than 2 responses for prompt {x}")
    n = int(n)
    if n < 0:
        raise ContractError("n must be >= 0")
    rng = np.random.default_rng(seed)
    prompts = rng.integers(0, len(k), size=n)
    first = np.empty(n, dtype=np.int64)
    second = np.empty(n, dtype=np.int64)
    for x in range(len(k)):
        idx = np.flatnonzero(prompts == x)
        p = sampler[x]
        a, b = sample_distinct_pairs(rng, p, idx.size)
        first[idx], second[idx] = a, b
    diff = np.empty(n)
    for x, row in enumerate(true_rewards.rows):
        sel = prompts == x
        diff[sel] = row[first[sel]] - row[second[sel]]
    first_wins = rng.random(n) < expit(diff)
    winners = np.where(first_wins, first, second)
    losers = np.where(first_wins, second, first)
    meta = {"seed": seed if isinstance(seed, (int, type(None))) else str(seed), "sampler": sampler_id or "custom", "n": n}
    return ComparisonDataset(prompts, winners, losers, k, meta)


def nll_loss(candidate_rewards: RewardTable, data: ComparisonDataset) -> float:
    """Mean of ``-log sigma(r(x, y_w) - r(x, y_l))`` over the records."""
    if candidate_rewards.responses_per_prompt != data.responses_per_prompt:
        raise ContractError("rewards and dataset disagree on response counts")
    if len(data) == 0:
        raise ContractError("empty dataset")
    total = 0.0
    for x, W in enumerate(data.win_counts()):
        r = candidate_rewards[x]
        total -= float(np.sum(W * log_expit(r[:, None] - r[None, :])))
    return total / len(data)


@dataclass(frozen=True)
class RewardFitConfig:
    """``step_size=None`` picks ``1 / L`` per prompt from a Lipschitz bound on the NLL gradient."""

    step_size: float | None = None
    max_iter: int = 100_000
    tol: float = 1e-10
    normalization: Literal["first", "mean"] = "first"

    def __post_init__(self):
        if self.step_size is not None:
            check_positive(self.step_size, "step_size")
        check_positive(self.tol, "tol")
        if self.max_iter < 1:
            raise ContractError("max_iter must be >= 1")
        if self.normalization not in ("first", "mean"):
            raise ContractError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class FitInfo:
    converged: bool
    iterations: int
    grad_norm: float
    unidentifiable: dict


def _normalize(r: np.ndarray, rule: str) -> np.ndarray:
    return r - (r[0] if rule == "first" else r.mean())


def fit_reward_mle(data: ComparisonDataset, config: RewardFitConfig | None = None, *, return_info: bool = False):
    """Minimize the comparison NLL by fixed-step gradient descent.

    Prompts are independent blocks, so each gets its own step. Responses that
    are never compared keep reward 0 before normalization and trigger an
    :class:`UnidentifiableWarning`.
    """
    config = config or RewardFitConfig()
    if len(data) == 0:
        raise ContractError("empty dataset")
    n = len(data)
    counts = data.win_counts()
    unseen = {}
    rows = []
    worst_norm, max_it, all_conv = 0.0, 0, True
    for x, W in enumerate(counts):
        k = W.shape[0]
        games = W + W.T
        seen = games.sum(axis=1) > 0
        if not seen.all():
            unseen[x] = np.flatnonzero(~seen).tolist()
        r = np.zeros(k)
        degree = games.sum(axis=1).max() / n
        if degree == 0:
            rows.append(r)
            continue
        step = config.step_size or 2.0 / degree
        conv = False
        it = 0
        for it in range(config.max_iter + 1):
            d = r[:, None] - r[None, :]
            # d/dr_i of -sum W_ij log sigma(r_i - r_j)
            m = W * expit(-d)
            grad = (m.T.sum(axis=1) - m.sum(axis=1)) / n
            g = float(np.linalg.norm(grad))
            if g <= config.tol:
                conv = True
                break
            if it < config.max_iter:
                r = r - step * grad
        worst_norm = max(worst_norm, g)
        max_it = max(max_it, it)
        all_conv &= conv
        rows.append(r)
    if unseen:
        warnings.warn(f"responses never compared (prompt: indices): {unseen}", UnidentifiableWarning, stacklevel=2)
    if not all_conv:
        warnings.warn(
            f"reward MLE did not converge in {config.max_iter} iterations; final gradient norm {worst_norm:.3e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    table = RewardTable([_normalize(r, config.normalization) for r in rows])
    if return_info:
        return table, FitInfo(all_conv, max_it, worst_norm, unseen)
    return table


def check_pair_probs(pair_probs, *, atol: float = 1e-9) -> list[np.ndarray]:
    out = []
    for x, P in enumerate(pair_probs):
        P = np.array(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 2:
            raise ContractError(f"pair_probs[{x}] must be a square matrix with k >= 2")
        off = ~np.eye(P.shape[0], dtype=bool)
        if np.any((P[off] <= 0) | (P[off] >= 1)):
            raise DomainError(f"pair_probs[{x}] off-diagonal entries must lie in (0, 1)")
        if np.max(np.abs((P + P.T)[off] - 1.0)) > atol:
            raise DomainError(f"pair_probs[{x}] is inconsistent: p(i>j) + p(j>i) != 1")
        out.append(P)
    return out


def pairwise_probabilities(rewards: RewardTable) -> list[np.ndarray]:
    """BTL matrices ``P[i, j] = sigma(r_i - r_j)``; the diagonal is 0.5."""
    return [expit(r[:, None] - r[None, :]) for r in rewards.rows]


def _fit_population_prompt(P: np.ndarray, config: RewardFitConfig):
    k = P.shape[0]
    off = ~np.eye(k, dtype=bool)

    def loss(r):
        d = r[:, None] - r[None, :]
        return -float(np.sum(np.where(off, P * log_expit(d), 0.0)))

    r = np.zeros(k)
    value = loss(r)
    tol = min(config.tol, 1e-12)
    for it in range(config.max_iter + 1):
        s = expit(r[:, None] - r[None, :])
        grad = np.where(off, s - P, 0.0).sum(axis=1)
        if np.max(np.abs(grad[1:])) <= tol:
            return r, True, it
        w = np.where(off, s * (1 - s), 0.0)
        hess = np.diag(w.sum(axis=1)) - w
        step = np.zeros(k)
        step[1:] = -np.linalg.solve(hess[1:, 1:], grad[1:])
        slope = float(grad @ step)
        t = 1.0
        while True:
            trial = r + t * step
            new = loss(trial)
            if new <= value + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if new >= value and t < 1e-12:
            # at machine precision; the gradient cannot be reduced further
            return r, np.max(np.abs(grad[1:])) <= 1e-9, it
        r, value = trial, new
    return r, False, config.max_iter


def fit_reward_population(pair_probs, config: RewardFitConfig | None = None, *, realizable_atol: float = 1e-6) -> RewardTable:
    """Minimize the expected pairwise cross-entropy against exact preference probabilities.

    Newton's method on ``r[1:]`` with ``r[0] = 0``. When the fitted BTL
    probabilities differ from the inputs by more than ``realizable_atol`` the
    input is flagged with a :class:`NonRealizableWarning`; the best BTL fit is
    still returned.
    """
    config = config or RewardFitConfig()
    mats = check_pair_probs(pair_probs)
    rows, flagged = [], []
    for x, P in enumerate(mats):
        r, conv, _ = _fit_population_prompt(P, config)
        if not conv:
            warnings.warn(f"population fit for prompt {x} did not converge", ConvergenceWarning, stacklevel=2)
        off = ~np.eye(P.shape[0], dtype=bool)
        dev = np.max(np.abs(expit(r[:, None] - r[None, :]) - P)[off])
        if dev > realizable_atol:
            flagged.append((x, float(dev)))
        rows.append(_normalize(r, config.normalization))
    if flagged:
        warnings.warn(f"inputs are not BTL-realizable (prompt, max deviation): {flagged}", NonRealizableWarning, stacklevel=2)
    return RewardTable(rows)


def is_btl_realizable(P, *, atol: float = 1e-6) -> bool:
    """Whether a single pairwise matrix is reproduced by some BTL reward vector."""
    (P,) = check_pair_probs([P])
    r, _, _ = _fit_population_prompt(P, RewardFitConfig())
    off = ~np.eye(P.shape[0], dtype=bool)
    return bool(np.max(np.abs(expit(r[:, None] - r[None, :]) - P)[off]) <= atol)


COMPARISON_COLUMNS = ("prompt", "winner", "loser")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_comparisons_csv(data: ComparisonDataset, path) -> None:
    """Write ``prompt,winner,loser`` rows plus a ``<path>.meta.json`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        writer.writerows(zip(data.prompts.tolist(), data.winners.tolist(), data.losers.tolist()))
    meta = {"responses_per_prompt": list(data.responses_per_prompt), "metadata": data.metadata}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_comparisons_csv(path) -> ComparisonDataset:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COMPARISON_COLUMNS:
            raise ContractError(f"unexpected header {header}")
        rows = np.array([[int(v) for v in row] for row in reader], dtype=np.int64).reshape(-1, 3)
    return ComparisonDataset(rows[:, 0], rows[:, 1], rows[:, 2], tuple(meta["responses_per_prompt"]), meta["metadata"])


def _as_dataset(X, responses_per_prompt) -> ComparisonDataset:
    if isinstance(X, ComparisonDataset):
        return X
    X = np.asarray(X, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ContractError("X must have shape (n, 3): prompt, winner, loser")
    if responses_per_prompt is None:
        raise ContractError("responses_per_prompt is required when X is an array")
    return ComparisonDataset(X[:, 0], X[:, 1], X[:, 2], tuple(responses_per_prompt))


class BTLRewardModel(BaseEstimator):
    """Tabular BTL reward model fitted by maximum likelihood.

    ``fit`` accepts a :class:`ComparisonDataset` or an ``(n, 3)`` integer array
    of ``(prompt, winner, loser)`` rows together with ``responses_per_prompt``.
    """

    def __init__(self, responses_per_prompt=None, step_size=None, max_iter=100_000, tol=1e-10, normalization="first"):
        self.responses_per_prompt = responses_per_prompt
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.normalization = normalization

    def fit(self, X, y=None):
        data = _as_dataset(X, self.responses_per_prompt)
        cfg = RewardFitConfig(self.step_size, self.max_iter, self.tol, self.normalization)
        self.rewards_, info = fit_reward_mle(data, cfg, return_info=True)
        self.converged_ = info.converged
        self.n_iter_ = info.iterations
        return self

    def predict_proba(self, X):
        """Probability that response ``i`` beats ``j`` for rows ``(prompt, i, j)``."""
        check_is_fitted(self, "rewards_")
        X = np.asarray(X, dtype=np.int64).reshape(-1, 3)
        return np.array([expit(self.rewards_[x][i] - self.rewards_[x][j]) for x, i, j in X])

    def predict(self, X):
        """1 where the first response of each row is preferred, else 0."""
        return (self.predict_proba(X) > 0.5).astype(int)

    def score(self, X, y=None):
        """Negative mean NLL on held-out comparisons (higher is better)."""
        check_is_fitted(self, "rewards_")
        return -nll_loss(self.rewards_, _as_dataset(X, self.rewards_.responses_per_prompt))
