"""Evaluation metrics: PM divergence, entropy, KL to reference, perplexity, length."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import entr, log_expit

from ._validation import check_positive, check_same_shape
from .exceptions import ContractError, GenerationError, SentinelWarning, UndefinedConditionalError
from .preference import RewardTable, TabularPolicy, sample_distinct_pairs
from .sequence import response_lengths, response_log_probs, seq_log_prob

SENTINEL = 1e6
MAX_EXACT_PAIRS = 10_000


def _two_point_kl(log_q1, log_q2, log_s1, log_s2):
    """KL between two-point distributions given in log space; ``0 log 0 = 0``."""
    q1, q2 = np.exp(log_q1), np.exp(log_q2)
    with np.errstate(invalid="ignore"):
        t1 = np.where(q1 > 0, q1 * (log_q1 - log_s1), 0.0)
        t2 = np.where(q2 > 0, q2 * (log_q2 - log_s2), 0.0)
    return t1 + t2


def _instance_values(p1, p2, r1, r2, beta):
    p1, p2 = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    if np.any((p1 < 0) | (p2 < 0)):
        raise ContractError("policy probabilities must be nonnegative")
    if np.any((p1 + p2) <= 0):
        raise UndefinedConditionalError("both responses of a pair have zero probability")
    with np.errstate(divide="ignore"):
        lp1, lp2 = np.log(p1), np.log(p2)
    lz = np.logaddexp(lp1, lp2)
    d = (np.asarray(r1, dtype=float) - np.asarray(r2, dtype=float)) / beta
    vals = _two_point_kl(lp1 - lz, lp2 - lz, log_expit(d), log_expit(-d))
    vals = np.maximum(vals, 0.0)
    bad = ~np.isfinite(vals) | (vals > SENTINEL)
    return np.where(bad, SENTINEL, vals), bad


def instance_pm_divergence(p1: float, p2: float, r1: float, r2: float, beta: float = 1.0) -> float:
    """``KL(p_llm(.|y1, y2) || p_reward(.|y1, y2))`` for one pair.

    ``p_llm`` is the policy's conditional preference ``p1 / (p1 + p2)`` and
    ``p_reward = sigma((r1 - r2) / beta)``. Infinite values are capped at
    ``SENTINEL`` with a :class:`SentinelWarning`.
    """
    beta = check_positive(beta, "beta")
    vals, bad = _instance_values(p1, p2, r1, r2, beta)
    if bad:
        warnings.warn("infinite PM divergence capped at the sentinel", SentinelWarning, stacklevel=2)
    return float(vals)


@dataclass(frozen=True, eq=False)
class PMDivergenceResult:
    mean: float
    instances: np.ndarray
    n_sentinel: int
    std: float
    exact: bool


def _check_sampler(sampler: TabularPolicy):
    for x, row in enumerate(sampler.rows):
        if np.count_nonzero(row > 0) < 2:
            raise GenerationError(f"pair sampler has fewer than 2 responses with positive mass for prompt {x}")


def aggregate_pm_divergence(
    policy: TabularPolicy,
    rewards: RewardTable,
    beta: float = 1.0,
    sampler: TabularPolicy | None = None,
    n: int | None = None,
    seed=None,
    *,
    exact: bool = False,
) -> PMDivergenceResult:
    """Mean instance PM divergence over pairs ``(x, y1, y2)``.

    Prompts are uniform and ``y1 != y2`` are independent draws from ``sampler``
    (the evaluated policy by default) conditioned on being distinct. With
    ``exact=True`` every ordered pair is enumerated and weighted by its sampling
    probability; ``instances`` then holds the per-pair values in enumeration order.
    """
    beta = check_positive(beta, "beta")
    check_same_shape(policy, rewards, "policy", "rewards")
    sampler = policy if sampler is None else sampler
    check_same_shape(policy, sampler, "policy", "sampler")
    _check_sampler(sampler)
    X = policy.num_prompts
    if exact:
        n_pairs = sum(k * (k - 1) for k in policy.responses_per_prompt)
        if n_pairs > MAX_EXACT_PAIRS:
            raise ContractError(f"{n_pairs} ordered pairs exceed the exact-mode limit {MAX_EXACT_PAIRS}")
        all_vals, all_w = [], []
        n_bad = 0
        for x in range(X):
            p, r, s = policy[x], rewards[x], sampler[x]
            i, j = np.nonzero(~np.eye(p.size, dtype=bool))
            w = s[i] * s[j]
            w = w / w.sum() / X
            keep = w > 0
            vals, bad = _instance_values(p[i[keep]], p[j[keep]], r[i[keep]], r[j[keep]], beta)
            n_bad += int(bad.sum())
            all_vals.append(vals)
            all_w.append(w[keep])
        vals, w = np.concatenate(all_vals), np.concatenate(all_w)
        mean = float(w @ vals)
        std = float(np.sqrt(max(w @ (vals - mean) ** 2, 0.0)))
        if n_bad:
            warnings.warn(f"{n_bad} infinite PM divergences capped at the sentinel", SentinelWarning, stacklevel=2)
        return PMDivergenceResult(mean, vals, n_bad, std, True)

    if n is None or int(n) < 1:
        raise ContractError("Monte-Carlo mode needs n >= 1")
    n = int(n)
    rng = np.random.default_rng(seed)
    prompts = rng.integers(0, X, size=n)
    vals = np.empty(n)
    bad = np.zeros(n, dtype=bool)
    for x in range(X):
        idx = np.flatnonzero(prompts == x)
        if idx.size == 0:
            continue
        s = sampler[x]
        a, b = sample_distinct_pairs(rng, s, idx.size)
        p, r = policy[x], rewards[x]
        vals[idx], bad[idx] = _instance_values(p[a], p[b], r[a], r[b], beta)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} infinite PM divergences capped at the sentinel", SentinelWarning, stacklevel=2)
    std = float(vals.std(ddof=1)) if n > 1 else 0.0
    return PMDivergenceResult(float(vals.mean()), vals, int(bad.sum()), std, False)


def entropy(policy: TabularPolicy) -> float:
    """``E_x [-sum_y pi log pi]`` with ``0 log 0 = 0``."""
    return float(np.mean([entr(row).sum() for row in policy.rows]))


def kl_to_reference(policy: TabularPolicy, reference: TabularPolicy) -> float:
    """``E_x sum_y pi log(pi / pi_ref)``; support violations give the sentinel."""
    check_same_shape(policy, reference, "policy", "reference")
    vals = []
    for x, (p, q) in enumerate(zip(policy.rows, reference.rows)):
        pos = p > 0
        if np.any(q[pos] <= 0):
            warnings.warn(f"policy has mass outside the reference support (prompt {x})", SentinelWarning, stacklevel=2)
            return SENTINEL
        vals.append(max(float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos])))), 0.0))
    return float(np.mean(vals))


def _perplexity_from_logs(log_prob: np.ndarray, length: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(-log_prob / length)
    return out


def perplexity(policy, prompts, responses) -> float:
    """Mean over an evaluation set of ``prod_i p_i ** (-1 / |y|)``.

    ``|y|`` counts tokens including EOS. A zero token probability yields the
    sentinel for that response.
    """
    prompts = list(prompts)
    responses = list(responses)
    if not responses or len(prompts) != len(responses):
        raise ContractError("need a nonempty evaluation set with one prompt per response")
    logs = np.array([seq_log_prob(policy, int(x), y) for x, y in zip(prompts, responses)])
    lengths = np.array([len(y) for y in responses], dtype=float)
    vals = _perplexity_from_logs(logs, lengths)
    bad = ~np.isfinite(vals) | (vals > SENTINEL)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} perplexities capped at the sentinel", SentinelWarning, stacklevel=2)
    return float(np.mean(np.where(bad, SENTINEL, vals)))


def policy_perplexity(policy) -> float:
    """Expected per-response perplexity under the policy's own sampling, exactly."""
    lengths = response_lengths(policy.vocab) + 1.0
    out = []
    for x in range(policy.num_prompts):
        lp = response_log_probs(policy, x)
        pi = np.exp(lp)
        pos = pi > 0
        out.append(float(pi[pos] @ _perplexity_from_logs(lp[pos], lengths[pos])))
    return float(np.mean(out))


def tabular_perplexity(policy: TabularPolicy, vocab) -> float:
    """Expected perplexity of a flattened sequence policy under its own sampling.

    A response's perplexity depends only on ``pi(y|x)`` and its token count,
    so no factorization into conditionals is needed.
    """
    lengths = response_lengths(vocab) + 1.0
    out = []
    for row in policy.rows:
        if row.size != lengths.size:
            raise ContractError(f"policy row has {row.size} entries, vocabulary has {lengths.size} responses")
        pos = row > 0
        out.append(float(row[pos] @ _perplexity_from_logs(np.log(row[pos]), lengths[pos])))
    return float(np.mean(out))


def avg_length(responses) -> float:
    """Mean number of content tokens (EOS excluded) in sampled responses."""
    responses = list(responses)
    if not responses:
        raise ContractError("avg_length needs a nonempty sample")
    return float(np.mean([len(y) - 1 for y in responses]))


def expected_length(policy: TabularPolicy, vocab) -> float:
    """Exact ``E_x E_{y ~ pi} [content tokens]`` over enumerated responses."""
    lengths = response_lengths(vocab)
    return float(np.mean([row @ lengths for row in policy.rows]))


def win_rate(policy: TabularPolicy, rewards: RewardTable, beta: float = 1.0) -> float:
    """Share of unordered pairs on which policy and reward prefer the same side.

    Pairs are weighted uniformly within a prompt and prompts uniformly.
    """
    check_same_shape(policy, rewards, "policy", "rewards")
    rates = []
    for p, r in zip(policy.rows, rewards.rows):
        i, j = np.triu_indices(p.size, k=1)
        agree = np.sign(p[i] - p[j]) == np.sign((r[i] - r[j]) / beta)
        rates.append(float(agree.mean()))
    return float(np.mean(rates))


METRIC_COLUMNS = ("pm_divergence", "length", "perplexity", "entropy", "kl")


@dataclass(frozen=True)
class MetricsReport:
    pm_divergence: float
    length: float
    perplexity: float
    entropy: float
    kl: float
    n_sentinel: int = 0
    instances: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.pm_divergence < 0:
            raise ContractError("pm_divergence must be >= 0")
        if not math.isnan(self.perplexity) and self.perplexity < 1 - 1e-12:
            raise ContractError("perplexity must be >= 1")
        if self.kl < -1e-12:
            raise ContractError("kl must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("instances")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            writer.writerow([repr(float(getattr(self, c))) for c in METRIC_COLUMNS])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        with open(path, newline="", encoding="utf-8") as fh:
            (row,) = list(csv.DictReader(fh))
        return cls(**{c: float(row[c]) for c in METRIC_COLUMNS})
