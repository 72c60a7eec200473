"""Toy autoregressive policies over an enumerable space of token sequences.

Token ``V - 1`` is end-of-sequence (EOS); tokens ``0 .. V - 2`` are content.
A response is a tuple of content tokens followed by EOS, with at most ``L``
tokens in total. At position ``L - 1`` EOS is forced with probability one.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, log_softmax

from ._validation import check_positive
from .exceptions import ConfigError, ContractError, DomainError, GenerationError, ThresholdError
from .optimizer import OptimizerConfig, OptimizeResult, optimize
from .preference import RewardTable, TabularPolicy, sample_distinct_pairs
from .regularizers import RegularizerSpec, RegularSet

MAX_RESPONSES = 1_000_000
N_BINS = 20


@dataclass(frozen=True)
class Vocabulary:
    size: int
    max_length: int

    def __post_init__(self):
        if int(self.size) < 2 or int(self.max_length) < 1:
            raise ConfigError([("vocab", f"need V >= 2 and L >= 1, got V={self.size}, L={self.max_length}")])
        count = self.num_responses
        if count > MAX_RESPONSES:
            raise ConfigError([("vocab", f"{count} responses exceed the enumeration bound {MAX_RESPONSES}")])

    @property
    def eos(self) -> int:
        return self.size - 1

    @property
    def num_responses(self) -> int:
        return sum((self.size - 1) ** (ell - 1) for ell in range(1, self.max_length + 1))


@lru_cache(maxsize=64)
def _enumerate(V: int, L: int) -> tuple[tuple[int, ...], ...]:
    eos = V - 1
    out = []
    for n in range(L):
        out.extend(prefix + (eos,) for prefix in itertools.product(range(V - 1), repeat=n))
    return tuple(sorted(out))


def enumerate_responses(vocab: Vocabulary) -> list[tuple[int, ...]]:
    """All EOS-terminated sequences of length ``<= L`` in lexicographic order."""
    return list(_enumerate(vocab.size, vocab.max_length))


def num_contexts(vocab: Vocabulary, order: int) -> int:
    return sum((vocab.size - 1) ** j for j in range(order + 1))


def context_index(context: tuple[int, ...], vocab: Vocabulary) -> int:
    """Row of a conditional table for a truncated content history."""
    base = vocab.size - 1
    offset = sum(base**j for j in range(len(context)))
    code = 0
    for tok in context:
        code = code * base + tok
    return offset + code


@lru_cache(maxsize=64)
def _token_index(V: int, L: int, order: int):
    """Per-response ``(context row, token, free)`` arrays padded to length ``L``.

    ``free`` is False on padding and on the forced EOS at position ``L - 1``.
    """
    vocab = Vocabulary(V, L)
    responses = _enumerate(V, L)
    R = len(responses)
    ctx = np.zeros((R, L), dtype=np.int64)
    tok = np.zeros((R, L), dtype=np.int64)
    free = np.zeros((R, L), dtype=bool)
    for n, y in enumerate(responses):
        for t, token in enumerate(y):
            hist = y[max(0, t - order) : t] if order > 0 else ()
            ctx[n, t] = context_index(tuple(hist), vocab)
            tok[n, t] = token
            free[n, t] = t < L - 1
    for a in (ctx, tok, free):
        a.setflags(write=False)
    return ctx, tok, free


@dataclass(frozen=True, eq=False)
class AutoregressivePolicy:
    """Per-prompt next-token tables of shape ``(num_contexts, V)``.

    A context is the last ``min(order, t)`` content tokens before position ``t``.
    """

    vocab: Vocabulary
    order: int
    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.order < 0:
            raise ContractError("order must be >= 0")
        shape = (num_contexts(self.vocab, self.order), self.vocab.size)
        tables = []
        for x, t in enumerate(self.tables):
            t = np.array(t, dtype=float)
            if t.shape != shape:
                raise ContractError(f"table {x} has shape {t.shape}, expected {shape}")
            if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
                raise ContractError(f"table {x}: conditional rows must be nonnegative and sum to 1")
            t.setflags(write=False)
            tables.append(t)
        object.__setattr__(self, "tables", tuple(tables))

    @property
    def num_prompts(self) -> int:
        return len(self.tables)

    @classmethod
    def uniform(cls, vocab: Vocabulary, num_prompts: int = 1, order: int = 1) -> "AutoregressivePolicy":
        shape = (num_contexts(vocab, order), vocab.size)
        return cls(vocab, order, tuple(np.full(shape, 1.0 / vocab.size) for _ in range(num_prompts)))

    @classmethod
    def random(
        cls, vocab: Vocabulary, rng: np.random.Generator, num_prompts: int = 1, order: int = 1, concentration: float = 1.0
    ) -> "AutoregressivePolicy":
        """Dirichlet conditionals; large ``concentration`` gives near-uniform rows."""
        check_positive(concentration, "concentration")
        n = num_contexts(vocab, order)
        alpha = np.full(vocab.size, concentration)
        tables = []
        for _ in range(num_prompts):
            t = rng.dirichlet(alpha, size=n)
            tables.append(t / t.sum(axis=1, keepdims=True))
        return cls(vocab, order, tuple(tables))


def _check_response(response, vocab: Vocabulary) -> tuple[int, ...]:
    y = tuple(int(t) for t in response)
    if not y or y[-1] != vocab.eos:
        raise ContractError(f"response {y} must end with EOS={vocab.eos}")
    if len(y) > vocab.max_length:
        raise ContractError(f"response {y} is longer than L={vocab.max_length}")
    if any(t < 0 or t >= vocab.eos for t in y[:-1]):
        raise ContractError(f"response {y} has an invalid token before EOS")
    return y


def token_log_probs(policy: AutoregressivePolicy, prompt: int, response) -> np.ndarray:
    """Log-probability of each token of ``response``, EOS included (forced EOS gives 0)."""
    vocab = policy.vocab
    y = _check_response(response, vocab)
    table = policy.tables[prompt]
    out = np.zeros(len(y))
    with np.errstate(divide="ignore"):
        for t, tok in enumerate(y):
            if t == vocab.max_length - 1:
                continue
            hist = y[max(0, t - policy.order) : t] if policy.order > 0 else ()
            out[t] = np.log(table[context_index(tuple(hist), vocab), tok])
    return out


def seq_log_prob(policy: AutoregressivePolicy, prompt: int, response) -> float:
    """``log pi(y|x)`` as the sum of conditional token log-probabilities."""
    return float(token_log_probs(policy, prompt, response).sum())


def response_log_probs(policy: AutoregressivePolicy, prompt: int) -> np.ndarray:
    """Log-probabilities of every enumerated response, in enumeration order."""
    ctx, tok, free = _token_index(policy.vocab.size, policy.vocab.max_length, policy.order)
    with np.errstate(divide="ignore"):
        logt = np.log(policy.tables[prompt])
    vals = np.where(free, logt[ctx, tok], 0.0)
    return vals.sum(axis=1)


def flatten_to_tabular(policy: AutoregressivePolicy, vocab: Vocabulary | None = None, prompt: int = 0) -> TabularPolicy:
    """One-prompt :class:`TabularPolicy` over the enumerated responses."""
    if vocab is not None and vocab != policy.vocab:
        raise ContractError("vocabulary does not match the policy")
    return TabularPolicy([np.exp(response_log_probs(policy, prompt))], atol=1e-9)


def flatten_all(policy: AutoregressivePolicy) -> TabularPolicy:
    return TabularPolicy([np.exp(response_log_probs(policy, x)) for x in range(policy.num_prompts)], atol=1e-9)


def response_lengths(vocab: Vocabulary) -> np.ndarray:
    """Content-token counts (EOS excluded) in enumeration order."""
    return np.array([len(y) - 1 for y in _enumerate(vocab.size, vocab.max_length)])


def fit_autoregressive(rows, vocab: Vocabulary, order: int) -> AutoregressivePolicy:
    """Moment-matched conditional tables for target distributions over responses.

    Each conditional row is the target mass flowing through that context,
    normalized. Contexts the target never reaches get uniform rows. The fit
    is exact when ``order >= L - 1``.
    """
    ctx, tok, free = _token_index(vocab.size, vocab.max_length, order)
    n_ctx = num_contexts(vocab, order)
    tables = []
    for row in rows.rows if isinstance(rows, TabularPolicy) else rows:
        row = np.asarray(row, dtype=float)
        if row.size != ctx.shape[0]:
            raise ContractError(f"row has {row.size} entries, expected {ctx.shape[0]} responses")
        counts = np.zeros((n_ctx, vocab.size))
        w = np.broadcast_to(row[:, None], ctx.shape)
        np.add.at(counts, (ctx[free], tok[free]), w[free])
        total = counts.sum(axis=1, keepdims=True)
        safe = np.where(total > 0, total, 1.0)
        t = np.where(total > 0, counts / safe, 1.0 / vocab.size)
        t = t / t.sum(axis=1, keepdims=True)
        tables.append(t)
    return AutoregressivePolicy(vocab, order, tuple(tables))


# --------------------------------------------------------------------------
# Preference collapse
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CollapseHistogram:
    edges: np.ndarray
    count_ref: np.ndarray
    count_reward: np.ndarray
    p_ref: np.ndarray
    p_reward: np.ndarray

    @property
    def extreme_mass(self) -> float:
        """Fraction of pairs with ``p_ref`` in ``[0, 0.05) U (0.95, 1]``."""
        return float(np.mean((self.p_ref < 0.05) | (self.p_ref > 0.95)))

    @property
    def middle_mass(self) -> float:
        """Fraction of pairs with ``p_ref`` in ``[0.45, 0.55]``."""
        return float(np.mean((self.p_ref >= 0.45) & (self.p_ref <= 0.55)))

    @property
    def extremity_gap(self) -> float:
        return self.extreme_mass - self.middle_mass


HISTOGRAM_COLUMNS = ("bin_lo", "bin_hi", "count_ref", "count_reward")


def _as_reward_rows(rewards, num_prompts):
    if isinstance(rewards, RewardTable):
        return rewards.rows
    arr = np.asarray(rewards, dtype=float)
    if arr.ndim == 1:
        return tuple(arr for _ in range(num_prompts))
    return tuple(arr)


def collapse_histogram(reference, rewards, pairs: int, seed, *, beta: float = 1.0, bins: int = N_BINS) -> CollapseHistogram:
    """Histogram of ``p_ref(y1 | y1, y2, x)`` over sampled response pairs.

    Prompts are uniform and the two responses are independent draws from the
    reference, redrawn until distinct. The reward histogram bins
    ``sigma((r1 - r2) / beta)`` for the same pairs.
    """
    beta = check_positive(beta, "beta")
    flat = flatten_all(reference) if isinstance(reference, AutoregressivePolicy) else reference
    rows = _as_reward_rows(rewards, flat.num_prompts)
    rng = np.random.default_rng(seed)
    prompts = rng.integers(0, flat.num_prompts, size=int(pairs))
    p_ref = np.empty(prompts.size)
    p_rew = np.empty(prompts.size)
    for x in range(flat.num_prompts):
        idx = np.flatnonzero(prompts == x)
        p = flat[x]
        if np.count_nonzero(p > 0) < 2:
            raise GenerationError(f"reference has fewer than 2 responses with positive mass for prompt {x}")
        a, b = sample_distinct_pairs(rng, p, idx.size)
        p_ref[idx] = p[a] / (p[a] + p[b])
        r = rows[x]
        p_rew[idx] = expit((r[a] - r[b]) / beta)
    edges = np.linspace(0.0, 1.0, bins + 1)
    c_ref, _ = np.histogram(p_ref, bins=edges)
    c_rew, _ = np.histogram(p_rew, bins=edges)
    return CollapseHistogram(edges, c_ref, c_rew, p_ref, p_rew)


def write_histogram_csv(hist: CollapseHistogram, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTOGRAM_COLUMNS)
        for lo, hi, a, b in zip(hist.edges[:-1], hist.edges[1:], hist.count_ref, hist.count_reward):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])


def read_histogram_csv(path):
    """Return ``(edges, count_ref, count_reward)`` from a histogram CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    lo = [float(r["bin_lo"]) for r in rows]
    edges = np.array(lo + [float(rows[-1]["bin_hi"])])
    return edges, np.array([int(r["count_ref"]) for r in rows]), np.array([int(r["count_reward"]) for r in rows])


# --------------------------------------------------------------------------
# Conditional PM on sequences
# --------------------------------------------------------------------------


def regular_set_from_threshold(
    reference: AutoregressivePolicy, vocab: Vocabulary | None, alpha: float, *, length_normalized: bool = False
) -> RegularSet:
    """``M(x) = {y : pi_ref(y|x) >= alpha}`` over enumerated responses.

    With ``length_normalized=True`` (an extension) the per-token geometric mean
    ``pi_ref(y|x) ** (1 / |y|)`` is thresholded instead, with ``|y|`` counting EOS.
    """
    flat = flatten_all(reference)
    if not length_normalized:
        return RegularSet.from_threshold(flat, alpha)
    lengths = response_lengths(reference.vocab) + 1
    masks = []
    cut = alpha if alpha > 0 else np.nextafter(0.0, 1.0)
    for x, row in enumerate(flat.rows):
        m = row ** (1.0 / lengths) >= cut
        if not m.any():
            raise ThresholdError(f"alpha={alpha} exceeds every per-token geometric mean for prompt {x}")
        masks.append(m)
    return RegularSet(tuple(masks), {"kind": "threshold_length_normalized", "alpha": float(alpha)})


def centered_rewards(rewards: RewardTable, reference: TabularPolicy) -> RewardTable:
    """Subtract the unconditional mean ``E_x E_{pi_ref}[r]`` from every reward."""
    mean = float(np.mean([p @ r for p, r in zip(reference.rows, rewards.rows)]))
    return rewards.shifted(-mean)


def conditional_pm_objective_seq(policy, reference, rewards: RewardTable, alpha: float) -> float:
    """``E_x E_{y ~ pi}[r - log pi 1(pi_ref >= alpha) - log(pi / pi_ref) 1(pi_ref < alpha)]``.

    Rewards are first centered by their unconditional mean under the reference.
    An ``alpha`` above every reference probability is allowed here and gives the
    KL objective with ``beta = 1``.
    """
    pol = flatten_all(policy) if isinstance(policy, AutoregressivePolicy) else policy
    ref = flatten_all(reference) if isinstance(reference, AutoregressivePolicy) else reference
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    cut = alpha if alpha > 0 else np.nextafter(0.0, 1.0)
    r = centered_rewards(rewards, ref)
    vals = []
    for x, (p, q, rr) in enumerate(zip(pol.rows, ref.rows, r.rows)):
        if p.size != q.size or p.size != rr.size:
            raise ContractError(f"prompt {x}: policy, reference and rewards disagree on response count")
        regular = q >= cut
        pos = p > 0
        if np.any(pos & (q <= 0)):
            raise DomainError(f"policy puts mass where the reference is zero (prompt {x})")
        lp = np.log(np.where(pos, p, 1.0))
        lq = np.log(np.where(pos, q, 1.0))
        pen = np.where(regular, lp, lp - lq)
        vals.append(float(np.sum(np.where(pos, p * (rr - pen), 0.0))))
    return float(np.mean(vals))


def optimize_sequence_policy(
    rewards: RewardTable,
    spec: RegularizerSpec,
    vocab: Vocabulary,
    order: int,
    config: OptimizerConfig | None = None,
) -> tuple[AutoregressivePolicy, OptimizeResult]:
    """Optimize over the enumerated response space, then refit token tables.

    The refit reproduces the tabular optimum exactly when ``order >= L - 1``.
    """
    result = optimize(rewards, spec, config)
    return fit_autoregressive(result.policy.to_tabular(), vocab, order), result


def restricted_softmax(rewards: RewardTable, regular_set: RegularSet) -> TabularPolicy:
    """Softmax of the rewards restricted to ``M(x)``, zero outside."""
    rows = []
    for r, m in zip(rewards.rows, regular_set.masks):
        out = np.zeros(r.size)
        out[m] = np.exp(log_softmax(r[m]))
        rows.append(out)
    return TabularPolicy(rows)
