"""Analytic optimal policies and the binary-comparison bias formulas."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, log_softmax, logit

from ._validation import check_positive, check_probability, check_same_shape
from .exceptions import DomainError, UndefinedConditionalError
from .preference import RewardTable, TabularPolicy, pm_policy
from .regularizers import EpsilonRule, FDivergenceSpec, RegularSet


def _normalize_log(log_w: np.ndarray) -> np.ndarray:
    out = np.zeros_like(log_w)
    finite = np.isfinite(log_w)
    out[finite] = np.exp(log_softmax(log_w[finite]))
    return out


def kl_rlhf_solution(rewards: RewardTable, reference: TabularPolicy, beta: float) -> TabularPolicy:
    """``pi(y|x) ∝ pi_ref(y|x) exp(r(x, y) / beta)``; zero-reference responses stay at zero."""
    beta = check_positive(beta, "beta")
    check_same_shape(rewards, reference, "rewards", "reference")
    rows = []
    for r, lref in zip(rewards.rows, reference.log_rows()):
        rows.append(_normalize_log(lref + r / beta))
    return TabularPolicy(rows)


def pm_rlhf_solution(rewards: RewardTable) -> TabularPolicy:
    """Maximizer of the PM-regularized objective for any constants ``C1, C2``."""
    return pm_policy(rewards)


def conditional_pm_solution(rewards: RewardTable, regular_set: RegularSet, epsilon: EpsilonRule) -> TabularPolicy:
    """``pi(y|x) ∝ eps(x, y) exp(r(x, y))`` with ``eps = 1`` on the regular set."""
    if regular_set.responses_per_prompt != rewards.responses_per_prompt:
        raise DomainError("regular set and rewards disagree on response counts")
    rows = []
    for x, (r, mask) in enumerate(zip(rewards.rows, regular_set.masks)):
        leps = np.where(mask, 0.0, epsilon.log_values(x, r.size))
        rows.append(_normalize_log(r + leps))
    return TabularPolicy(rows)


def binary_rlhf_preference(p_ref: float, p_reward: float) -> float:
    """Pairwise preference of the KL-RLHF optimum given reference and reward preferences.

    ``p_ref * p_reward / (p_ref * p_reward + (1 - p_ref) * (1 - p_reward))``.
    """
    p_ref = check_probability(p_ref, "p_ref")
    p_reward = check_probability(p_reward, "p_reward")
    num = p_ref * p_reward
    den = num + (1.0 - p_ref) * (1.0 - p_reward)
    if den == 0.0:
        raise UndefinedConditionalError(f"0/0 at p_ref={p_ref}, p_reward={p_reward}")
    return num / den


@dataclass(frozen=True)
class FDivBinaryResult:
    p_rlhf: float
    p_reward_f: float
    optimum: float
    diagnostic: float
    clamped: bool


def _fdiv_binary_optimum(f_spec: FDivergenceSpec, r1: float, r2: float, beta: float, p_ref: float) -> float:
    """Brute-force maximizer ``pi_1`` of ``E_pi[r] - beta D_f(pi || ref)`` on the 2-simplex."""
    ref = np.array([p_ref, 1.0 - p_ref])
    r = np.array([r1, r2])

    def neg_objective(p1):
        pi = np.array([p1, 1.0 - p1])
        with np.errstate(divide="ignore", invalid="ignore"):
            d_f = np.sum(ref * f_spec.f(pi / ref))
        val = -(pi @ r - beta * d_f)
        return val if np.isfinite(val) else np.inf

    grid = np.linspace(0.0, 1.0, 2001)
    vals = np.array([neg_objective(g) for g in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(neg_objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    best = res.x if res.fun <= vals[i] else grid[i]
    return float(best)


def f_div_binary_preference(f_spec: FDivergenceSpec, r1: float, r2: float, beta: float, p_ref: float) -> FDivBinaryResult:
    """Counterpart of the binary bias formula for an f-divergence regularizer.

    ``p_reward^f(y_i) ∝ (f')^{-1}(r_i / beta)`` is mixed with ``p_ref`` the same
    way as in the KL case. Negative ``(f')^{-1}`` values are clamped to zero and
    flagged. ``diagnostic`` is the total-variation distance between this formula
    and the brute-force maximizer of the f-divergence objective over the two
    responses, so callers can see where the formula is not exact.
    """
    beta = check_positive(beta, "beta")
    p_ref = check_probability(p_ref, "p_ref", open_left=True)
    if p_ref >= 1.0:
        raise DomainError("p_ref must be < 1 for a two-response reference")
    masses = np.asarray(f_spec.f_prime_inverse(np.array([r1, r2], dtype=float) / beta), dtype=float)
    clamped = bool(np.any(masses < 0))
    masses = np.clip(masses, 0.0, None)
    if masses.sum() <= 0:
        raise DomainError(f"degenerate f-divergence {f_spec.name!r}: both masses are <= 0")
    p_reward_f = float(masses[0] / masses.sum())
    num = p_ref * p_reward_f
    den = num + (1.0 - p_ref) * (1.0 - p_reward_f)
    if den == 0.0:
        raise UndefinedConditionalError("0/0 in f-divergence preference")
    p_rlhf = num / den
    optimum = _fdiv_binary_optimum(f_spec, float(r1), float(r2), beta, p_ref)
    return FDivBinaryResult(p_rlhf, p_reward_f, optimum, abs(p_rlhf - optimum), clamped)


@dataclass(frozen=True)
class BiasCurvePoint:
    beta: float
    p_ref: float
    p_reward: float
    p_rlhf: float

    def __post_init__(self):
        for name in ("p_ref", "p_reward", "p_rlhf"):
            check_probability(getattr(self, name), name)


def bias_curve(beta: float, p_ref: float, grid) -> list[BiasCurvePoint]:
    """Pairwise preference of the KL-RLHF optimum as a function of the reward preference.

    ``p_reward`` on the grid is the reward model's own preference
    ``sigma(r1 - r2)``. The aligned policy uses the rewards divided by ``beta``,
    so the reward-side preference entering the binary formula is
    ``sigma(logit(p_reward) / beta)``.
    """
    beta = check_positive(beta, "beta")
    p_ref = check_probability(p_ref, "p_ref")
    points = []
    for p in np.asarray(grid, dtype=float):
        p = check_probability(p, "p_reward")
        if 0.0 < p < 1.0:
            scaled = float(expit(logit(p) / beta))
        else:
            scaled = p
        points.append(BiasCurvePoint(beta, p_ref, p, binary_rlhf_preference(p_ref, scaled)))
    return points


BIAS_CURVE_COLUMNS = ("beta", "p_ref", "p_reward", "p_rlhf")


def write_bias_curve_csv(points, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BIAS_CURVE_COLUMNS)
        for pt in points:
            writer.writerow([repr(float(getattr(pt, c))) for c in BIAS_CURVE_COLUMNS])


def read_bias_curve_csv(path) -> list[BiasCurvePoint]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return [BiasCurvePoint(**{k: float(v) for k, v in row.items()}) for row in csv.DictReader(fh)]
