"""Regularizers ``R(pi)`` for reward maximization and the PM differential equation.

Every variant is an immutable spec object. Objective values are exact sums
over the finite response space, averaged uniformly over prompts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

from ._validation import check_index, check_positive, check_same_shape
from .exceptions import ClampWarning, ContractError, DomainError, ThresholdError
from .preference import RewardTable, TabularPolicy

PROB_FLOOR = 1e-300


# --------------------------------------------------------------------------
# f-divergences
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FDivergenceSpec:
    """A convex generator ``f`` with ``f(1) = 0``, its derivative and inverse derivative."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    f_prime: Callable[[np.ndarray], np.ndarray]
    f_prime_inverse: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if abs(float(self.f(np.array(1.0)))) > 1e-12:
            raise DomainError(f"f-divergence {self.name!r}: f(1) != 0")
        grid = np.geomspace(0.01, 10.0, 200)
        a, b = grid[:-1], grid[1:]
        mid = self.f((a + b) / 2)
        chord = (self.f(a) + self.f(b)) / 2
        if np.any(mid > chord + 1e-12 * (1 + np.abs(chord))):
            raise DomainError(f"f-divergence {self.name!r}: generator is not convex on (0.01, 10)")
        back = self.f_prime_inverse(self.f_prime(grid))
        if np.max(np.abs(back - grid) / grid) > 1e-9:
            raise DomainError(f"f-divergence {self.name!r}: f_prime_inverse does not invert f_prime")


def _kl_f(u):
    return xlogy(u, u)


def _hellinger_inv(v):
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(v < 1, 1.0 / (1.0 - v) ** 2, np.inf)


F_DIVERGENCES: dict[str, FDivergenceSpec] = {
    "kl": FDivergenceSpec("kl", _kl_f, lambda u: np.log(u) + 1.0, lambda v: np.exp(np.asarray(v) - 1.0)),
    "chi2": FDivergenceSpec("chi2", lambda u: (u - 1.0) ** 2, lambda u: 2.0 * (u - 1.0), lambda v: np.asarray(v) / 2.0 + 1.0),
    "reverse_kl": FDivergenceSpec("reverse_kl", lambda u: -np.log(u), lambda u: -1.0 / u, lambda v: -1.0 / np.asarray(v)),
    "hellinger": FDivergenceSpec(
        "hellinger", lambda u: (np.sqrt(u) - 1.0) ** 2, lambda u: 1.0 - 1.0 / np.sqrt(u), _hellinger_inv
    ),
}


# --------------------------------------------------------------------------
# Regular sets and epsilon rules
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegularSet:
    """Per-prompt membership masks ``M(x)`` over responses."""

    masks: tuple[np.ndarray, ...]
    rule: dict = field(default_factory=lambda: {"kind": "explicit"})

    def __post_init__(self):
        masks = []
        for x, m in enumerate(self.masks):
            m = np.array(m, dtype=bool)
            if m.ndim != 1 or not m.any():
                raise ThresholdError(f"regular set for prompt {x} is empty")
            m.setflags(write=False)
            masks.append(m)
        object.__setattr__(self, "masks", tuple(masks))

    @classmethod
    def from_members(cls, members, responses_per_prompt) -> "RegularSet":
        masks = []
        for idx, k in zip(members, responses_per_prompt):
            m = np.zeros(k, dtype=bool)
            m[list(idx)] = True
            masks.append(m)
        return cls(tuple(masks), {"kind": "explicit"})

    @classmethod
    def all_responses(cls, responses_per_prompt) -> "RegularSet":
        return cls(tuple(np.ones(k, dtype=bool) for k in responses_per_prompt), {"kind": "all"})

    @classmethod
    def from_threshold(cls, reference: TabularPolicy, alpha: float) -> "RegularSet":
        """``M(x) = {y : pi_ref(y|x) >= alpha}``; ``alpha = 0`` means the smallest positive float."""
        alpha = float(alpha)
        if alpha < 0:
            raise DomainError(f"alpha must be >= 0, got {alpha}")
        cut = alpha if alpha > 0 else np.nextafter(0.0, 1.0)
        masks = []
        for x, row in enumerate(reference.rows):
            m = row >= cut
            if not m.any():
                raise ThresholdError(
                    f"alpha={alpha} exceeds max reference probability {row.max()!r} for prompt {x}"
                )
            masks.append(m)
        return cls(tuple(masks), {"kind": "threshold", "alpha": alpha})

    @property
    def responses_per_prompt(self) -> tuple[int, ...]:
        return tuple(m.size for m in self.masks)


@dataclass(frozen=True)
class ConstantEpsilon:
    value: float

    def __post_init__(self):
        check_positive(self.value, "epsilon")

    def log_values(self, prompt: int, k: int) -> np.ndarray:
        return np.full(k, math.log(self.value))


@dataclass(frozen=True)
class RefCalibratedEpsilon:
    """``epsilon(x, y) = pi_ref(y|x)``."""

    reference: TabularPolicy

    def log_values(self, prompt: int, k: int) -> np.ndarray:
        row = self.reference[prompt]
        if row.size != k:
            raise ContractError(f"reference row {prompt} has {row.size} responses, expected {k}")
        with np.errstate(divide="ignore"):
            return np.log(row)


EpsilonRule = Union[ConstantEpsilon, RefCalibratedEpsilon]


# --------------------------------------------------------------------------
# Regularizer specs
# --------------------------------------------------------------------------


def _per_prompt(value, prompt: int) -> float:
    if np.ndim(value) == 0:
        return float(value)
    return float(np.asarray(value)[prompt])


@dataclass(frozen=True)
class NoRegularizer:
    tag = "none"


@dataclass(frozen=True, eq=False)
class PMRegularizer:
    """``R(pi) = -log pi + C1 + C2 / pi`` with per-prompt constants (scalars broadcast)."""

    c1: float | np.ndarray = 0.0
    c2: float | np.ndarray = 0.0
    tag = "pm"


@dataclass(frozen=True)
class KLRegularizer:
    reference: TabularPolicy
    beta: float = 1.0
    tag = "kl"

    def __post_init__(self):
        check_positive(self.beta, "beta")


@dataclass(frozen=True)
class FDivRegularizer:
    f_spec: FDivergenceSpec
    reference: TabularPolicy
    beta: float = 1.0
    tag = "fdiv"

    def __post_init__(self):
        check_positive(self.beta, "beta")


@dataclass(frozen=True)
class UniformPenalty:
    """``R(pi) = -log pi + log(1/k)``: KL to the uniform policy with ``beta = 1``."""

    tag = "uniform_penalty"


@dataclass(frozen=True, eq=False)
class ConditionalPMRegularizer:
    regular_set: RegularSet
    epsilon: EpsilonRule
    c1: float | np.ndarray = 0.0
    c2: float | np.ndarray = 0.0
    tag = "conditional_pm"


RegularizerSpec = Union[
    NoRegularizer, PMRegularizer, KLRegularizer, FDivRegularizer, UniformPenalty, ConditionalPMRegularizer
]

REGULARIZER_TAGS = ("none", "pm", "kl", "fdiv", "uniform_penalty", "conditional_pm")


def mean_zero_c1(rewards: RewardTable, reference: TabularPolicy, *, unconditional: bool = False):
    """``C1 = -E_{pi_ref}[r]``, per prompt or pooled over prompts."""
    check_same_shape(rewards, reference, "rewards", "reference")
    per_prompt = np.array([-(p @ r) for p, r in zip(reference.rows, rewards.rows)])
    if unconditional:
        return float(per_prompt.mean())
    return per_prompt


def _log_ref(reference: TabularPolicy, prompt: int, k: int) -> np.ndarray:
    row = reference[prompt]
    if row.size != k:
        raise ContractError(f"reference row {prompt} has {row.size} responses, expected {k}")
    with np.errstate(divide="ignore"):
        return np.log(row)


def marginal_terms(spec: RegularizerSpec, prompt: int, probs: np.ndarray, log_probs: np.ndarray) -> np.ndarray:
    """``R(pi_i) + pi_i R'(pi_i)`` for every response of one prompt.

    This is the derivative of ``sum_i pi_i R(pi_i)`` with respect to ``pi_i``.
    For f-divergences it is ``-beta f'(pi_i / pi_ref_i)``.
    """
    k = probs.size
    if isinstance(spec, NoRegularizer):
        return np.zeros(k)
    if isinstance(spec, PMRegularizer):
        return -log_probs + _per_prompt(spec.c1, prompt) - 1.0
    if isinstance(spec, KLRegularizer):
        lref = _log_ref(spec.reference, prompt, k)
        return -spec.beta * (log_probs - lref) - spec.beta
    if isinstance(spec, UniformPenalty):
        return -log_probs - math.log(k) - 1.0
    if isinstance(spec, ConditionalPMRegularizer):
        off = ~spec.regular_set.masks[prompt]
        leps = spec.epsilon.log_values(prompt, k)
        return -log_probs + np.where(off, leps, 0.0) + _per_prompt(spec.c1, prompt) - 1.0
    if isinstance(spec, FDivRegularizer):
        ref = spec.reference[prompt]
        return -spec.beta * spec.f_spec.f_prime(probs / ref)
    raise ContractError(f"unknown regularizer spec {type(spec).__name__}")


def prompt_objective(spec: RegularizerSpec, prompt: int, probs, log_probs, reward_row) -> float:
    """``sum_y pi(y|x) [r(x, y) + R(pi(y|x))]`` for a single prompt.

    Zero-probability responses contribute ``0 * log 0 = 0``; the ``C2 / pi`` term
    contributes exactly ``C2`` per response.
    """
    k = probs.size
    pos = probs > 0
    plogp = np.where(pos, probs * np.where(pos, log_probs, 0.0), 0.0)
    value = float(probs @ reward_row)
    if isinstance(spec, NoRegularizer):
        return value
    if isinstance(spec, PMRegularizer):
        return value - plogp.sum() + _per_prompt(spec.c1, prompt) + k * _per_prompt(spec.c2, prompt)
    if isinstance(spec, UniformPenalty):
        return value - plogp.sum() - math.log(k)
    if isinstance(spec, KLRegularizer):
        lref = _log_ref(spec.reference, prompt, k)
        if np.any(pos & np.isneginf(lref)):
            raise DomainError(f"policy puts mass where the reference is zero (prompt {prompt})")
        kl = np.where(pos, probs * (np.where(pos, log_probs, 0.0) - np.where(pos, lref, 0.0)), 0.0)
        return value - spec.beta * kl.sum()
    if isinstance(spec, ConditionalPMRegularizer):
        off = ~spec.regular_set.masks[prompt]
        leps = spec.epsilon.log_values(prompt, k)
        if np.any(pos & off & np.isneginf(leps)):
            raise DomainError(f"epsilon is zero on a response with positive mass (prompt {prompt})")
        shift = np.where(pos & off, probs * np.where(pos & off, leps, 0.0), 0.0)
        return (
            value
            - plogp.sum()
            + shift.sum()
            + _per_prompt(spec.c1, prompt)
            + k * _per_prompt(spec.c2, prompt)
        )
    if isinstance(spec, FDivRegularizer):
        ref = spec.reference[prompt]
        if ref.size != k:
            raise ContractError(f"reference row {prompt} has {ref.size} responses, expected {k}")
        if np.any(pos & (ref <= 0)):
            raise DomainError(f"policy puts mass where the reference is zero (prompt {prompt})")
        sup = ref > 0
        d_f = float(np.sum(ref[sup] * spec.f_spec.f(probs[sup] / ref[sup])))
        return value - spec.beta * d_f
    raise ContractError(f"unknown regularizer spec {type(spec).__name__}")


def objective_value(policy: TabularPolicy, rewards: RewardTable, spec: RegularizerSpec) -> float:
    """``E_x E_{y ~ pi(.|x)} [r(x, y) + R(pi(y|x))]`` with ``x`` uniform over prompts."""
    check_same_shape(policy, rewards, "policy", "rewards")
    logs = policy.log_rows()
    vals = [
        prompt_objective(spec, x, p, lp, r)
        for x, (p, lp, r) in enumerate(zip(policy.rows, logs, rewards.rows))
    ]
    return float(np.mean(vals))


def regularizer_value(
    spec: RegularizerSpec, prompt: int, response: int, pi_value: float, *, num_responses: int | None = None
) -> float:
    """Pointwise ``R(pi)`` for one (prompt, response) pair.

    ``num_responses`` is needed only by :class:`UniformPenalty`. A zero
    ``pi_value`` is clamped to ``1e-300`` and a :class:`ClampWarning` is issued.
    """
    pi_value = float(pi_value)
    if not (0.0 <= pi_value <= 1.0) or math.isnan(pi_value):
        raise DomainError(f"pi_value must be in (0, 1], got {pi_value}")
    if pi_value == 0.0:
        warnings.warn(f"pi=0 clamped to {PROB_FLOOR} (prompt {prompt}, response {response})", ClampWarning, stacklevel=2)
        pi_value = PROB_FLOOR
    log_pi = math.log(pi_value)

    if isinstance(spec, NoRegularizer):
        return 0.0
    if isinstance(spec, PMRegularizer):
        return -log_pi + _per_prompt(spec.c1, prompt) + _per_prompt(spec.c2, prompt) / pi_value
    if isinstance(spec, UniformPenalty):
        if num_responses is None:
            raise ContractError("UniformPenalty needs num_responses")
        return -log_pi - math.log(num_responses)
    if isinstance(spec, KLRegularizer):
        ref = spec.reference[prompt]
        response = check_index(response, ref.size, "response")
        if ref[response] <= 0:
            raise DomainError(f"reference probability is zero at ({prompt}, {response})")
        return -spec.beta * (log_pi - math.log(ref[response]))
    if isinstance(spec, ConditionalPMRegularizer):
        mask = spec.regular_set.masks[prompt]
        response = check_index(response, mask.size, "response")
        value = -log_pi + _per_prompt(spec.c1, prompt) + _per_prompt(spec.c2, prompt) / pi_value
        if not mask[response]:
            leps = spec.epsilon.log_values(prompt, mask.size)[response]
            if np.isneginf(leps):
                raise DomainError(f"epsilon is zero at ({prompt}, {response})")
            value += leps
        return float(value)
    if isinstance(spec, FDivRegularizer):
        raise ContractError("f-divergence regularizers have no pointwise form; use objective_value")
    raise ContractError(f"unknown regularizer spec {type(spec).__name__}")


# --------------------------------------------------------------------------
# PM differential equation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarRegularizer:
    """A scalar function ``R(pi)`` with optional analytic first and second derivatives."""

    name: str
    f: Callable
    df: Optional[Callable] = None
    d2f: Optional[Callable] = None

    def __call__(self, pi):
        return self.f(pi)


def pm_family_member(c1: float, c2: float) -> ScalarRegularizer:
    return ScalarRegularizer(
        f"-log(pi) + {c1:g} + {c2:g}/pi",
        lambda p: -np.log(p) + c1 + c2 / p,
        lambda p: -1.0 / p - c2 / p**2,
        lambda p: 1.0 / p**2 + 2.0 * c2 / p**3,
    )


NON_PM_REGULARIZERS: dict[str, ScalarRegularizer] = {
    "pi^2": ScalarRegularizer("pi^2", lambda p: p**2, lambda p: 2.0 * p, lambda p: 2.0 + 0.0 * p),
    "sqrt(pi)": ScalarRegularizer(
        "sqrt(pi)", np.sqrt, lambda p: 0.5 / np.sqrt(p), lambda p: -0.25 * p**-1.5
    ),
    "-pi*log(pi)": ScalarRegularizer(
        "-pi*log(pi)", lambda p: -p * np.log(p), lambda p: -np.log(p) - 1.0, lambda p: -1.0 / p
    ),
}


def pm_ode_residual(R, pi, *, fd_rel_step: float = 1e-5, finite_differences: bool = False):
    """``pi R''(pi) + 2 R'(pi) + 1/pi``; zero exactly for PM regularizers.

    ``R`` is a plain callable or a :class:`ScalarRegularizer`. Analytic
    derivatives are used when available; otherwise (or when
    ``finite_differences=True``) central differences with step
    ``h = fd_rel_step * pi`` are used.
    """
    pi = np.asarray(pi, dtype=float)
    if np.any((pi <= 0) | (pi >= 1)):
        raise DomainError("pi must lie strictly inside (0, 1)")
    df = getattr(R, "df", None)
    d2f = getattr(R, "d2f", None)
    if finite_differences or df is None or d2f is None:
        h = fd_rel_step * pi
        f_plus, f_mid, f_minus = R(pi + h), R(pi), R(pi - h)
        d1 = (f_plus - f_minus) / (2 * h)
        d2 = (f_plus - 2 * f_mid + f_minus) / h**2
    else:
        d1, d2 = df(pi), d2f(pi)
    return pi * d2 + 2 * d1 + 1.0 / pi


def stationarity_check(policy: TabularPolicy, rewards: RewardTable, spec: RegularizerSpec) -> float:
    """Largest deviation from the first-order optimality conditions.

    For each response computes ``r_i + R(pi_i) + pi_i R'(pi_i)`` and returns the
    maximum, over prompts and responses, of its distance from the row mean. The
    Lagrange multiplier of the simplex constraint cancels in the centering.
    """
    check_same_shape(policy, rewards, "policy", "rewards")
    worst = 0.0
    for x, (p, lp, r) in enumerate(zip(policy.rows, policy.log_rows(), rewards.rows)):
        if np.any(p <= 0):
            raise DomainError(f"stationarity_check needs a strictly positive policy (prompt {x})")
        v = r + marginal_terms(spec, x, p, lp)
        worst = max(worst, float(np.max(np.abs(v - v.mean()))))
    return worst


# --------------------------------------------------------------------------
# Fenchel duality of log-sum-exp
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DualityResult:
    gap: float
    maximum: float
    neg_entropy: float
    converged: bool
    iterations: int


def fenchel_duality_check(row, *, init=None, tol: float = 1e-10, max_iter: int = 500) -> DualityResult:
    """Maximize ``<d, pi> - logsumexp(d)`` numerically and compare with ``sum pi log pi``.

    Uses damped Newton ascent on ``d[1:]`` with ``d[0]`` held at its initial value
    (the objective is invariant to adding a constant to ``d``).
    """
    pi = np.asarray(row, dtype=float)
    if pi.ndim != 1 or pi.size < 2 or np.any(pi <= 0):
        raise DomainError("duality check needs a strictly positive probability row with k >= 2")
    if abs(pi.sum() - 1.0) > 1e-12:
        raise DomainError(f"row sums to {pi.sum()!r}, not 1")
    d = np.zeros_like(pi) if init is None else np.array(init, dtype=float)

    def value(v):
        return float(v @ pi - logsumexp(v))

    current = value(d)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s = softmax(d)
        grad = (pi - s)[1:]
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        s1 = s[1:]
        hess = np.diag(s1) - np.outer(s1, s1)
        step = np.linalg.solve(hess, grad)
        slope = float(grad @ step)
        t = 1.0
        while True:
            trial = d.copy()
            trial[1:] += t * step
            new = value(trial)
            if new >= current + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        d, current = trial, new
    neg_ent = float(np.sum(pi * np.log(pi)))
    return DualityResult(abs(current - neg_ent), current, neg_ent, converged, it)
