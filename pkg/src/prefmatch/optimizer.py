"""Exact-gradient ascent over softmax-parameterized tabular policies.

The objective ``E_x E_{y ~ pi} [r + R(pi)]`` is computed by exact summation, so
there is no sampling noise. Each prompt is an independent subproblem.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import log_softmax
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive, check_same_shape
from .exceptions import ContractError, OptimizerFailure
from .preference import RewardTable, TabularPolicy, pm_policy, total_variation
from .regularizers import (
    ConditionalPMRegularizer,
    FDivRegularizer,
    KLRegularizer,
    NoRegularizer,
    RefCalibratedEpsilon,
    RegularizerSpec,
    marginal_terms,
    prompt_objective,
)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Per-prompt logits; responses outside ``support`` have probability exactly zero."""

    logits: tuple[np.ndarray, ...]
    support: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        logits = tuple(np.array(z, dtype=float) for z in self.logits)
        support = self.support
        if support is None:
            support = tuple(np.ones(z.size, dtype=bool) for z in logits)
        support = tuple(np.array(s, dtype=bool) for s in support)
        for x, (z, s) in enumerate(zip(logits, support)):
            if z.shape != s.shape or not s.any():
                raise ContractError(f"bad support mask for prompt {x}")
            if not np.all(np.isfinite(z[s])):
                raise ContractError(f"logits for prompt {x} must be finite on the support")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "support", support)

    @property
    def num_prompts(self) -> int:
        return len(self.logits)

    def log_probabilities(self) -> tuple[np.ndarray, ...]:
        out = []
        for z, s in zip(self.logits, self.support):
            lp = np.full(z.size, -np.inf)
            lp[s] = log_softmax(z[s])
            out.append(lp)
        return tuple(out)

    def to_tabular(self) -> TabularPolicy:
        return TabularPolicy([np.exp(lp) for lp in self.log_probabilities()])


@dataclass(frozen=True)
class OptimizerConfig:
    """Gradient-ascent settings.

    ``method="natural"`` preconditions the logit gradient with the softmax
    Fisher metric, which contracts logit errors at a rate independent of how
    small the optimal probabilities are. ``method="vanilla"`` follows the plain
    logit gradient.
    """

    step_size: float = 0.5
    max_iter: int = 50_000
    tol: float = 1e-9
    init: Literal["zeros", "reference"] = "zeros"
    record_every: int = 1
    method: Literal["natural", "vanilla"] = "natural"
    armijo: float = 1e-4

    def __post_init__(self):
        check_positive(self.step_size, "step_size")
        check_positive(self.tol, "tol")
        if self.max_iter < 1 or self.record_every < 1:
            raise ContractError("max_iter and record_every must be >= 1")
        if self.init not in ("zeros", "reference"):
            raise ContractError(f"unknown init rule {self.init!r}")
        if self.method not in ("natural", "vanilla"):
            raise ContractError(f"unknown method {self.method!r}")


@dataclass
class OptimizeResult:
    policy: SoftmaxPolicy
    converged: np.ndarray
    n_iter: np.ndarray
    grad_norm: np.ndarray
    objective: float
    trajectory: list[tuple[int, int, float, float]] = field(repr=False)

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def _reference_of(spec):
    if isinstance(spec, (KLRegularizer, FDivRegularizer)):
        return spec.reference
    if isinstance(spec, ConditionalPMRegularizer) and isinstance(spec.epsilon, RefCalibratedEpsilon):
        return spec.epsilon.reference
    return None


def _support(spec, prompt: int, k: int) -> np.ndarray:
    if isinstance(spec, (KLRegularizer, FDivRegularizer)):
        return spec.reference[prompt] > 0
    if isinstance(spec, ConditionalPMRegularizer):
        leps = spec.epsilon.log_values(prompt, k)
        return spec.regular_set.masks[prompt] | np.isfinite(leps)
    return np.ones(k, dtype=bool)


def _full_log_probs(z: np.ndarray, support: np.ndarray) -> np.ndarray:
    lp = np.full(z.size, -np.inf)
    lp[support] = log_softmax(z[support])
    return lp


def _prompt_gradient(spec, x, r, support, log_p):
    p = np.exp(log_p)
    h = np.zeros_like(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        h[support] = (r + marginal_terms(spec, x, p, np.where(support, log_p, 0.0)))[support]
    centered = np.where(support, h - p @ h, 0.0)
    return p * centered, centered


def objective_gradient(policy: SoftmaxPolicy, rewards: RewardTable, spec: RegularizerSpec) -> tuple[np.ndarray, ...]:
    """Exact gradient of :func:`objective_value` with respect to every logit.

    Uses ``dJ/dz_j = pi_j (g_j - sum_i pi_i g_i)`` with
    ``g_i = r_i + R(pi_i) + pi_i R'(pi_i)``, divided by the number of prompts
    because the objective averages over prompts.
    """
    if policy.num_prompts != rewards.num_prompts:
        raise ContractError("policy and rewards disagree on the number of prompts")
    n = rewards.num_prompts
    grads = []
    for x, (r, s, lp) in enumerate(zip(rewards.rows, policy.support, policy.log_probabilities())):
        if r.size != s.size:
            raise ContractError(f"prompt {x}: {s.size} logits for {r.size} rewards")
        g, _ = _prompt_gradient(spec, x, r, s, lp)
        grads.append(g / n)
    return tuple(grads)


def _initial_logits(spec, config: OptimizerConfig, prompt: int, k: int, support: np.ndarray) -> np.ndarray:
    if config.init == "zeros":
        return np.zeros(k)
    ref = _reference_of(spec)
    if ref is None:
        raise ContractError("init='reference' needs a regularizer that carries a reference policy")
    z = np.zeros(k)
    z[support] = np.log(ref[prompt][support])
    return z - z[support][0]


def _optimize_prompt(spec, x, r, config: OptimizerConfig, trajectory):
    k = r.size
    support = _support(spec, x, k)
    z = _initial_logits(spec, config, x, k, support)
    anchor = int(np.flatnonzero(support)[0])

    def objective(log_p):
        return prompt_objective(spec, x, np.exp(log_p), log_p, r)

    log_p = _full_log_probs(z, support)
    value = objective(log_p)
    converged = False
    it = 0
    gnorm = math.inf
    while True:
        grad, centered = _prompt_gradient(spec, x, r, support, log_p)
        gnorm = float(np.linalg.norm(grad))
        if not (math.isfinite(value) and math.isfinite(gnorm)):
            raise OptimizerFailure(f"prompt {x}: non-finite objective or gradient at iteration {it}")
        if it % config.record_every == 0:
            trajectory.append((x, it, value, gnorm))
        if gnorm <= config.tol:
            converged = True
            break
        if it >= config.max_iter:
            break
        direction = centered if config.method == "natural" else grad
        direction = np.where(support, direction - direction[anchor], 0.0)
        slope = float(grad @ direction)
        noise = 64 * np.finfo(float).eps * (1.0 + abs(value))
        t = config.step_size
        while True:
            z_new = z + t * direction
            lp_new = _full_log_probs(z_new, support)
            v_new = objective(lp_new)
            if v_new >= value + config.armijo * t * slope - noise:
                break
            t *= 0.5
            if t < 1e-20 * config.step_size:
                # no representable ascent left; stop without claiming convergence
                if it % config.record_every != 0:
                    trajectory.append((x, it, value, gnorm))
                return z, support, False, it, gnorm, value
        z, log_p, value = z_new, lp_new, v_new
        it += 1
    if it % config.record_every != 0:
        trajectory.append((x, it, value, gnorm))
    return z, support, converged, it, gnorm, value


def optimize(rewards: RewardTable, spec: RegularizerSpec, config: OptimizerConfig | None = None) -> OptimizeResult:
    """Maximize ``E_x E_{y ~ pi} [r + R(pi)]`` by backtracking gradient ascent on logits.

    Every accepted step satisfies an Armijo sufficient-increase test (up to a
    few ulps of the objective), so the recorded objective is nondecreasing.
    """
    config = config or OptimizerConfig()
    logits, supports, conv, iters, norms, values = [], [], [], [], [], []
    trajectory: list[tuple[int, int, float, float]] = []
    for x, r in enumerate(rewards.rows):
        z, s, c, it, g, v = _optimize_prompt(spec, x, r, config, trajectory)
        logits.append(z)
        supports.append(s)
        conv.append(c)
        iters.append(it)
        norms.append(g)
        values.append(v)
    return OptimizeResult(
        policy=SoftmaxPolicy(tuple(logits), tuple(supports)),
        converged=np.array(conv),
        n_iter=np.array(iters),
        grad_norm=np.array(norms),
        objective=float(np.mean(values)),
        trajectory=trajectory,
    )


TRAJECTORY_COLUMNS = ("prompt", "iteration", "objective", "grad_norm")


def write_trajectory_csv(trajectory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for x, it, obj, g in trajectory:
            writer.writerow([x, it, repr(float(obj)), repr(float(g))])


@dataclass(frozen=True)
class PMTestResult:
    passed: bool
    tv: np.ndarray
    result: OptimizeResult = field(repr=False)


def pm_property_test(
    rewards: RewardTable, spec: RegularizerSpec, config: OptimizerConfig | None = None, *, tol: float = 1e-4
) -> PMTestResult:
    """Optimize under ``spec`` and check whether the optimum is the preference-matching policy."""
    result = optimize(rewards, spec, config)
    tv = total_variation(result.policy.to_tabular(), pm_policy(rewards))
    return PMTestResult(bool(np.all(tv <= tol)), tv, result)


def as_reward_table(rewards) -> RewardTable:
    return rewards if isinstance(rewards, RewardTable) else RewardTable(rewards)


class PolicyOptimizer(BaseEstimator):
    """Estimator wrapper around :func:`optimize`.

    ``fit`` takes a reward table (or anything :class:`RewardTable` accepts) and
    learns the regularized-optimal policy; ``predict_proba`` returns its rows.

    Examples
    --------
    >>> import numpy as np
    >>> from prefmatch.regularizers import PMRegularizer
    >>> est = PolicyOptimizer(regularizer=PMRegularizer()).fit([[np.log(6), np.log(3), 0.0]])
    >>> np.round(est.predict_proba()[0], 6)
    array([0.6, 0.3, 0.1])
    """

    def __init__(
        self,
        regularizer=None,
        step_size=0.5,
        max_iter=50_000,
        tol=1e-9,
        init="zeros",
        method="natural",
        record_every=1,
    ):
        self.regularizer = regularizer
        self.step_size = step_size
        self.max_iter = max_iter
        self.tol = tol
        self.init = init
        self.method = method
        self.record_every = record_every

    def _config(self) -> OptimizerConfig:
        return OptimizerConfig(
            step_size=self.step_size,
            max_iter=self.max_iter,
            tol=self.tol,
            init=self.init,
            record_every=self.record_every,
            method=self.method,
        )

    def fit(self, rewards, y=None):
        rewards = as_reward_table(rewards)
        spec = self.regularizer if self.regularizer is not None else NoRegularizer()
        result = optimize(rewards, spec, self._config())
        self.result_ = result
        self.logits_ = result.policy.logits
        self.policy_ = result.policy.to_tabular()
        self.converged_ = result.converged
        self.n_iter_ = result.n_iter
        self.trajectory_ = result.trajectory
        self.n_prompts_ = rewards.num_prompts
        return self

    def predict_proba(self, prompts=None):
        check_is_fitted(self, "policy_")
        idx = range(self.n_prompts_) if prompts is None else prompts
        rows = [self.policy_[int(x)] for x in idx]
        if len({r.size for r in rows}) == 1:
            return np.vstack(rows)
        return rows

    def predict(self, prompts=None):
        """Most probable response per prompt."""
        check_is_fitted(self, "policy_")
        idx = range(self.n_prompts_) if prompts is None else prompts
        return np.array([int(np.argmax(self.policy_[int(x)])) for x in idx])

    def score(self, rewards, y=None):
        """Regularized objective of the fitted policy on ``rewards``."""
        from .regularizers import objective_value

        check_is_fitted(self, "policy_")
        rewards = as_reward_table(rewards)
        check_same_shape(self.policy_, rewards, "policy", "rewards")
        spec = self.regularizer if self.regularizer is not None else NoRegularizer()
        return objective_value(self.policy_, rewards, spec)
