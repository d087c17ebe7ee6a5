"""Group-relative policy optimization core: advantage normalization, the
clipped KL-regularized objective, the supervised loss, and gradient checks.

Policies are behavioral contracts; toy policies expose flat parameter
vectors and analytic gradients so every loss here can be verified against
central finite differences.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from .data import QuestionRecord
from .rewards import RewardBreakdown

__all__ = [
    "Policy",
    "DifferentiablePolicy",
    "CategoricalSequencePolicy",
    "Completion",
    "RolloutGroup",
    "GrpoConfig",
    "SftBatch",
    "compute_advantages",
    "grpo_objective",
    "grpo_objective_and_grad",
    "sft_loss",
    "sft_loss_and_grad",
    "train_sft",
    "finite_diff_check",
]


class Policy(ABC):
    """Token-sequence policy contract. Snapshots are immutable."""

    @abstractmethod
    def sample(self, context: Any, rng) -> Tuple[List[int], np.ndarray]:
        """Sample a token sequence; returns (tokens, per-token log-probs)."""

    @abstractmethod
    def log_prob(self, context: Any, tokens: Sequence[int]) -> np.ndarray:
        """Per-token log-probabilities of ``tokens`` under this policy."""

    @abstractmethod
    def parameters(self) -> np.ndarray:
        """Flat copy of the parameter vector."""

    @abstractmethod
    def with_parameters(self, theta: np.ndarray) -> "Policy":
        """New immutable snapshot with the given parameters."""

    def step_distributions(self, context: Any, tokens: Sequence[int]):
        """Full per-step categorical distributions, when available.

        Returns a list of 1-D probability arrays (one per emitted token)
        or None when exact distributions are unavailable.
        """
        return None


class DifferentiablePolicy(Policy):
    """Policy with analytic gradients for the toy training losses."""

    @abstractmethod
    def grad_log_prob(self, context: Any, tokens: Sequence[int]) -> np.ndarray:
        """[T, P] array: gradient of each per-token log-prob wrt parameters."""

    @abstractmethod
    def kl_and_grad(self, context: Any, tokens: Sequence[int],
                    ref: "Policy") -> Tuple[float, np.ndarray]:
        """Exact per-step KL(self || ref) averaged over steps, with its
        gradient wrt this policy's parameters."""


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    clip_epsilon: float = 0.2
    kl_beta: float = 0.04
    learning_rate: float = 0.1
    steps: int = 500
    std_floor: float = 1e-8
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_beta < 0.0:
            raise ValueError("kl_beta must be >= 0")
        if self.std_floor <= 0.0:
            raise ValueError("std_floor must be > 0")


@dataclass(frozen=True)
class Completion:
    tokens: Tuple[int, ...]
    old_log_probs: np.ndarray
    text: str
    breakdown: RewardBreakdown


@dataclass
class RolloutGroup:
    question: QuestionRecord
    context: Any
    completions: List[Completion]
    advantages: Optional[np.ndarray] = None

    def populate_advantages(self, std_floor: float = 1e-8) -> None:
        rewards = [c.breakdown.total for c in self.completions]
        self.advantages = compute_advantages(rewards, std_floor)


@dataclass(frozen=True)
class SftBatch:
    context: Any
    targets: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.targets) < 1:
            raise ValueError("targets must be non-empty")


def compute_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """Within-group normalization: (r - mean) / max(population std, floor);
    an exactly zero-variance group yields all-zero advantages."""
    if len(rewards) < 2:
        raise ValueError("a group needs at least 2 rewards")
    r = np.asarray(rewards, dtype=float)
    std = float(r.std())
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / max(std, std_floor)


def _kl_estimate(new_lp: np.ndarray, ref_lp: np.ndarray) -> float:
    # Non-negative sampled estimator: exp(d) - d - 1 with d = ref_lp - new_lp.
    delta = ref_lp - new_lp
    return float(np.mean(np.exp(delta) - delta - 1.0))


def _exact_kl(p_steps, q_steps) -> float:
    total = 0.0
    for p, q in zip(p_steps, q_steps):
        mask = p > 0
        total += float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    return total / len(p_steps)


def _completion_kl(policy: Policy, ref: Policy, context, tokens,
                   new_lp: np.ndarray) -> float:
    p_steps = policy.step_distributions(context, tokens)
    q_steps = ref.step_distributions(context, tokens)
    if p_steps is not None and q_steps is not None:
        return _exact_kl(p_steps, q_steps)
    ref_lp = ref.log_prob(context, tokens)
    return _kl_estimate(new_lp, ref_lp)


def grpo_objective(group: RolloutGroup, new: Policy, old: Policy, ref: Policy,
                   cfg: GrpoConfig) -> float:
    """Clipped surrogate (token-mean, then group-mean) minus beta times the
    KL regularizer toward the reference policy. The training loss is -J."""
    if group.advantages is None:
        raise ValueError("group advantages not populated")
    eps = cfg.clip_epsilon
    surrogate = 0.0
    kl = 0.0
    for completion, adv in zip(group.completions, group.advantages):
        new_lp = new.log_prob(group.context, completion.tokens)
        old_lp = np.asarray(completion.old_log_probs, dtype=float)
        if new_lp.shape != old_lp.shape:
            raise ValueError("cached and re-evaluated token sequences disagree")
        ratio = np.exp(new_lp - old_lp)
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        per_token = np.minimum(ratio * adv, clipped * adv)
        surrogate += float(per_token.mean())
        if cfg.kl_beta > 0.0:
            kl += _completion_kl(new, ref, group.context, completion.tokens, new_lp)
    g = len(group.completions)
    return surrogate / g - cfg.kl_beta * (kl / g)


def grpo_objective_and_grad(
    group: RolloutGroup, new: DifferentiablePolicy, old: Policy,
    ref: Policy, cfg: GrpoConfig,
) -> Tuple[float, np.ndarray]:
    """Objective value and its analytic gradient wrt the new policy."""
    if group.advantages is None:
        raise ValueError("group advantages not populated")
    eps = cfg.clip_epsilon
    g = len(group.completions)
    grad = np.zeros_like(new.parameters())
    surrogate = 0.0
    kl = 0.0
    for completion, adv in zip(group.completions, group.advantages):
        new_lp = new.log_prob(group.context, completion.tokens)
        old_lp = np.asarray(completion.old_log_probs, dtype=float)
        if new_lp.shape != old_lp.shape:
            raise ValueError("cached and re-evaluated token sequences disagree")
        ratio = np.exp(new_lp - old_lp)
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        unclipped_term = ratio * adv
        per_token = np.minimum(unclipped_term, clipped * adv)
        surrogate += float(per_token.mean())
        # d/d logp of the min: rho*A where the unclipped branch is active
        # (the clip branch is flat in rho outside the trust region).
        active = unclipped_term <= clipped * adv
        coeff = np.where(active, unclipped_term, 0.0) / (len(completion.tokens) * g)
        lp_grads = new.grad_log_prob(group.context, completion.tokens)
        grad += coeff @ lp_grads
        if cfg.kl_beta > 0.0:
            kl_val, kl_grad = new.kl_and_grad(group.context, completion.tokens, ref)
            kl += kl_val
            grad -= cfg.kl_beta * kl_grad / g
    value = surrogate / g - cfg.kl_beta * (kl / g)
    return value, grad


def sft_loss(policy: Policy, batch: SftBatch) -> float:
    """Teacher-forced negative log-likelihood, summed over target tokens."""
    lp = policy.log_prob(batch.context, batch.targets)
    return float(-lp.sum())


def sft_loss_and_grad(policy: DifferentiablePolicy,
                      batch: SftBatch) -> Tuple[float, np.ndarray]:
    lp = policy.log_prob(batch.context, batch.targets)
    lp_grads = policy.grad_log_prob(batch.context, batch.targets)
    return float(-lp.sum()), -lp_grads.sum(axis=0)


def train_sft(policy: DifferentiablePolicy, batches: Sequence[SftBatch],
              cfg: GrpoConfig, rng) -> Tuple[Policy, List[dict]]:
    """Plain gradient descent on the mean supervised loss over minibatches."""
    if not batches:
        raise ValueError("empty SFT dataset")
    theta = policy.parameters()
    trace: List[dict] = []
    current = policy
    for step in range(cfg.steps):
        if len(batches) <= cfg.batch_size:
            batch = list(batches)
        else:
            batch = [batches[rng.randrange(len(batches))] for _ in range(cfg.batch_size)]
        grad = np.zeros_like(theta)
        loss = 0.0
        lengths = 0
        for item in batch:
            value, g = sft_loss_and_grad(current, item)
            loss += value
            grad += g
            lengths += len(item.targets)
        loss /= len(batch)
        grad /= len(batch)
        theta = theta - cfg.learning_rate * grad
        current = current.with_parameters(theta)
        trace.append({
            "step": step,
            "mean_total_reward": None,
            "mean_rewards": None,
            "loss": loss,
            "mean_output_length": lengths / len(batch),
            "kl": None,
        })
    return current, trace


def finite_diff_check(loss, grad, theta: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between central differences of ``loss`` and the
    analytic ``grad`` at ``theta``."""
    analytic = np.asarray(grad(theta), dtype=float)
    fd = np.zeros_like(analytic)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        hi, lo = loss(up), loss(down)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError("non-finite loss during finite-difference check")
        fd[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(fd - analytic) / denom))


class CategoricalSequencePolicy(DifferentiablePolicy):
    """Context-free sequence of categorical draws; small enough to enumerate.

    Parameters are the flattened [steps, vocab] logit matrix.
    """

    def __init__(self, logits: np.ndarray):
        logits = np.asarray(logits, dtype=float)
        if logits.ndim != 2:
            raise ValueError("logits must be [steps, vocab]")
        self._logits = logits.copy()
        self._logits.setflags(write=False)

    @property
    def steps(self) -> int:
        return self._logits.shape[0]

    @property
    def vocab(self) -> int:
        return self._logits.shape[1]

    def _log_probs(self) -> np.ndarray:
        z = self._logits - self._logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def sample(self, context, rng):
        lp = self._log_probs()
        probs = np.exp(lp)
        tokens = []
        out = np.zeros(self.steps)
        for t in range(self.steps):
            u = rng.random()
            k = int(np.searchsorted(np.cumsum(probs[t]), u, side="right"))
            k = min(k, self.vocab - 1)
            tokens.append(k)
            out[t] = lp[t, k]
        return tokens, out

    def log_prob(self, context, tokens):
        tokens = list(tokens)
        if len(tokens) != self.steps or any(not 0 <= k < self.vocab for k in tokens):
            raise ValueError("token sequence does not match the policy shape")
        lp = self._log_probs()
        return np.array([lp[t, k] for t, k in enumerate(tokens)])

    def parameters(self) -> np.ndarray:
        return self._logits.ravel().copy()

    def with_parameters(self, theta: np.ndarray) -> "CategoricalSequencePolicy":
        return CategoricalSequencePolicy(
            np.asarray(theta, dtype=float).reshape(self.steps, self.vocab)
        )

    def step_distributions(self, context, tokens):
        probs = np.exp(self._log_probs())
        return [probs[t] for t in range(self.steps)]

    def grad_log_prob(self, context, tokens):
        probs = np.exp(self._log_probs())
        out = np.zeros((self.steps, self.steps * self.vocab))
        for t, k in enumerate(tokens):
            row = -probs[t].copy()
            row[k] += 1.0
            out[t, t * self.vocab:(t + 1) * self.vocab] = row
        return out

    def kl_and_grad(self, context, tokens, ref: "CategoricalSequencePolicy"):
        p = np.exp(self._log_probs())
        q = np.exp(ref._log_probs())
        grad = np.zeros(self.steps * self.vocab)
        total = 0.0
        for t in range(self.steps):
            log_ratio = np.log(p[t]) - np.log(q[t])
            kl_t = float(np.sum(p[t] * log_ratio))
            total += kl_t
            grad[t * self.vocab:(t + 1) * self.vocab] = p[t] * (log_ratio - kl_t)
        return total / self.steps, grad / self.steps

    def enumerate_sequences(self):
        """All (tokens, probability) pairs under this policy."""
        probs = np.exp(self._log_probs())

        def rec(t, tokens, prob):
            if t == self.steps:
                yield tuple(tokens), prob
                return
            for k in range(self.vocab):
                yield from rec(t + 1, tokens + [k], prob * probs[t, k])

        yield from rec(0, [], 1.0)
