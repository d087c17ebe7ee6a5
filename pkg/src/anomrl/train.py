"""End-to-end training drivers over the synthetic environment: supervised
warm start (delegated to ``grpo.train_sft``) and the group-relative RL loop
with reward scoring, advantage normalization, and single-step ascent.
"""

from __future__ import annotations

import json
import random
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import QuestionRecord
from .grpo import (
    Completion,
    GrpoConfig,
    RolloutGroup,
    grpo_objective_and_grad,
)
from .oracle import InProcessOracle
from .rewards import COMPONENTS, RewardConfig, score_response
from .simenv import (
    SyntheticVideo,
    ToyPolicy,
    build_context,
    observe,
    timeline,
)

__all__ = ["train_rl", "write_trace", "read_trace"]


def _rollout_group(
    policy: ToyPolicy,
    q: QuestionRecord,
    video: SyntheticVideo,
    oracle,
    taxonomy: Sequence[str],
    rcfg: RewardConfig,
    gcfg: GrpoConfig,
    rng: random.Random,
    budget: int,
) -> RolloutGroup:
    from .grammar import render_response

    features = observe(video, budget)
    context = build_context(policy.spec, features, q)
    tl = timeline(video)
    completions: List[Completion] = []
    for _ in range(gcfg.group_size):
        tokens, log_probs = policy.sample(context, rng)
        raw = render_response(policy.decode(context, tokens))
        breakdown = score_response(
            raw, q, taxonomy, rcfg, video=tl, oracle=oracle, rng=rng
        )
        completions.append(
            Completion(
                tokens=tuple(tokens),
                old_log_probs=log_probs,
                text=raw,
                breakdown=breakdown,
            )
        )
    group = RolloutGroup(question=q, context=context, completions=completions)
    group.populate_advantages(gcfg.std_floor)
    return group


def train_rl(
    policy: ToyPolicy,
    records: Sequence[QuestionRecord],
    videos: Mapping[str, SyntheticVideo],
    taxonomy: Sequence[str],
    rcfg: RewardConfig,
    gcfg: GrpoConfig,
    rng: random.Random,
    oracle=None,
    ref: Optional[ToyPolicy] = None,
    budget: int = 16,
) -> Tuple[ToyPolicy, List[dict]]:
    """Group-relative RL over the rl split.

    Each step samples one question, rolls out ``group_size`` completions
    under the current snapshot, scores them (including the temporal-evidence
    check through the oracle), normalizes advantages within the group, and
    takes one gradient-ascent step on the clipped KL-regularized objective.
    The old policy is the pre-step snapshot, so each step is exactly one
    update per rollout batch.
    """
    pool = [q for q in records if q.split == "rl"]
    if not pool:
        raise ValueError("no records in the rl split")
    if ref is None:
        ref = policy
    if oracle is None:
        # The verification re-query consults a frozen snapshot of the
        # starting policy, keeping the reward stationary across the run.
        oracle = InProcessOracle(policy, records, budget)
    # One optimization step consumes a minibatch of prompts, each rolled out
    # as its own group; gradients are averaged across groups.
    groups_per_step = max(1, gcfg.batch_size // gcfg.group_size)
    current = policy
    trace: List[dict] = []
    for step in range(gcfg.steps):
        groups = []
        for _ in range(groups_per_step):
            q = pool[rng.randrange(len(pool))]
            groups.append(_rollout_group(
                current, q, videos[q.video_id], oracle, taxonomy, rcfg, gcfg,
                rng, budget,
            ))
        value = 0.0
        grad = np.zeros(current.parameters().shape)
        for group in groups:
            v, g = grpo_objective_and_grad(group, current, current, ref, gcfg)
            value += v / len(groups)
            grad += g / len(groups)
        theta = current.parameters() + gcfg.learning_rate * grad
        current = current.with_parameters(theta)
        completions = [c for group in groups for c in group.completions]
        mean_rewards = {
            name: float(np.mean([getattr(c.breakdown, name) for c in completions]))
            for name in COMPONENTS
        }
        kl_vals = [
            current.kl_and_grad(group.context, c.tokens, ref)[0]
            for group in groups for c in group.completions
        ]
        trace.append({
            "step": step,
            "mean_total_reward": float(
                np.mean([c.breakdown.total for c in completions])
            ),
            "mean_rewards": mean_rewards,
            "loss": -value,
            "mean_output_length": float(
                np.mean([len(c.tokens) for c in completions])
            ),
            "kl": float(np.mean(kl_vals)),
        })
    return current, trace


def write_trace(path: str, trace: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_trace(path: str) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
