"""Two-stage rollout engine with judge-derived rewards and a clipped
surrogate loss.

For an instance (k1, k2): sample G summaries from the history prefix before k1,
pick one uniformly, sample G updated summaries from (picked summary, the
interactions from k1 up to k2). Each summary earns an immediate reward (the
judged probability of the true choice at its stage's target); the picked initial
additionally earns the discounted mean of its children's rewards. Advantages
normalize cumulative rewards within each G-sized rollout set, and the loss is
the token-level clipped surrogate averaged per sequence, then per batch.
"""

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._util import derive_seed, read_jsonl, write_jsonl
from .core import InteractionTriple, PreferenceSummary, UserHistory
from .curriculum import RlInstance
from .errors import ContractError, PipelineError, ValidationError
from .modelio import GenerationResult, ModelClient
from .prompts import render_generation_prompt, render_history_block

logger = logging.getLogger("prefpipe.rlengine")

EPS_STD = 1e-8


@dataclass(frozen=True)
class RolloutConfig:
    """Rollout and optimization settings. ``gamma`` has no default on purpose:
    the discount is an experiment-level choice the caller must state."""

    gamma: float
    group_size: int = 4
    clip_eps: float = 0.2
    future_credit: str = "selected"
    debias: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ValidationError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.group_size < 1:
            raise ValidationError(f"group_size must be >= 1, got {self.group_size}")
        if not (self.clip_eps > 0.0):
            raise ValidationError(f"clip_eps must be positive (math.inf disables clipping), got {self.clip_eps}")
        if self.future_credit not in ("selected", "all"):
            raise ValidationError(f"future_credit must be 'selected' or 'all', got {self.future_credit!r}")


@dataclass
class RewardedSummary:
    """One sampled summary plus its reward bookkeeping, filled in stage by stage."""

    summary: PreferenceSummary
    generation: GenerationResult
    stage: str
    sample_index: int
    immediate: float | None = None
    cumulative: float | None = None
    advantage: float | None = None


@dataclass
class RolloutTree:
    """One instance's full two-stage rollout: G initials, one selected, G updated."""

    instance: RlInstance
    initial: list[RewardedSummary]
    selected_index: int
    updated: list[RewardedSummary]

    @property
    def user_id(self) -> str:
        return self.instance.user_id

    def all_summaries(self) -> list[RewardedSummary]:
        return list(self.initial) + list(self.updated)

    def to_dict(self) -> dict:
        def enc(rs: RewardedSummary) -> dict:
            return {
                "stage": rs.stage,
                "sample_index": rs.sample_index,
                "prompt": rs.generation.prompt,
                "raw": rs.generation.raw,
                "summary": rs.summary.to_dict(),
                "token_logprobs": list(rs.generation.token_logprobs or []),
                "immediate": rs.immediate,
                "cumulative": rs.cumulative,
                "advantage": rs.advantage,
            }

        return {
            "user_id": self.user_id,
            "k1": self.instance.k1,
            "k2": self.instance.k2,
            "selected_index": self.selected_index,
            "initial": [enc(rs) for rs in self.initial],
            "updated": [enc(rs) for rs in self.updated],
        }


def rollout(policy: ModelClient, instance: RlInstance, history: UserHistory, config: RolloutConfig) -> RolloutTree:
    """Sample the two-stage tree for one instance. Sampling is deterministic in
    (config.seed, user, k1, k2, stage, sample) for seed-honoring backends."""
    inst = instance if instance.target1 is not None else instance.resolve(history)
    pos1 = history.position_of_index(inst.k1)
    pos2 = history.position_of_index(inst.k2)
    if pos1 < 1:
        raise ValidationError(f"instance ({inst.k1}, {inst.k2}) has an empty history prefix")
    if pos2 <= pos1:
        raise ValidationError(f"instance ({inst.k1}, {inst.k2}) has an empty update segment")

    prefix_prompt = render_generation_prompt(render_history_block(history.triples[:pos1]))
    initial = []
    for i in range(config.group_size):
        gen = policy.generate_summary(
            prefix_prompt,
            sample_seed=derive_seed(config.seed, "rollout", inst.user_id, inst.k1, inst.k2, "initial", i) % (2**31),
            meta={"user_id": inst.user_id, "stage": "initial", "sample": i},
        )
        summary = PreferenceSummary(text=gen.summary, reasoning=gen.reasoning, covers=(0, pos1))
        initial.append(RewardedSummary(summary=summary, generation=gen, stage="initial", sample_index=i))

    rng = random.Random(derive_seed(config.seed, "rollout-select", inst.user_id, inst.k1, inst.k2))
    selected_index = rng.randrange(config.group_size)
    selected = initial[selected_index]

    update_prompt = render_generation_prompt(
        render_history_block(history.triples[pos1:pos2]), past_text=selected.summary.text
    )
    updated = []
    for j in range(config.group_size):
        gen = policy.generate_summary(
            update_prompt,
            sample_seed=derive_seed(config.seed, "rollout", inst.user_id, inst.k1, inst.k2, "updated", j) % (2**31),
            meta={"user_id": inst.user_id, "stage": "updated", "sample": j},
        )
        summary = PreferenceSummary(
            text=gen.summary,
            reasoning=gen.reasoning,
            covers=(pos1, pos2),
            parent_id=selected.summary.summary_id,
        )
        updated.append(RewardedSummary(summary=summary, generation=gen, stage="updated", sample_index=j))

    return RolloutTree(instance=inst, initial=initial, selected_index=selected_index, updated=updated)


def immediate_reward(judge: ModelClient, summary: PreferenceSummary, target: InteractionTriple, config: RolloutConfig) -> float:
    """Debiased judge probability of the target's true choice under ``summary``."""
    if target is None or target.rejected is None:
        raise ContractError("reward target must be a full preference pair")
    verdict = judge.judge_pair(
        summary.text, target.context, target.chosen, target.rejected, debias=config.debias
    )
    return verdict.prob_first


def cumulative_rewards(
    initial_rewards: Sequence[float],
    updated_rewards: Sequence[float],
    selected_index: int,
    gamma: float,
    future_credit: str = "selected",
) -> tuple[list[float], list[float]]:
    """Fold stage-2 rewards back into stage 1.

    Updated summaries keep their immediate reward. The selected initial gets
    r + gamma * mean(updated rewards); the other initials keep r alone (their
    continuations were never sampled) unless ``future_credit="all"`` grants the
    same bonus to the whole group. gamma = 0 reduces every cumulative reward to
    its immediate reward exactly.
    """
    init = [float(r) for r in initial_rewards]
    upd = [float(r) for r in updated_rewards]
    if not init or not upd:
        raise ContractError("both reward groups must be non-empty")
    if not (0 <= selected_index < len(init)):
        raise ContractError(f"selected_index {selected_index} out of range for {len(init)} initials")
    if not (0.0 <= gamma <= 1.0):
        raise ValidationError(f"gamma must be in [0, 1], got {gamma}")
    if future_credit not in ("selected", "all"):
        raise ValidationError(f"future_credit must be 'selected' or 'all', got {future_credit!r}")
    future = gamma * (sum(upd) / len(upd))
    cum_init = [
        r + (future if (future_credit == "all" or i == selected_index) else 0.0)
        for i, r in enumerate(init)
    ]
    return cum_init, upd


def advantages(rewards: Sequence[float], eps_std: float = EPS_STD) -> np.ndarray:
    """Normalize one rollout set's rewards: (r - mean) / population std.
    Sets with (near-)zero variance get all-zero advantages."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError("advantages need a non-empty 1-d reward set")
    std = float(arr.std())
    if std <= eps_std:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / std


def score_tree(tree: RolloutTree, judge: ModelClient, config: RolloutConfig) -> RolloutTree:
    """Fill in immediate and cumulative rewards for every summary in the tree."""
    inst = tree.instance
    if inst.target1 is None or inst.target2 is None:
        raise ContractError("instance targets must be resolved before scoring")
    for rs in tree.initial:
        rs.immediate = immediate_reward(judge, rs.summary, inst.target1, config)
    for rs in tree.updated:
        rs.immediate = immediate_reward(judge, rs.summary, inst.target2, config)
    cum_init, cum_upd = cumulative_rewards(
        [rs.immediate for rs in tree.initial],
        [rs.immediate for rs in tree.updated],
        tree.selected_index,
        config.gamma,
        config.future_credit,
    )
    for rs, c in zip(tree.initial, cum_init):
        rs.cumulative = c
    for rs, c in zip(tree.updated, cum_upd):
        rs.cumulative = c
    return tree


@dataclass(frozen=True)
class TrainingRecord:
    """One exported training sequence with everything the optimizer needs."""

    user_id: str
    group_id: str
    stage: str
    prompt: str
    response: str
    old_token_logprobs: tuple[float, ...]
    advantage: float
    reward: float

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "group_id": self.group_id,
            "stage": self.stage,
            "prompt": self.prompt,
            "response": self.response,
            "old_token_logprobs": list(self.old_token_logprobs),
            "advantage": self.advantage,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingRecord":
        try:
            return cls(
                user_id=data["user_id"],
                group_id=data["group_id"],
                stage=data["stage"],
                prompt=data["prompt"],
                response=data["response"],
                old_token_logprobs=tuple(float(x) for x in data["old_token_logprobs"]),
                advantage=float(data["advantage"]),
                reward=float(data["reward"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad training record: {exc}") from exc


def export_batch(trees: Iterable[RolloutTree]) -> list[TrainingRecord]:
    """Turn scored trees into training records.

    Advantages are computed here, normalized within each rollout set (one
    group_id per set: a tree's initials share one, its updates another).
    """
    records = []
    for tree in trees:
        for stage, group in (("initial", tree.initial), ("updated", tree.updated)):
            group_id = f"{tree.user_id}:{tree.instance.k1}-{tree.instance.k2}:{stage}"
            cums = []
            for rs in group:
                if rs.cumulative is None:
                    raise ContractError(f"{group_id}: tree must be scored before export")
                cums.append(rs.cumulative)
            advs = advantages(cums)
            for rs, adv in zip(group, advs):
                rs.advantage = float(adv)
                if rs.generation.token_logprobs is None:
                    raise ContractError(f"{group_id}: backend reported no token logprobs; cannot export")
                if len(rs.generation.token_logprobs) == 0:
                    raise ContractError(f"{group_id}: empty token logprobs")
                records.append(
                    TrainingRecord(
                        user_id=tree.user_id,
                        group_id=group_id,
                        stage=stage,
                        prompt=rs.generation.prompt,
                        response=rs.generation.raw,
                        old_token_logprobs=tuple(rs.generation.token_logprobs),
                        advantage=float(adv),
                        reward=float(rs.cumulative),
                    )
                )
    return records


def surrogate_loss(
    records: Sequence[TrainingRecord],
    new_token_logprobs: Sequence[Sequence[float]],
    clip_eps: float = 0.2,
) -> float:
    """Clipped surrogate objective.

    Per token: min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A) with
    ratio = exp(new - old) and the sequence advantage broadcast to tokens.
    Token terms are averaged within a sequence, sequence terms across the batch,
    and the result negated (it is a loss). clip_eps = math.inf disables
    clipping.
    """
    if len(records) != len(new_token_logprobs):
        raise ContractError(
            f"batch size mismatch: {len(records)} records vs {len(new_token_logprobs)} logprob rows"
        )
    if not records:
        raise ContractError("cannot compute a loss over an empty batch")
    if not (clip_eps > 0.0):
        raise ValidationError(f"clip_eps must be positive, got {clip_eps}")
    total = 0.0
    for rec, new_row in zip(records, new_token_logprobs):
        old = np.asarray(rec.old_token_logprobs, dtype=np.float64)
        new = np.asarray(new_row, dtype=np.float64)
        if old.shape != new.shape:
            raise ContractError(
                f"record {rec.group_id}[{rec.stage}]: token count mismatch {old.shape} vs {new.shape}"
            )
        ratio = np.exp(new - old)
        if math.isinf(clip_eps):
            terms = ratio * rec.advantage
        else:
            clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
            terms = np.minimum(ratio * rec.advantage, clipped * rec.advantage)
        total += float(terms.mean())
    return -total / len(records)


def save_batch(path: str, records: Iterable[TrainingRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def load_batch(path: str) -> list[TrainingRecord]:
    return [TrainingRecord.from_dict(rec) for rec in read_jsonl(path)]


def run_rollouts(
    policy: ModelClient,
    judge: ModelClient,
    instances: Sequence[RlInstance],
    histories: dict[str, UserHistory],
    config: RolloutConfig,
    jobs: int = 1,
) -> tuple[list[RolloutTree], dict]:
    """Roll out and score every instance. Failures skip the instance with a log
    line; results keep input order regardless of scheduling."""

    def one(inst: RlInstance) -> RolloutTree | None:
        history = histories.get(inst.user_id)
        if history is None:
            logger.warning("instance %s: no history on file, skipped", inst.user_id)
            return None
        try:
            tree = rollout(policy, inst, history, config)
            return score_tree(tree, judge, config)
        except PipelineError as exc:
            logger.warning("instance %s (%d, %d) failed: %s", inst.user_id, inst.k1, inst.k2, exc)
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, instances))
    else:
        results = [one(inst) for inst in instances]
    trees = [t for t in results if t is not None]
    rewards = [rs.immediate for t in trees for rs in t.all_summaries()]
    stats = {
        "instances_in": len(instances),
        "trees": len(trees),
        "skipped": len(instances) - len(trees),
        "mean_immediate_reward": (sum(rewards) / len(rewards)) if rewards else None,
    }
    return trees, stats
