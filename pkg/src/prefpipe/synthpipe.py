"""SFT data synthesis: generate candidate profiles against held-out targets,
validate them with a judge, merge survivors, and keep only users whose merged
profile predicts their choices accurately.

Run per history segment with the prior segment's merged summary chained in, the
pipeline emits incremental training records (prior + new segment -> updated
profile)."""

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

from ._util import derive_seed, even_boundaries
from .core import HistorySegment, InteractionTriple, PreferenceSummary, UserHistory
from .errors import GenerationError, JudgeError, UserSkip
from .modelio import GenerationResult, ModelClient
from .prompts import render_generation_prompt, render_history_block, render_merge_prompt, render_target_block

logger = logging.getLogger("prefpipe.synthpipe")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthesis pipeline.

    Attributes:
        num_segments: How many near-equal history slices to chain through.
        min_per_segment: Users whose slices would fall below this are skipped.
        tau_tract: Tractability threshold; only triples the strong judge gets
            right with at least this probability can become targets.
        min_subset: A user's tractable subset must exceed this size to proceed.
        max_targets: Sample this many targets when the subset is larger.
        min_kept: Minimum validated candidates needed to attempt a merge.
        accuracy_threshold: User-level acceptance bar on merged-profile accuracy
            over all sampled targets (inclusive).
    """

    num_segments: int = 3
    min_per_segment: int = 3
    tau_tract: float = 0.9
    min_subset: int = 3
    max_targets: int = 5
    min_kept: int = 3
    accuracy_threshold: float = 0.8
    debias: bool = True
    seed: int = 0


@dataclass(frozen=True)
class TargetSet:
    """Targets sampled from one segment's tractable subset, history order."""

    segment: HistorySegment
    targets: tuple[InteractionTriple, ...]


@dataclass(frozen=True)
class ProfileCandidate:
    """One generated profile anchored to one target."""

    target: InteractionTriple
    generation: GenerationResult

    @property
    def summary_text(self) -> str:
        return self.generation.summary

    @property
    def reasoning(self) -> str | None:
        return self.generation.reasoning


@dataclass(frozen=True)
class SynthRecord:
    """One training example: (prior profile, new segment) -> merged profile."""

    user_id: str
    segment: tuple[int, int]
    prior_text: str | None
    reasoning: str | None
    summary: str
    accuracy: float
    target_indices: tuple[int, ...]
    kept_count: int

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "segment": list(self.segment),
            "prior_text": self.prior_text,
            "reasoning": self.reasoning,
            "summary": self.summary,
            "accuracy": self.accuracy,
            "target_indices": list(self.target_indices),
            "kept_count": self.kept_count,
        }


def select_targets(
    segment: HistorySegment, tract_scores: Mapping[int, float], config: SynthConfig, rng: random.Random
) -> TargetSet:
    """Pick validation targets from the segment's tractable subset.

    A triple qualifies when it still has both items and the strong judge finds
    it tractable (score >= tau_tract; unscored triples count as intractable).
    Subsets of at most ``min_subset`` skip the user; larger-than-``max_targets``
    subsets are sampled down, keeping history order.
    """
    subset = [
        t
        for t in segment.triples
        if t.rejected is not None and tract_scores.get(t.index, 0.0) >= config.tau_tract
    ]
    if len(subset) <= config.min_subset:
        raise UserSkip(
            f"tractable subset has {len(subset)} triple(s), need more than {config.min_subset}"
        )
    if len(subset) > config.max_targets:
        subset = sorted(rng.sample(subset, config.max_targets), key=lambda t: t.index)
    return TargetSet(segment=segment, targets=tuple(subset))


def generate_candidates(
    target_set: TargetSet,
    prior: PreferenceSummary | None,
    generator: ModelClient,
    rng: random.Random,
) -> list[ProfileCandidate]:
    """Generate one profile candidate per target.

    The rendered interaction history is the segment minus every sampled target;
    the candidate's own target is appended unlabeled, its two items in random
    order, so no prompt reveals any target's true choice. Failed generations are
    dropped; losing all of them skips the user.
    """
    user_id = target_set.segment.history.user_id
    target_indices = {t.index for t in target_set.targets}
    context_triples = [t for t in target_set.segment.triples if t.index not in target_indices]
    history_text = render_history_block(context_triples)
    candidates = []
    for target in target_set.targets:
        first = rng.choice((target.chosen, target.rejected))
        prompt = render_generation_prompt(
            history_text,
            past_text=prior.text if prior else None,
            target_text=render_target_block(target, first),
        )
        try:
            gen = generator.generate_summary(
                prompt, meta={"user_id": user_id, "stage": "synth-generate", "target": target.index}
            )
        except GenerationError as exc:
            logger.warning("user %s target %d: generation failed (%s)", user_id, target.index, exc)
            continue
        candidates.append(ProfileCandidate(target=target, generation=gen))
    if not candidates:
        raise UserSkip("all candidate generations failed")
    return candidates


def _predicts_choice(judge: ModelClient, summary_text: str, target: InteractionTriple, debias: bool, user_id: str) -> bool:
    """True when the judge, reading the summary, picks the actually-chosen item."""
    verdict = judge.judge_pair(
        summary_text,
        target.context,
        target.chosen,
        target.rejected,
        debias=debias,
        meta={"user_id": user_id, "target": target.index},
    )
    return verdict.prob_first > 0.5


def validate_candidates(
    candidates: list[ProfileCandidate], judge: ModelClient, config: SynthConfig, user_id: str = ""
) -> list[ProfileCandidate]:
    """Keep candidates whose profile lets the judge predict the target's true
    choice. Judge failures count as failed validation. Fewer than ``min_kept``
    survivors skip the user."""
    kept = []
    for cand in candidates:
        try:
            ok = _predicts_choice(judge, cand.summary_text, cand.target, config.debias, user_id)
        except JudgeError as exc:
            logger.warning("target %d: judge failed during validation (%s)", cand.target.index, exc)
            ok = False
        if ok:
            kept.append(cand)
    if len(kept) < config.min_kept:
        raise UserSkip(f"only {len(kept)} candidate(s) validated, need at least {config.min_kept}")
    return kept


def merge_profiles(
    kept: list[ProfileCandidate],
    teacher: ModelClient,
    covers: tuple[int, int],
    parent_id: str | None,
    user_id: str,
) -> PreferenceSummary:
    """Merge validated candidates (with their reasonings) into one profile."""
    prompt = render_merge_prompt([(c.reasoning, c.summary_text) for c in kept])
    gen = teacher.generate_summary(prompt, meta={"user_id": user_id, "stage": "synth-merge"})
    return PreferenceSummary(
        text=gen.summary, reasoning=gen.reasoning, covers=covers, parent_id=parent_id
    )


def user_level_filter(
    merged: PreferenceSummary, target_set: TargetSet, judge: ModelClient, config: SynthConfig
) -> float:
    """Score the merged profile over every sampled target; accept iff the
    accuracy reaches the threshold (inclusive). Returns the accuracy."""
    user_id = target_set.segment.history.user_id
    correct = 0
    for target in target_set.targets:
        try:
            if _predicts_choice(judge, merged.text, target, config.debias, user_id):
                correct += 1
        except JudgeError as exc:
            logger.warning("user %s target %d: judge failed in user filter (%s)", user_id, target.index, exc)
    accuracy = correct / len(target_set.targets)
    if accuracy < config.accuracy_threshold:
        raise UserSkip(
            f"merged profile accuracy {accuracy:.3f} below threshold {config.accuracy_threshold}"
        )
    return accuracy


def build_streaming_sft(
    history: UserHistory,
    tract_scores: Mapping[int, float],
    generator: ModelClient,
    judge: ModelClient,
    teacher: ModelClient,
    config: SynthConfig,
) -> list[SynthRecord]:
    """Run the full pipeline per segment, chaining each merged profile into the
    next segment's prompt. A skip in segment j keeps the records from earlier
    segments but aborts j and everything after (the chain's prior is gone)."""
    if len(history) // config.num_segments < config.min_per_segment:
        logger.info(
            "user %s skipped: %d interactions cannot give %d segments of >= %d",
            history.user_id, len(history), config.num_segments, config.min_per_segment,
        )
        return []
    boundaries = even_boundaries(len(history), config.num_segments)
    segments = []
    prev = 0
    for end in boundaries:
        segments.append(HistorySegment(history, prev, end))
        prev = end
    records: list[SynthRecord] = []
    prior: PreferenceSummary | None = None
    for j, seg in enumerate(segments):
        rng = random.Random(derive_seed(config.seed, "synth", history.user_id, j))
        try:
            target_set = select_targets(seg, tract_scores, config, rng)
            candidates = generate_candidates(target_set, prior, generator, rng)
            kept = validate_candidates(candidates, judge, config, user_id=history.user_id)
            merged = merge_profiles(
                kept, teacher, covers=(seg.start, seg.end),
                parent_id=prior.summary_id if prior else None, user_id=history.user_id,
            )
            accuracy = user_level_filter(merged, target_set, judge, config)
        except UserSkip as exc:
            logger.info("user %s segment %d skipped: %s", history.user_id, j, exc.reason)
            break
        records.append(
            SynthRecord(
                user_id=history.user_id,
                segment=(seg.start, seg.end),
                prior_text=prior.text if prior else None,
                reasoning=merged.reasoning,
                summary=merged.text,
                accuracy=accuracy,
                target_indices=tuple(t.index for t in target_set.targets),
                kept_count=len(kept),
            )
        )
        prior = merged
    return records


def run_corpus(
    histories: list[UserHistory],
    tract_scores: Mapping[str, Mapping[int, float]],
    generator: ModelClient,
    judge: ModelClient,
    teacher: ModelClient,
    config: SynthConfig,
    jobs: int = 1,
) -> tuple[list[SynthRecord], dict]:
    """Drive the pipeline over a corpus. Users are independent; results are
    emitted in input order regardless of scheduling, so reruns are
    byte-identical."""

    def one(history: UserHistory) -> list[SynthRecord]:
        return build_streaming_sft(
            history, tract_scores.get(history.user_id, {}), generator, judge, teacher, config
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_user = list(pool.map(one, histories))
    else:
        per_user = [one(h) for h in histories]
    records = [rec for recs in per_user for rec in recs]
    stats = {
        "users_in": len(histories),
        "users_with_records": sum(1 for recs in per_user if recs),
        "records": len(records),
    }
    return records, stats
