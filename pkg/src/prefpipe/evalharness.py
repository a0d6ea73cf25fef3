"""Selection-style evaluation: show the downstream model a summary and a target
pair (in seeded random A/B order), parse its JSON selection, and score accuracy.

Raw replies are kept per instance so any report can be reproduced offline by
re-parsing them (rescore)."""

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

from ._util import derive_seed, read_jsonl, write_jsonl
from .core import PreferenceSummary, UserHistory
from .errors import BackendError, GenerationError, JudgeError, ValidationError
from .modelio import ModelClient, parse_selection
from .prompts import render_judge_prompt
from .streamer import infer_full, infer_streaming

logger = logging.getLogger("prefpipe.evalharness")


@dataclass(frozen=True)
class EvalInstance:
    """One scored question: given a user's summary, which item did they pick?
    ``truth`` names the preferred side of (item_a, item_b) as stored, before
    any presentation shuffle."""

    user_id: str
    item_a: str
    item_b: str
    truth: str
    context: str | None = None
    origin: str | None = None

    def __post_init__(self):
        if self.truth not in ("A", "B"):
            raise ValidationError(f"truth must be 'A' or 'B', got {self.truth!r}")
        if not self.item_a or not self.item_b:
            raise ValidationError("both items must be non-empty")

    @classmethod
    def from_dict(cls, data: dict) -> "EvalInstance":
        try:
            return cls(
                user_id=data["user_id"],
                item_a=data["item_a"],
                item_b=data["item_b"],
                truth=data.get("truth", "A"),
                context=data.get("context"),
                origin=data.get("origin"),
            )
        except KeyError as exc:
            raise ValidationError(f"eval instance missing field {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_a": self.item_a,
            "item_b": self.item_b,
            "truth": self.truth,
            "context": self.context,
            "origin": self.origin,
        }


@dataclass(frozen=True)
class EvalOutcome:
    """One judged instance with everything needed to re-derive its verdict."""

    instance: EvalInstance
    swapped: bool
    reply: str | None
    parsed: str | None
    correct: bool
    failed: bool


@dataclass(frozen=True)
class EvalReport:
    label: str
    n: int
    correct: int
    parse_failures: int
    call_failures: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n": self.n,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "parse_failures": self.parse_failures,
            "call_failures": self.call_failures,
        }


def _judge_outcome(outcome_reply: str | None, swapped: bool, truth: str, strict: bool) -> tuple[str | None, bool]:
    if outcome_reply is None:
        return None, False
    parsed = parse_selection(outcome_reply, strict=strict)
    if parsed is None:
        return None, False
    mapped = parsed if not swapped else ("B" if parsed == "A" else "A")
    return parsed, mapped == truth


def evaluate_selection(
    downstream: ModelClient,
    summaries: Mapping[str, PreferenceSummary | str],
    instances: Sequence[EvalInstance],
    *,
    seed: int = 0,
    strict: bool = False,
    label: str = "eval",
) -> tuple[EvalReport, list[EvalOutcome]]:
    """Judge every instance once.

    Presentation order is randomized per instance from (seed, label, user, slot)
    so reruns are reproducible. Unparseable replies and failed calls both count
    as incorrect; instances whose user has no summary are dropped with a log
    line (they are not failures of the summary under test).
    """
    outcomes = []
    correct = parse_failures = call_failures = 0
    for slot, inst in enumerate(instances):
        summary = summaries.get(inst.user_id)
        if summary is None:
            logger.warning("instance %d: no summary for user %s, dropped", slot, inst.user_id)
            continue
        summary_text = summary.text if isinstance(summary, PreferenceSummary) else summary
        # The shuffle depends on (seed, user, slot) only, never the label, so
        # protocol comparisons ask byte-identical questions.
        swapped = derive_seed(seed, "eval-order", inst.user_id, slot) % 2 == 1
        first, second = (inst.item_b, inst.item_a) if swapped else (inst.item_a, inst.item_b)
        prompt = render_judge_prompt(summary_text, inst.context, first, second)
        reply: str | None = None
        failed = False
        try:
            gen = downstream.generate_summary(
                prompt,
                sample_seed=derive_seed(seed, "eval-sample", inst.user_id, slot) % (2**31),
                meta={"user_id": inst.user_id, "stage": "evaluate"},
            )
            reply = gen.summary
        except (BackendError, GenerationError, JudgeError) as exc:
            logger.warning("instance %d (%s): call failed: %s", slot, inst.user_id, exc)
            failed = True
            call_failures += 1
        parsed, ok = _judge_outcome(reply, swapped, inst.truth, strict)
        if reply is not None and parsed is None:
            parse_failures += 1
        if ok:
            correct += 1
        outcomes.append(
            EvalOutcome(instance=inst, swapped=swapped, reply=reply, parsed=parsed, correct=ok, failed=failed)
        )
    report = EvalReport(
        label=label,
        n=len(outcomes),
        correct=correct,
        parse_failures=parse_failures,
        call_failures=call_failures,
    )
    return report, outcomes


def rescore(outcomes: Sequence[EvalOutcome], *, label: str = "rescore", strict: bool = False) -> EvalReport:
    """Rebuild a report from stored outcomes without any model calls."""
    correct = parse_failures = call_failures = 0
    for out in outcomes:
        if out.failed:
            call_failures += 1
        parsed, ok = _judge_outcome(out.reply, out.swapped, out.instance.truth, strict)
        if out.reply is not None and parsed is None:
            parse_failures += 1
        if ok:
            correct += 1
    return EvalReport(
        label=label, n=len(outcomes), correct=correct, parse_failures=parse_failures, call_failures=call_failures
    )


def holdout_instances(histories: Sequence[UserHistory]) -> tuple[list[UserHistory], list[EvalInstance]]:
    """Default evaluation protocol: hold out each user's final full pair as the
    question and summarize everything before it. Users too short to split or
    whose last triple lacks a rejected item are dropped."""
    trimmed, instances = [], []
    for hist in histories:
        if len(hist) < 2 or hist.triples[-1].rejected is None:
            logger.info("user %s unusable for holdout evaluation, dropped", hist.user_id)
            continue
        last = hist.triples[-1]
        trimmed.append(
            UserHistory(user_id=hist.user_id, triples=hist.triples[:-1], dataset_tag=hist.dataset_tag)
        )
        instances.append(
            EvalInstance(
                user_id=hist.user_id,
                item_a=last.chosen,
                item_b=last.rejected,
                truth="A",
                context=last.context,
                origin="holdout",
            )
        )
    return trimmed, instances


def compare_protocols(
    histories: Sequence[UserHistory],
    generator: ModelClient,
    downstream: ModelClient,
    *,
    num_chunks: int = 2,
    seed: int = 0,
) -> dict[str, EvalReport]:
    """Evaluate full-pass summaries against streamed ones on identical held-out
    instances. Identical generator output (e.g. one chunk) gives identical
    reports."""
    trimmed, instances = holdout_instances(histories)
    if not instances:
        raise ValidationError("no usable evaluation instances in the corpus")
    full = {h.user_id: infer_full(generator, h).current for h in trimmed}
    streamed = {h.user_id: infer_streaming(generator, h, num_chunks).current for h in trimmed}
    report_full, _ = evaluate_selection(downstream, full, instances, seed=seed, label="full-history")
    report_stream, _ = evaluate_selection(downstream, streamed, instances, seed=seed, label="streaming")
    return {"full": report_full, "streaming": report_stream}


def format_reports(reports: Sequence[EvalReport]) -> str:
    """Fixed-width table over report rows."""
    header = f"{'label':<16} {'n':>6} {'correct':>8} {'accuracy':>9} {'parse_fail':>11} {'call_fail':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.label:<16} {r.n:>6} {r.correct:>8} {r.accuracy:>9.4f} {r.parse_failures:>11} {r.call_failures:>10}"
        )
    return "\n".join(lines)


def load_eval_instances(path: str) -> list[EvalInstance]:
    return [EvalInstance.from_dict(rec) for rec in read_jsonl(path)]


def save_eval_instances(path: str, instances: Sequence[EvalInstance]) -> int:
    return write_jsonl(path, (i.to_dict() for i in instances))
