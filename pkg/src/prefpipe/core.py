"""Core data model: interaction triples, user histories, segments, summaries.

Everything downstream (synthesis, pruning, rollouts, streaming, benchmarks) is
built on these four immutable types and their JSONL wire format.
"""

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from ._util import count_tokens, read_jsonl, write_jsonl
from .errors import ValidationError


@dataclass(frozen=True)
class InteractionTriple:
    """One logged preference event.

    Attributes:
        index: Explicit position key within the user's history. Strictly increasing
            across a history, but stored explicitly so downstream stages can reorder
            or fuse storage without losing identity.
        context: Optional query/prompt the pair was shown under. Often absent.
        chosen: Text of the item the user picked. Never empty.
        rejected: Text of the item the user passed over. Optional; positive-only
            corpora drop it.
    """

    index: int
    chosen: str
    rejected: str | None = None
    context: str | None = None

    def __post_init__(self):
        if self.index < 0:
            raise ValidationError(f"triple index must be >= 0, got {self.index}")
        if not self.chosen:
            raise ValidationError("triple chosen item must be non-empty")
        if self.rejected is not None and self.rejected == self.chosen:
            raise ValidationError(f"triple {self.index}: rejected item equals chosen item")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "context": self.context,
            "chosen": self.chosen,
            "rejected": self.rejected,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionTriple":
        try:
            return cls(
                index=data["index"],
                chosen=data["chosen"],
                rejected=data.get("rejected"),
                context=data.get("context"),
            )
        except KeyError as exc:
            raise ValidationError(f"triple record missing field {exc}") from exc


@dataclass(frozen=True)
class UserHistory:
    """A user's ordered interaction log.

    Attributes:
        user_id: Non-empty stable identifier.
        triples: Interaction triples ordered by strictly increasing ``index``.
        dataset_tag: Optional provenance label (source corpus, split, ...).
    """

    user_id: str
    triples: tuple[InteractionTriple, ...]
    dataset_tag: str | None = None

    def __post_init__(self):
        if not self.user_id:
            raise ValidationError("user_id must be non-empty")
        object.__setattr__(self, "triples", tuple(self.triples))
        last = -1
        for t in self.triples:
            if t.index <= last:
                raise ValidationError(
                    f"user {self.user_id}: triple indices must be strictly increasing "
                    f"({t.index} after {last})"
                )
            last = t.index

    def __len__(self) -> int:
        return len(self.triples)

    def position_of_index(self, index: int) -> int:
        """Map an explicit triple index to its position in ``triples``."""
        for pos, t in enumerate(self.triples):
            if t.index == index:
                return pos
        raise ValidationError(f"user {self.user_id}: no triple with index {index}")

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "dataset_tag": self.dataset_tag,
            "triples": [t.to_dict() for t in self.triples],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UserHistory":
        try:
            return cls(
                user_id=data["user_id"],
                triples=tuple(InteractionTriple.from_dict(t) for t in data["triples"]),
                dataset_tag=data.get("dataset_tag"),
            )
        except KeyError as exc:
            raise ValidationError(f"history record missing field {exc}") from exc


@dataclass(frozen=True)
class HistorySegment:
    """A half-open position range [start, end) over one history."""

    history: UserHistory
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end <= len(self.history)):
            raise ValidationError(
                f"segment [{self.start}, {self.end}) invalid for history of "
                f"length {len(self.history)}"
            )

    @property
    def triples(self) -> tuple[InteractionTriple, ...]:
        return self.history.triples[self.start : self.end]

    def __len__(self) -> int:
        return self.end - self.start


def _summary_id(text: str, reasoning: str | None, covers: tuple[int, int], parent_id: str | None) -> str:
    blob = "\x1f".join([text, reasoning or "", str(covers), parent_id or ""]).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PreferenceSummary:
    """A generated preference profile covering a slice of one user's history.

    Attributes:
        text: The summary body. Never empty.
        covers: Half-open position range of the history slice the summary drew on.
            For chained summaries this is the newest slice, not the union.
        reasoning: Optional chain-of-thought captured from the generator.
        parent_id: summary_id of the prior summary this one updated, if any.
        token_count: Size of ``text`` under the active token counter.
        summary_id: Content hash; identical content yields an identical id, which
            keeps lineage byte-stable across reruns.
    """

    text: str
    covers: tuple[int, int]
    reasoning: str | None = None
    parent_id: str | None = None
    token_count: int = -1
    summary_id: str = ""

    def __post_init__(self):
        if not self.text:
            raise ValidationError("summary text must be non-empty")
        object.__setattr__(self, "covers", (int(self.covers[0]), int(self.covers[1])))
        if not (0 <= self.covers[0] < self.covers[1]):
            raise ValidationError(f"summary covers {self.covers} is not a valid [start, end)")
        if self.token_count < 0:
            object.__setattr__(self, "token_count", count_tokens(self.text))
        if not self.summary_id:
            object.__setattr__(
                self, "summary_id", _summary_id(self.text, self.reasoning, self.covers, self.parent_id)
            )

    def to_dict(self) -> dict:
        return {
            "summary_id": self.summary_id,
            "text": self.text,
            "reasoning": self.reasoning,
            "parent_id": self.parent_id,
            "covers": list(self.covers),
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreferenceSummary":
        try:
            return cls(
                text=data["text"],
                covers=(data["covers"][0], data["covers"][1]),
                reasoning=data.get("reasoning"),
                parent_id=data.get("parent_id"),
                token_count=data.get("token_count", -1),
                summary_id=data.get("summary_id", ""),
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ValidationError(f"summary record malformed: {exc}") from exc


def segment(history: UserHistory, boundaries: Sequence[int]) -> list[HistorySegment]:
    """Split a history at the given end positions.

    ``boundaries`` are strictly increasing positions; the first segment starts at 0
    and the k-th ends at ``boundaries[k]``. Segments tile [0, boundaries[-1]) with
    no gaps or overlaps.
    """
    if not boundaries:
        raise ValidationError("boundaries must be non-empty")
    prev = 0
    out = []
    for b in boundaries:
        if b <= prev:
            raise ValidationError(f"boundaries must be strictly increasing and > 0, got {list(boundaries)}")
        if b > len(history):
            raise ValidationError(f"boundary {b} exceeds history length {len(history)}")
        out.append(HistorySegment(history, prev, b))
        prev = b
    return out


def strip_negatives(history: UserHistory) -> UserHistory:
    """Return a copy with every rejected item removed. Idempotent; order, indices
    and contexts are untouched."""
    return replace(
        history,
        triples=tuple(replace(t, rejected=None) for t in history.triples),
    )


def lint_history(history: UserHistory) -> list[str]:
    """Non-fatal data-quality warnings. Duplicate items are legal but worth flagging."""
    warnings = []
    seen: dict[str, int] = {}
    for t in history.triples:
        for role, item in (("chosen", t.chosen), ("rejected", t.rejected)):
            if item is None:
                continue
            if item in seen:
                warnings.append(
                    f"user {history.user_id}: triple {t.index} {role} item duplicates "
                    f"an item first seen at triple {seen[item]}"
                )
            else:
                seen[item] = t.index
    return warnings


def load_histories(path: str) -> list[UserHistory]:
    try:
        return [UserHistory.from_dict(rec) for rec in read_jsonl(path)]
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def save_histories(path: str, histories: Iterable[UserHistory]) -> int:
    return write_jsonl(path, (h.to_dict() for h in histories))


def load_summaries(path: str) -> dict[str, PreferenceSummary]:
    """Read a {user_id -> summary} JSONL store (records carry a ``user_id`` field)."""
    out: dict[str, PreferenceSummary] = {}
    try:
        for rec in read_jsonl(path):
            if "user_id" not in rec:
                raise ValidationError(f"{path}: summary record missing user_id")
            out[rec["user_id"]] = PreferenceSummary.from_dict(rec)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    return out


def save_summaries(path: str, summaries: dict[str, PreferenceSummary]) -> int:
    return write_jsonl(
        path, ({"user_id": uid, **s.to_dict()} for uid, s in summaries.items())
    )
