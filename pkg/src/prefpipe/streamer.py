"""Streaming preference inference: maintain a per-user summary that is updated
from contiguous history segments instead of re-reading the full log.

The update is the only primitive; full-history inference is one update over
[0, n), and chunked inference is a fold of updates. That shared code path is
what makes composition exact: updating in two steps and inferring with two
chunks build byte-identical prompts and summaries on a deterministic backend.
"""

import logging
from dataclasses import dataclass

from ._util import even_boundaries, read_jsonl, write_jsonl
from .core import HistorySegment, PreferenceSummary, UserHistory
from .errors import GenerationError, InferenceError, ValidationError
from .modelio import ModelClient
from .prompts import render_generation_prompt, render_history_block

logger = logging.getLogger("prefpipe.streamer")


@dataclass(frozen=True)
class StreamState:
    """A user's inference frontier.

    ``consumed_until`` is the number of history positions already folded in;
    ``lineage`` the summary ids oldest-to-newest, ending with ``current``.
    """

    user_id: str
    current: PreferenceSummary
    consumed_until: int
    lineage: tuple[str, ...]

    def __post_init__(self):
        if self.consumed_until != self.current.covers[1]:
            raise ValidationError(
                f"frontier {self.consumed_until} disagrees with summary coverage {self.current.covers}"
            )
        if not self.lineage or self.lineage[-1] != self.current.summary_id:
            raise ValidationError("lineage must be non-empty and end at the current summary")

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "frontier": self.consumed_until,
            "summary": self.current.to_dict(),
            "lineage": list(self.lineage),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StreamState":
        try:
            return cls(
                user_id=data["user_id"],
                current=PreferenceSummary.from_dict(data["summary"]),
                consumed_until=int(data["frontier"]),
                lineage=tuple(data["lineage"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad stream state record: {exc}") from exc


def update(generator: ModelClient, state: StreamState | None, segment: HistorySegment) -> StreamState:
    """Fold one new contiguous segment into a user's state.

    With ``state=None`` the segment must start at 0 and the result equals a
    from-scratch inference over the segment. Otherwise the segment must start
    exactly at the state's frontier.
    """
    start_required = 0 if state is None else state.consumed_until
    if segment.start != start_required:
        raise ValidationError(
            f"segment [{segment.start}, {segment.end}) is not contiguous with frontier {start_required}"
        )
    if state is not None and segment.history.user_id != state.user_id:
        raise ValidationError(
            f"segment belongs to {segment.history.user_id}, state to {state.user_id}"
        )
    user_id = segment.history.user_id
    prompt = render_generation_prompt(
        render_history_block(segment.triples),
        past_text=state.current.text if state else None,
    )
    try:
        gen = generator.generate_summary(
            prompt,
            meta={"user_id": user_id, "stage": "stream-update", "start": segment.start, "end": segment.end},
        )
    except GenerationError as exc:
        raise InferenceError(
            f"user {user_id}: update over [{segment.start}, {segment.end}) failed: {exc}",
            lineage=state.lineage if state else (),
        ) from exc
    summary = PreferenceSummary(
        text=gen.summary,
        reasoning=gen.reasoning,
        covers=(segment.start, segment.end),
        parent_id=state.current.summary_id if state else None,
    )
    lineage = (state.lineage if state else ()) + (summary.summary_id,)
    return StreamState(user_id=user_id, current=summary, consumed_until=segment.end, lineage=lineage)


def infer_streaming(generator: ModelClient, history: UserHistory, num_chunks: int) -> StreamState:
    """Infer over the whole history in ``num_chunks`` near-equal contiguous
    segments (the division remainder goes to the last chunk)."""
    if len(history) == 0:
        raise ValidationError(f"user {history.user_id}: cannot infer over an empty history")
    state: StreamState | None = None
    prev = 0
    for end in even_boundaries(len(history), num_chunks):
        state = update(generator, state, HistorySegment(history, prev, end))
        prev = end
    assert state is not None
    return state


def infer_full(generator: ModelClient, history: UserHistory) -> StreamState:
    """Single-pass inference over the whole history (one chunk)."""
    return infer_streaming(generator, history, 1)


def save_states(path: str, states: list[StreamState]) -> int:
    return write_jsonl(path, (s.to_dict() for s in states))


def load_states(path: str) -> dict[str, StreamState]:
    out: dict[str, StreamState] = {}
    for rec in read_jsonl(path):
        state = StreamState.from_dict(rec)
        out[state.user_id] = state
    return out
