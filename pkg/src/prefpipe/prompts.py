"""Prompt construction. Every stage renders through these helpers so prompt text
is byte-stable across the whole pipeline.

The two operational templates (summary generation, pairwise judging) are fixed
verbatim; renderers only substitute content into their slots. Builders assemble
from literal parts rather than str.format so user text containing braces or
placeholder-like substrings can never corrupt the frame.
"""

from typing import Sequence

from .core import InteractionTriple

# Marker used when a slot has no content (no prior summary, no query context).
EMPTY_SLOT = "None"

GENERATION_INTRO = (
    "Analyze the past preference summary and the following user interaction history to "
    "summarize the comprehensive user preferences in concise language. If past preferences "
    "are provided, adjust the preferences by combining past preferences with those reflected "
    "in current behavior, removing conflicting parts, and integrating new insights. If no "
    "past preferences are provided, derive the final preferences solely from user behavior. "
    "The user's history will be provided as a sequence of triples, where each triple is "
    "(QUERY, CHOSEN ITEM BY THE USER, REJECTED ITEM BY THE USER)."
)

GENERATION_OUTRO = (
    "Now, given the above user's past preference summary and the interaction history, "
    "summarize the user preferences."
)

GENERATION_TEMPLATE = (
    GENERATION_INTRO
    + "\n\n=====Past Preference Summary=====\n{past}\n"
    + "\n=====Interaction History=====\n{history}\n"
    + "\n=====END=====\n\n"
    + GENERATION_OUTRO
)

JUDGE_INTRO = (
    "Determine which response the user prefers based on the user's preferences. Please "
    "output your selection below in a json format by filling in the placeholders in []: "
    '{"selection": "[Item A / Item B]"}'
)

JUDGE_OUTRO = "Now, ONLY output your selection without any other text outside of this specified structure."

JUDGE_TEMPLATE = (
    JUDGE_INTRO
    + "\n\n<Prompt>\n{prompt}\n</Prompt>\n"
    + "\n<Preference>\n{preference}\n</Preference>\n"
    + "\n<Item A>\n{item_a}\n</Item A>\n"
    + "\n<Item B>\n{item_b}\n</Item B>\n\n"
    + JUDGE_OUTRO
)

MERGE_INTRO = (
    "Merge the following candidate preference summaries for one user into a single "
    "comprehensive summary. Each candidate is accompanied by the reasoning that produced "
    "it. Synthesize a non-redundant and holistic view: combine overlapping points, keep "
    "distinct insights from every candidate, and drop claims the reasoning does not support."
)

MERGE_OUTRO = "Now, output the single merged preference summary."


def render_triple(triple: InteractionTriple, ordinal: int) -> str:
    """Render one labeled history entry. The query line is omitted when the triple
    has no context, the rejected line when the corpus is positive-only."""
    lines = [f"{ordinal}."]
    if triple.context is not None:
        lines.append(f"Query: {triple.context}")
    lines.append(f"Chosen: {triple.chosen}")
    if triple.rejected is not None:
        lines.append(f"Rejected: {triple.rejected}")
    return "\n".join(lines)


def render_history_block(triples: Sequence[InteractionTriple]) -> str:
    """Labeled rendering of a triple sequence, numbered from 1."""
    if not triples:
        return EMPTY_SLOT
    return "\n\n".join(render_triple(t, i) for i, t in enumerate(triples, 1))


def render_target_block(triple: InteractionTriple, first_item: str) -> str:
    """Unlabeled rendering of a target interaction: the two items appear as neutral
    candidates so the prompt never reveals which one the user picked.

    ``first_item`` is the item text to list first; callers randomize it.
    """
    if triple.rejected is None:
        raise ValueError("target rendering needs both items of the pair")
    if first_item == triple.chosen:
        second = triple.rejected
    elif first_item == triple.rejected:
        second = triple.chosen
    else:
        raise ValueError("first_item must be one of the target's two items")
    lines = []
    if triple.context is not None:
        lines.append(f"Query: {triple.context}")
    lines.append(f"Candidate Item 1: {first_item}")
    lines.append(f"Candidate Item 2: {second}")
    return "\n".join(lines)


def render_generation_prompt(
    history_text: str,
    past_text: str | None = None,
    target_text: str | None = None,
) -> str:
    """Assemble the summary-generation prompt.

    ``past_text`` is the prior summary body (the empty marker fills the slot when
    absent). ``target_text``, when given, is inserted as its own section between
    the history and the end marker; only the synthesis stage uses it.
    """
    parts = [
        GENERATION_INTRO,
        "",
        "=====Past Preference Summary=====",
        past_text if past_text else EMPTY_SLOT,
        "",
        "=====Interaction History=====",
        history_text,
        "",
    ]
    if target_text is not None:
        parts += ["=====Target Interaction=====", target_text, ""]
    parts += ["=====END=====", "", GENERATION_OUTRO]
    return "\n".join(parts)


def render_judge_prompt(preference: str, context: str | None, item_a: str, item_b: str) -> str:
    """Assemble the pairwise selection prompt. ``item_a``/``item_b`` are presented
    exactly as passed; any order randomization happens upstream."""
    parts = [
        JUDGE_INTRO,
        "",
        "<Prompt>",
        context if context is not None else EMPTY_SLOT,
        "</Prompt>",
        "",
        "<Preference>",
        preference,
        "</Preference>",
        "",
        "<Item A>",
        item_a,
        "</Item A>",
        "",
        "<Item B>",
        item_b,
        "</Item B>",
        "",
        JUDGE_OUTRO,
    ]
    return "\n".join(parts)


def render_merge_prompt(candidates: Sequence[tuple[str | None, str]]) -> str:
    """Assemble the candidate-merging prompt from (reasoning, summary) pairs."""
    if not candidates:
        raise ValueError("merge prompt needs at least one candidate")
    parts = [MERGE_INTRO, ""]
    for i, (reasoning, summary) in enumerate(candidates, 1):
        parts.append(f"=====Candidate {i}=====")
        parts.append(f"Reasoning: {reasoning if reasoning else EMPTY_SLOT}")
        parts.append(f"Summary: {summary}")
        parts.append("")
    parts.append("=====END=====")
    parts.append("")
    parts.append(MERGE_OUTRO)
    return "\n".join(parts)
