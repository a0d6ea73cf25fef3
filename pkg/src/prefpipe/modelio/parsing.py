"""Completion-text parsing: reasoning delimiters and judge selections."""

import json
import re

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\s*\n(.*?)\n?```\s*$", re.DOTALL)
_SELECTION_RE = re.compile(r'"selection"\s*:\s*"([^"]*)"')


def split_reasoning(text: str, open_tag: str = "<think>", close_tag: str = "</think>") -> tuple[str | None, str]:
    """Split a completion into (reasoning, summary).

    The first well-formed ``open_tag ... close_tag`` block is the reasoning; the
    summary is everything outside it, stripped. Text without a complete block is
    returned whole as the summary.
    """
    start = text.find(open_tag)
    if start < 0:
        return None, text.strip()
    end = text.find(close_tag, start + len(open_tag))
    if end < 0:
        return None, text.strip()
    reasoning = text[start + len(open_tag) : end].strip()
    remainder = (text[:start] + text[end + len(close_tag) :]).strip()
    return (reasoning or None), remainder


def _normalize_label(value: str) -> str | None:
    v = value.strip().strip("[]").strip().lower()
    if v in ("item a", "a"):
        return "A"
    if v in ("item b", "b"):
        return "B"
    return None


def parse_selection(text: str, strict: bool = False) -> str | None:
    """Extract the judged choice from a selection reply.

    Accepts the reply wrapped in whitespace or a single markdown code fence. In
    strict mode only a clean JSON object ``{"selection": "Item A"}`` counts; the
    default additionally tolerates a regex-recoverable selection field inside a
    noisy reply. Returns "A", "B", or None when no unambiguous choice is present.
    """
    s = text.strip()
    fenced = _FENCE_RE.match(s)
    if fenced:
        s = fenced.group(1).strip()
    try:
        obj = json.loads(s)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict) and isinstance(obj.get("selection"), str):
        return _normalize_label(obj["selection"])
    if strict:
        return None
    m = _SELECTION_RE.search(s)
    if m:
        return _normalize_label(m.group(1))
    return None
