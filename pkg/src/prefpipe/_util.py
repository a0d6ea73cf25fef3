"""Small shared helpers: stable seeds, token counting, JSONL io."""

import hashlib
import json
import os
import re
from typing import Any, Callable, Iterable, Iterator

_TOKEN_RE = re.compile(r"\S+")


def stable_hash(*parts: Any) -> int:
    """Deterministic 63-bit hash of the given parts. Independent of PYTHONHASHSEED."""
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


def derive_seed(root_seed: int, *scope: Any) -> int:
    """Derive a per-stage / per-user seed from a root seed and a scope path."""
    return stable_hash("seed", root_seed, *scope)


def count_tokens(text: str) -> int:
    """Default token counter: whitespace-delimited chunks. Pluggable at the client level."""
    return len(_TOKEN_RE.findall(text))


def left_truncate(text: str, max_tokens: int, counter: Callable[[str], int] = count_tokens) -> tuple[str, int]:
    """Drop the earliest tokens so that at most ``max_tokens`` remain.

    Returns (truncated_text, dropped_token_count). With the default counter the cut
    lands on a whitespace boundary so the surviving suffix is byte-identical to the
    original tail. A custom counter only changes the budget check, not the boundary.
    """
    if max_tokens < 0:
        raise ValueError("max_tokens must be >= 0")
    total = counter(text)
    if total <= max_tokens:
        return text, 0
    spans = [m.span() for m in _TOKEN_RE.finditer(text)]
    drop = len(spans) - max_tokens
    if drop >= len(spans):
        return "", len(spans)
    start = spans[drop][0]
    return text[start:], drop


def json_dumps(obj: Any) -> str:
    """Canonical JSON used for all on-disk records: UTF-8, stable key order."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_jsonl(path: str, records: Iterable[dict]) -> int:
    """Write records as one JSON object per line. Returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json_dumps(rec))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path: str) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON line: {exc}") from exc


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def even_boundaries(n: int, k: int) -> list[int]:
    """Split [0, n) into k near-equal contiguous chunks; the remainder lands in the
    last chunk. Returns the k boundary end-points (the last one is n)."""
    if k < 1:
        raise ValueError("chunk count must be >= 1")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} non-empty chunks")
    base = n // k
    ends = [base * i for i in range(1, k)]
    ends.append(n)
    return ends
