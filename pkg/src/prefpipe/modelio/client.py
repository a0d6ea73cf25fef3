"""The retrying, truncating, telemetry-counting client wrapped around a backend.

One client per endpoint. All pipeline stages go through the four operations here
(generate_summary, judge_pair, policy_logprobs, embed) so limits and accounting
are enforced in exactly one place.
"""

import logging
import math
import threading
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .._util import count_tokens, left_truncate, stable_hash
from ..errors import BackendError, ContractError, GenerationError, JudgeError, ValidationError
from ..prompts import render_judge_prompt
from .backends import Backend, build_backend
from .endpoints import ModelEndpoint
from .parsing import parse_selection, split_reasoning

logger = logging.getLogger("prefpipe.modelio")

JUDGE_LABELS = ("Item A", "Item B")


def label_probability(lp_first: float, lp_second: float) -> float:
    """Probability of the first label under a two-way softmax of label logprobs."""
    return 1.0 / (1.0 + math.exp(lp_second - lp_first))


@dataclass(frozen=True)
class GenerationResult:
    """One summary generation.

    ``prompt`` is the text actually sent (after any left truncation); ``raw`` the
    untouched completion; ``summary``/``reasoning`` the parsed halves;
    ``token_logprobs`` per generated token when the backend reports them.
    """

    prompt: str
    raw: str
    summary: str
    reasoning: str | None
    token_logprobs: tuple[float, ...] | None


@dataclass(frozen=True)
class JudgeVerdict:
    """Judge output for one ordered item pair.

    ``prob_first`` is the probability that the first-passed item is preferred;
    ``debiased`` marks the two-order average; ``sampled`` marks the k-sample
    frequency fallback used when the backend exposes no label logprobs.
    """

    prob_first: float
    debiased: bool
    sampled: bool
    detail: dict


class ModelClient:
    def __init__(
        self,
        endpoint: ModelEndpoint,
        backend: Backend | None = None,
        *,
        token_counter: Callable[[str], int] = count_tokens,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.backend = backend if backend is not None else build_backend(endpoint)
        self.token_counter = token_counter
        self.stats: Counter = Counter()
        self._sleep = sleep
        self._lock = threading.Lock()
        self._sem = threading.Semaphore(endpoint.max_in_flight)

    def _bump(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.stats[key] += n

    def _with_retries(self, op: str, fn: Callable):
        """Run a backend call under the in-flight limiter, retrying retryable
        transport failures with exponential backoff up to the endpoint's budget."""
        attempt = 0
        with self._sem:
            while True:
                self._bump("attempts")
                try:
                    return fn()
                except BackendError as exc:
                    if not exc.retryable or attempt >= self.endpoint.retry_limit:
                        logger.error("%s: giving up after %d attempt(s): %s", op, attempt + 1, exc)
                        raise
                    delay = self.endpoint.backoff_base * (2**attempt)
                    logger.warning("%s: retryable failure (%s); backing off %.2fs", op, exc, delay)
                    self._bump("retries")
                    self._sleep(delay)
                    attempt += 1

    def prepare_prompt(self, text: str) -> str:
        """Left-truncate to the endpoint's prompt budget, keeping the newest tail."""
        limit = self.endpoint.max_prompt_tokens
        if limit is None:
            return text
        truncated, dropped = left_truncate(text, limit, self.token_counter)
        if dropped:
            self._bump("truncations")
            self._bump("truncated_tokens", dropped)
            logger.warning("prompt truncated: dropped %d leading tokens (budget %d)", dropped, limit)
        return truncated

    # -- operations ---------------------------------------------------------

    def generate_summary(self, prompt: str, *, sample_seed: int | None = None, meta: dict | None = None) -> GenerationResult:
        """Send one summary-generation prompt and parse the reply.

        ``sample_seed`` distinguishes samples within a rollout group; None asks
        the backend for its default draw.
        """
        sent = self.prepare_prompt(prompt)
        self._bump("generate_calls")
        result = self._with_retries(
            "generate",
            lambda: self.backend.complete(
                sent,
                max_tokens=self.endpoint.max_output_tokens,
                temperature=self.endpoint.temperature,
                seed=sample_seed,
                meta=meta,
            ),
        )
        reasoning, summary = split_reasoning(result.text, self.endpoint.think_open, self.endpoint.think_close)
        if not summary:
            raise GenerationError("backend returned an empty summary")
        return GenerationResult(
            prompt=sent,
            raw=result.text,
            summary=summary,
            reasoning=reasoning,
            token_logprobs=result.token_logprobs,
        )

    def _order_probability(self, preference: str, context: str | None, first: str, second: str, meta: dict | None) -> tuple[float, dict, bool]:
        prompt = self.prepare_prompt(render_judge_prompt(preference, context, first, second))
        logprobs = self._with_retries(
            "judge", lambda: self.backend.choice_logprobs(prompt, JUDGE_LABELS, meta=meta)
        )
        if logprobs is not None:
            lp_a, lp_b = logprobs
            return label_probability(lp_a, lp_b), {"logprobs": [lp_a, lp_b]}, False
        # No label logprobs: estimate by sampling k selections and counting.
        counts = {"A": 0, "B": 0, "parse_failures": 0}
        for i in range(self.endpoint.judge_samples):
            sample = self._with_retries(
                "judge_sample",
                lambda i=i: self.backend.complete(
                    prompt,
                    max_tokens=64,
                    temperature=self.endpoint.temperature,
                    seed=stable_hash("judge-sample", prompt, i) % (2**31),
                    meta=meta,
                ),
            )
            label = parse_selection(sample.text)
            if label is None:
                counts["parse_failures"] += 1
            else:
                counts[label] += 1
        decided = counts["A"] + counts["B"]
        if decided == 0:
            raise JudgeError("no judge sample produced a parseable selection")
        return counts["A"] / decided, {"counts": counts}, True

    def judge_pair(
        self,
        preference: str,
        context: str | None,
        item_first: str,
        item_second: str,
        *,
        debias: bool = True,
        meta: dict | None = None,
    ) -> JudgeVerdict:
        """Probability that the user described by ``preference`` picks
        ``item_first`` over ``item_second`` in ``context``.

        With ``debias`` the items are judged in both presentation orders and the
        probabilities averaged, which cancels position bias by construction.
        """
        if not item_first or not item_second:
            raise ValidationError("judged items must be non-empty")
        if item_first == item_second:
            raise ValidationError("judged items must be distinct")
        self._bump("judge_calls")
        p_fwd, detail_fwd, sampled_fwd = self._order_probability(preference, context, item_first, item_second, meta)
        if not debias:
            return JudgeVerdict(p_fwd, debiased=False, sampled=sampled_fwd, detail={"forward": detail_fwd})
        p_rev, detail_rev, sampled_rev = self._order_probability(preference, context, item_second, item_first, meta)
        prob = 0.5 * (p_fwd + (1.0 - p_rev))
        return JudgeVerdict(
            prob, debiased=True, sampled=sampled_fwd or sampled_rev, detail={"forward": detail_fwd, "reverse": detail_rev}
        )

    def policy_logprobs(self, prompt: str, response: str, *, meta: dict | None = None) -> list[float]:
        """Per-token logprobs of ``response`` under the endpoint's model given
        ``prompt``. Raises CapabilityError when the backend cannot score text."""
        self._bump("score_calls")
        sent = self.prepare_prompt(prompt)
        out = self._with_retries("score", lambda: self.backend.score(sent, response, meta=meta))
        return [float(x) for x in out]

    def embed(self, text: str, *, meta: dict | None = None) -> np.ndarray:
        """Embed ``text`` and return a unit-norm float64 vector."""
        self._bump("embed_calls")
        raw = self._with_retries("embed", lambda: self.backend.embed(text, meta=meta))
        vec = np.asarray(raw, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise ContractError("embedding must be a non-empty 1-d vector")
        norm = float(np.linalg.norm(vec))
        if not math.isfinite(norm) or norm == 0.0:
            raise ContractError("embedding has zero or non-finite norm")
        return vec / norm
