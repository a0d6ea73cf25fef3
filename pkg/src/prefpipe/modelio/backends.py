"""Backend implementations: the HTTP transport and the scripted mocks.

A backend is a thin, stateless adapter exposing four request shapes (complete,
choice_logprobs, score, embed). Retries, truncation, and telemetry live in the
client, not here.
"""

import os
import random
import urllib.parse
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np
import requests

from .._util import count_tokens, stable_hash
from ..errors import BackendError, CapabilityError, ConfigError
from .endpoints import ModelEndpoint


@dataclass(frozen=True)
class RawCompletion:
    """One raw model completion: the text plus per-token logprobs when the
    backend reports them (length equals the generated token count)."""

    text: str
    token_logprobs: tuple[float, ...] | None = None


@runtime_checkable
class Backend(Protocol):
    def complete(
        self, prompt: str, *, max_tokens: int, temperature: float, seed: int | None = None, meta: dict | None = None
    ) -> RawCompletion: ...

    def choice_logprobs(
        self, prompt: str, labels: tuple[str, str], *, meta: dict | None = None
    ) -> tuple[float, float] | None: ...

    def score(self, prompt: str, response: str, *, meta: dict | None = None) -> list[float]: ...

    def embed(self, text: str, *, meta: dict | None = None) -> list[float]: ...


# ---------------------------------------------------------------------------
# HTTP backend (chat-completion compatible)
# ---------------------------------------------------------------------------


class HttpBackend:
    """Adapter for chat-completion compatible servers.

    Judge label logprobs use the label-token convention: scan generated positions
    for the first one whose top-logprob alternatives contain both discriminator
    tokens (the labels' final words, e.g. "A" and "B"); absence means no logprob
    support and the caller falls back to sampling.
    """

    def __init__(self, endpoint: ModelEndpoint, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.session = session or requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        env = self.endpoint.api_key_env
        if env:
            key = os.environ.get(env)
            if not key:
                raise ConfigError(f"endpoint expects API key in ${env}, which is unset")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + path
        try:
            resp = self.session.post(url, json=body, headers=self._headers(), timeout=self.endpoint.timeout)
        except requests.RequestException as exc:
            raise BackendError(f"POST {url} failed: {exc}", retryable=True) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendError(f"POST {url} -> HTTP {resp.status_code}", retryable=True)
        if resp.status_code >= 400:
            raise BackendError(
                f"POST {url} -> HTTP {resp.status_code}: {resp.text[:200]}", retryable=False
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendError(f"POST {url} returned a non-JSON body", retryable=False) from exc

    def _chat(self, prompt: str, *, max_tokens: int, temperature: float, seed: int | None, top_logprobs: int) -> dict:
        body = {
            "model": self.endpoint.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_tokens,
            "temperature": temperature,
            "logprobs": True,
            "top_logprobs": top_logprobs,
        }
        if seed is not None:
            body["seed"] = seed
        body.update(self.endpoint.extra.get("body", {}))
        return self._post("/chat/completions", body)

    @staticmethod
    def _choice(data: dict) -> dict:
        try:
            return data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("malformed chat completion response", retryable=False) from exc

    def complete(self, prompt, *, max_tokens, temperature, seed=None, meta=None) -> RawCompletion:
        choice = self._choice(self._chat(prompt, max_tokens=max_tokens, temperature=temperature, seed=seed, top_logprobs=1))
        try:
            text = choice["message"]["content"] or ""
        except (KeyError, TypeError) as exc:
            raise BackendError("chat completion response lacks message content", retryable=False) from exc
        logprobs = None
        content = (choice.get("logprobs") or {}).get("content")
        if content:
            try:
                logprobs = tuple(float(t["logprob"]) for t in content)
            except (KeyError, TypeError, ValueError):
                logprobs = None
        return RawCompletion(text, logprobs)

    def choice_logprobs(self, prompt, labels, *, meta=None):
        discriminators = [label.split()[-1] for label in labels]
        choice = self._choice(self._chat(prompt, max_tokens=16, temperature=0.0, seed=None, top_logprobs=20))
        content = (choice.get("logprobs") or {}).get("content") or []
        for position in content:
            alts: dict[str, float] = {}
            candidates = [position] + list(position.get("top_logprobs") or [])
            for alt in candidates:
                token = str(alt.get("token", "")).strip().strip("\"'")
                if token and token not in alts:
                    try:
                        alts[token] = float(alt["logprob"])
                    except (KeyError, TypeError, ValueError):
                        continue
            if all(d in alts for d in discriminators):
                return alts[discriminators[0]], alts[discriminators[1]]
        return None

    def score(self, prompt, response, *, meta=None) -> list[float]:
        if not self.endpoint.extra.get("completions_echo"):
            raise CapabilityError(
                "endpoint does not support per-token scoring of supplied text "
                "(set extra.completions_echo for servers with a legacy echo route)"
            )
        body = {
            "model": self.endpoint.model_id,
            "prompt": prompt + response,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        data = self._post("/completions", body)
        try:
            lp = data["choices"][0]["logprobs"]
            offsets, token_lps = lp["text_offset"], lp["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CapabilityError("echo route returned no usable logprobs") from exc
        out = []
        for off, val in zip(offsets, token_lps):
            if off >= len(prompt):
                if val is None:
                    raise CapabilityError("echo route returned null logprobs inside the response span")
                out.append(float(val))
        return out

    def embed(self, text, *, meta=None) -> list[float]:
        body = {"model": self.endpoint.model_id, "input": [text]}
        data = self._post("/embeddings", body)
        try:
            return [float(x) for x in data["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError("malformed embeddings response", retryable=False) from exc


# ---------------------------------------------------------------------------
# Scripted backends
# ---------------------------------------------------------------------------


class HashMockBackend:
    """Deterministic stand-in model: every reply is a pure function of
    (seed, request content). Useful for plumbing tests and byte-identical reruns."""

    def __init__(
        self,
        seed: int = 0,
        token_logprob: float | None = None,
        embed_dim: int = 32,
        think: bool = True,
        think_tags: tuple[str, str] = ("<think>", "</think>"),
    ):
        self.seed = seed
        self.token_logprob = token_logprob
        self.embed_dim = embed_dim
        self.think = think
        self.think_tags = think_tags

    def _rng(self, *scope) -> random.Random:
        return random.Random(stable_hash(self.seed, *scope))

    def _token_logprobs(self, text: str, rng: random.Random) -> tuple[float, ...]:
        n = count_tokens(text)
        if self.token_logprob is not None:
            return tuple([self.token_logprob] * n)
        return tuple(-rng.uniform(0.05, 2.0) for _ in range(n))

    def complete(self, prompt, *, max_tokens, temperature, seed=None, meta=None) -> RawCompletion:
        rng = self._rng("complete", prompt, max_tokens, temperature, seed, sorted((meta or {}).items()))
        summary = (
            f"Preference profile p{rng.randrange(100000):05d}: favors theme-{rng.randrange(100)} "
            f"items and weighs attribute-{rng.randrange(10)} heavily."
        )
        if self.think:
            head, tail = self.think_tags
            reasoning = f"Recurring signal s{rng.randrange(1000)} stands out across the interactions."
            text = f"{head}{reasoning}{tail}\n{summary}"
        else:
            text = summary
        return RawCompletion(text, self._token_logprobs(text, rng))

    def choice_logprobs(self, prompt, labels, *, meta=None):
        rng = self._rng("choice", prompt, labels, sorted((meta or {}).items()))
        return -rng.uniform(0.05, 3.0), -rng.uniform(0.05, 3.0)

    def score(self, prompt, response, *, meta=None) -> list[float]:
        rng = self._rng("score", prompt, response)
        if self.token_logprob is not None:
            return [self.token_logprob] * count_tokens(response)
        return [-rng.uniform(0.05, 2.0) for _ in range(count_tokens(response))]

    def embed(self, text, *, meta=None) -> list[float]:
        gen = np.random.default_rng(stable_hash(self.seed, "embed", text))
        v = gen.standard_normal(self.embed_dim)
        return (v / np.linalg.norm(v)).tolist()


class ScriptBackend:
    """Test helper driven by plain callables; any capability left None raises.

    ``completer(prompt, ctx)`` returns the reply text (or a RawCompletion);
    ``chooser(prompt, labels, ctx)`` returns (logprob_a, logprob_b) or None;
    ``scorer(prompt, response)`` returns per-token logprobs;
    ``embedder(text)`` returns a vector.
    """

    def __init__(
        self,
        completer: Callable | None = None,
        chooser: Callable | None = None,
        scorer: Callable | None = None,
        embedder: Callable | None = None,
        token_logprob: float | None = -0.5,
    ):
        self.completer = completer
        self.chooser = chooser
        self.scorer = scorer
        self.embedder = embedder
        self.token_logprob = token_logprob

    def complete(self, prompt, *, max_tokens, temperature, seed=None, meta=None) -> RawCompletion:
        if self.completer is None:
            raise CapabilityError("script backend has no completer")
        out = self.completer(prompt, {"max_tokens": max_tokens, "temperature": temperature, "seed": seed, "meta": meta or {}})
        if isinstance(out, RawCompletion):
            return out
        lp = None
        if self.token_logprob is not None:
            lp = tuple([self.token_logprob] * count_tokens(out))
        return RawCompletion(out, lp)

    def choice_logprobs(self, prompt, labels, *, meta=None):
        if self.chooser is None:
            return None
        return self.chooser(prompt, labels, {"meta": meta or {}})

    def score(self, prompt, response, *, meta=None) -> list[float]:
        if self.scorer is None:
            raise CapabilityError("script backend has no scorer")
        return list(self.scorer(prompt, response))

    def embed(self, text, *, meta=None) -> list[float]:
        if self.embedder is None:
            raise CapabilityError("script backend has no embedder")
        return list(self.embedder(text))


# ---------------------------------------------------------------------------
# Backend construction from endpoint configs
# ---------------------------------------------------------------------------

MockFactory = Callable[[dict, ModelEndpoint], Backend]

_MOCK_KINDS: dict[str, MockFactory] = {}


def register_mock_kind(name: str, factory: MockFactory) -> None:
    """Expose a scripted backend under ``mock:<name>?...`` endpoint URLs."""
    _MOCK_KINDS[name] = factory


def _parse_mock_url(url: str) -> tuple[str, dict]:
    rest = url[len("mock:") :]
    kind, _, query = rest.partition("?")
    params = dict(urllib.parse.parse_qsl(query, keep_blank_values=True))
    return kind or "hash", params


def build_backend(endpoint: ModelEndpoint) -> Backend:
    url = endpoint.base_url
    if url.startswith("mock:"):
        kind, params = _parse_mock_url(url)
        factory = _MOCK_KINDS.get(kind)
        if factory is None:
            raise ConfigError(
                f"unknown mock backend kind {kind!r}; registered: {sorted(_MOCK_KINDS)} "
                "(lab kinds register when prefpipe.simlab is imported)"
            )
        return factory(params, endpoint)
    if url.startswith(("http://", "https://")):
        return HttpBackend(endpoint)
    raise ConfigError(f"unsupported base_url scheme: {url!r}")


def _hash_factory(params: dict, endpoint: ModelEndpoint) -> Backend:
    return HashMockBackend(
        seed=int(params.get("seed", "0")),
        token_logprob=float(params["logprob"]) if "logprob" in params else None,
        embed_dim=int(params.get("dim", "32")),
        think=params.get("think", "1").lower() not in ("0", "false", "no"),
        think_tags=(endpoint.think_open, endpoint.think_close),
    )


register_mock_kind("hash", _hash_factory)
