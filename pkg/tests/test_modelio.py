import json
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from prefpipe.errors import (
    BackendError,
    CapabilityError,
    ConfigError,
    ContractError,
    GenerationError,
    JudgeError,
    ValidationError,
)
from prefpipe.modelio import (
    HashMockBackend,
    ModelClient,
    ModelEndpoint,
    ScriptBackend,
    build_backend,
    label_probability,
    load_endpoint,
    parse_selection,
    split_reasoning,
)

MOCK = ModelEndpoint(base_url="mock:hash", role="policy")


def make_client(backend, **endpoint_overrides):
    ep_kwargs = {"base_url": "mock:hash", **endpoint_overrides}
    return ModelClient(ModelEndpoint(**ep_kwargs), backend=backend, sleep=lambda s: None)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class TestSplitReasoning:
    def test_extracts_first_block(self):
        reasoning, summary = split_reasoning("<think>because</think>\nthe summary")
        assert reasoning == "because"
        assert summary == "the summary"

    def test_no_markers_is_all_summary(self):
        assert split_reasoning("plain text") == (None, "plain text")

    def test_unclosed_tag_is_all_summary(self):
        text = "<think>never closed... summary?"
        assert split_reasoning(text) == (None, text.strip())

    def test_text_around_block_is_joined(self):
        reasoning, summary = split_reasoning("before <think>r</think> after")
        assert reasoning == "r"
        assert summary == "before  after".strip()

    def test_empty_block_gives_no_reasoning(self):
        reasoning, summary = split_reasoning("<think>  </think>summary")
        assert reasoning is None
        assert summary == "summary"

    def test_custom_tags(self):
        reasoning, summary = split_reasoning("[r]why[/r] text", "[r]", "[/r]")
        assert (reasoning, summary) == ("why", "text")

    def test_synthetic_corpus(self):
        # parser oracle over generated completions with and without markers
        rng = random.Random(7)
        for i in range(50):
            reasoning = f"step {i} reasoning" if rng.random() < 0.5 else None
            summary = f"summary body {i}"
            if reasoning is None:
                text = summary
            else:
                text = f"<think>{reasoning}</think>\n{summary}"
            got_reasoning, got_summary = split_reasoning(text)
            assert got_reasoning == reasoning
            assert got_summary == summary


class TestParseSelection:
    def test_clean_json(self):
        assert parse_selection('{"selection": "Item A"}') == "A"
        assert parse_selection('{"selection": "Item B"}', strict=True) == "B"

    def test_fenced_json(self):
        assert parse_selection('```json\n{"selection": "Item B"}\n```') == "B"
        assert parse_selection('```\n{"selection": "Item A"}\n```', strict=True) == "A"

    def test_noisy_reply_recovered_by_default(self):
        text = 'Sure! {"selection": "Item A"} hope that helps'
        assert parse_selection(text) == "A"
        assert parse_selection(text, strict=True) is None

    def test_short_and_bracketed_labels(self):
        assert parse_selection('{"selection": "a"}') == "A"
        assert parse_selection('{"selection": "[Item B]"}') == "B"

    def test_unfilled_placeholder_is_no_choice(self):
        assert parse_selection('{"selection": "[Item A / Item B]"}') is None

    def test_garbage(self):
        assert parse_selection("no choice here") is None
        assert parse_selection('{"selection": 2}') is None
        assert parse_selection("") is None


def test_label_probability_hand_case():
    # ln p_A = -0.1, ln p_B = -2.4 under a two-way softmax
    assert abs(label_probability(-0.1, -2.4) - 0.9089) < 1e-4


def test_label_probability_symmetry():
    assert label_probability(-1.3, -1.3) == 0.5
    p = label_probability(-0.2, -1.7)
    q = label_probability(-1.7, -0.2)
    assert abs(p + q - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# Endpoint configuration
# ---------------------------------------------------------------------------


class TestModelEndpoint:
    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown endpoint"):
            ModelEndpoint.from_dict({"base_url": "mock:hash", "tempreature": 0.1})

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelEndpoint(base_url="")
        with pytest.raises(ConfigError):
            ModelEndpoint(base_url="mock:hash", retry_limit=-1)
        with pytest.raises(ConfigError):
            ModelEndpoint(base_url="mock:hash", max_prompt_tokens=0)
        with pytest.raises(ConfigError):
            ModelEndpoint(base_url="mock:hash", judge_samples=0)

    def test_load_yaml_and_json(self, tmp_path):
        y = tmp_path / "ep.yaml"
        y.write_text("base_url: mock:hash\ntemperature: 0.2\n")
        ep = load_endpoint(str(y))
        assert ep.base_url == "mock:hash"
        assert ep.temperature == 0.2

        j = tmp_path / "ep.json"
        j.write_text('{"base_url": "mock:hash", "model_id": "m"}')
        assert load_endpoint(str(j)).model_id == "m"

    def test_load_rejects_bad_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_endpoint(str(tmp_path / "missing.yaml"))
        bad = tmp_path / "ep.cfg"
        bad.write_text("x")
        with pytest.raises(ConfigError):
            load_endpoint(str(bad))
        notmap = tmp_path / "list.yaml"
        notmap.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_endpoint(str(notmap))


def test_build_backend_dispatch():
    assert isinstance(build_backend(MOCK), HashMockBackend)
    with pytest.raises(ConfigError, match="unknown mock backend"):
        build_backend(ModelEndpoint(base_url="mock:nosuchkind"))
    with pytest.raises(ConfigError, match="scheme"):
        build_backend(ModelEndpoint(base_url="ftp://example"))


def test_mock_url_params_reach_backend():
    backend = build_backend(ModelEndpoint(base_url="mock:hash?seed=9&logprob=-0.5&dim=4"))
    assert backend.seed == 9
    assert backend.token_logprob == -0.5
    assert backend.embed_dim == 4


# ---------------------------------------------------------------------------
# Client behavior on scripted backends
# ---------------------------------------------------------------------------


class TestGenerateSummary:
    def test_mock_is_deterministic(self):
        a = make_client(HashMockBackend(seed=3)).generate_summary("same prompt")
        b = make_client(HashMockBackend(seed=3)).generate_summary("same prompt")
        assert a == b
        assert a.reasoning is not None
        assert a.summary
        assert a.raw.startswith("<think>")

    def test_empty_completion_raises(self):
        client = make_client(ScriptBackend(completer=lambda p, ctx: "  "))
        with pytest.raises(GenerationError):
            client.generate_summary("p")

    def test_sample_seed_reaches_backend(self):
        seen = []
        client = make_client(ScriptBackend(completer=lambda p, ctx: seen.append(ctx["seed"]) or "ok"))
        client.generate_summary("p", sample_seed=1234)
        assert seen == [1234]

    def test_logprob_length_matches_tokens(self):
        result = make_client(HashMockBackend(seed=0)).generate_summary("p")
        assert len(result.token_logprobs) == len(result.raw.split())


class TestTruncation:
    def test_keeps_newest_tail(self):
        seen = []
        client = make_client(
            ScriptBackend(completer=lambda p, ctx: seen.append(p) or "ok"),
            max_prompt_tokens=4,
        )
        client.generate_summary("one two three four five six seven eight nine ten")
        assert seen == ["seven eight nine ten"]
        assert client.stats["truncations"] == 1
        assert client.stats["truncated_tokens"] == 6

    def test_noop_without_limit(self):
        seen = []
        client = make_client(ScriptBackend(completer=lambda p, ctx: seen.append(p) or "ok"))
        client.generate_summary("one two three")
        assert seen == ["one two three"]
        assert client.stats["truncations"] == 0


class TestRetries:
    def make_flaky(self, failures, retryable=True):
        calls = {"n": 0}

        def completer(prompt, ctx):
            calls["n"] += 1
            if calls["n"] <= failures:
                raise BackendError("boom", retryable=retryable)
            return "recovered"

        return ScriptBackend(completer=completer), calls

    def test_retries_then_succeeds(self):
        backend, calls = self.make_flaky(2)
        delays = []
        client = ModelClient(
            ModelEndpoint(base_url="mock:hash", retry_limit=3, backoff_base=0.5),
            backend=backend,
            sleep=delays.append,
        )
        result = client.generate_summary("p")
        assert result.summary == "recovered"
        assert calls["n"] == 3
        assert delays == [0.5, 1.0]  # exponential backoff
        assert client.stats["retries"] == 2

    def test_gives_up_after_budget(self):
        backend, calls = self.make_flaky(10)
        client = ModelClient(
            ModelEndpoint(base_url="mock:hash", retry_limit=2), backend=backend, sleep=lambda s: None
        )
        with pytest.raises(BackendError):
            client.generate_summary("p")
        assert calls["n"] == 3  # initial try + 2 retries

    def test_non_retryable_fails_fast(self):
        backend, calls = self.make_flaky(10, retryable=False)
        delays = []
        client = ModelClient(
            ModelEndpoint(base_url="mock:hash", retry_limit=5), backend=backend, sleep=delays.append
        )
        with pytest.raises(BackendError):
            client.generate_summary("p")
        assert calls["n"] == 1
        assert delays == []


class TestJudgePair:
    def test_debias_order_invariance(self):
        client = make_client(HashMockBackend(seed=2))
        p = client.judge_pair("pref", "ctx", "item one", "item two").prob_first
        q = client.judge_pair("pref", "ctx", "item two", "item one").prob_first
        assert abs(p + q - 1.0) < 1e-12

    def test_input_validation(self):
        client = make_client(HashMockBackend())
        with pytest.raises(ValidationError):
            client.judge_pair("p", None, "", "b")
        with pytest.raises(ValidationError):
            client.judge_pair("p", None, "same", "same")

    def test_single_order_without_debias(self):
        chooser = lambda prompt, labels, ctx: (-0.1, -2.4)
        client = make_client(ScriptBackend(chooser=chooser))
        verdict = client.judge_pair("p", None, "a", "b", debias=False)
        assert not verdict.debiased
        assert abs(verdict.prob_first - label_probability(-0.1, -2.4)) < 1e-12

    def test_sampling_fallback_counts_selections(self):
        replies = iter(['{"selection": "Item A"}'] * 6 + ['{"selection": "Item B"}'] * 2)
        client = make_client(
            ScriptBackend(completer=lambda p, ctx: next(replies)), judge_samples=8
        )
        verdict = client.judge_pair("p", None, "a", "b", debias=False)
        assert verdict.sampled
        assert verdict.prob_first == 6 / 8

    def test_sampling_skips_unparseable(self):
        replies = iter(["??"] * 4 + ['{"selection": "Item A"}'] * 3 + ['{"selection": "Item B"}'])
        client = make_client(
            ScriptBackend(completer=lambda p, ctx: next(replies)), judge_samples=8
        )
        verdict = client.judge_pair("p", None, "a", "b", debias=False)
        assert verdict.prob_first == 3 / 4
        assert verdict.detail["forward"]["counts"]["parse_failures"] == 4

    def test_all_unparseable_raises(self):
        client = make_client(ScriptBackend(completer=lambda p, ctx: "??"), judge_samples=4)
        with pytest.raises(JudgeError):
            client.judge_pair("p", None, "a", "b", debias=False)


class TestPolicyLogprobs:
    def test_shape_and_constant(self):
        client = make_client(HashMockBackend(token_logprob=-0.5))
        out = client.policy_logprobs("prompt", "four token long response")
        assert out == [-0.5, -0.5, -0.5, -0.5]

    def test_sum_matches_sequence_logprob(self):
        rows = [-0.25, -1.5, -0.125]
        client = make_client(ScriptBackend(scorer=lambda p, r: rows))
        out = client.policy_logprobs("p", "a b c")
        assert abs(sum(out) - sum(rows)) < 1e-9


class TestEmbed:
    def test_deterministic_and_normalized(self):
        client = make_client(HashMockBackend(seed=1))
        v1 = client.embed("same text")
        v2 = client.embed("same text")
        assert np.array_equal(v1, v2)
        assert abs(np.linalg.norm(v1) - 1.0) < 1e-6
        assert abs(float(v1 @ v1) - 1.0) < 1e-6

    def test_normalizes_raw_vectors(self):
        client = make_client(ScriptBackend(embedder=lambda t: [3.0, 4.0]))
        assert np.allclose(client.embed("t"), [0.6, 0.8])

    def test_rejects_degenerate_vectors(self):
        with pytest.raises(ContractError):
            make_client(ScriptBackend(embedder=lambda t: [0.0, 0.0])).embed("t")
        with pytest.raises(ContractError):
            make_client(ScriptBackend(embedder=lambda t: [])).embed("t")


# ---------------------------------------------------------------------------
# HTTP transport against a local server
# ---------------------------------------------------------------------------


class _ScriptedHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        self.server.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
        if self.server.queue:
            status, payload = self.server.queue.pop(0)
        else:
            status, payload = 200, self.server.default_payload(self.path, body)
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class _ScriptedServer(ThreadingHTTPServer):
    def __init__(self):
        super().__init__(("127.0.0.1", 0), _ScriptedHandler)
        self.requests = []
        self.queue = []

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server_address[1]}"

    @staticmethod
    def chat_payload(text="<think>why</think>\nan http summary", logprobs=(-0.5, -0.25)):
        return {
            "choices": [
                {
                    "message": {"content": text},
                    "logprobs": {"content": [{"token": f"t{i}", "logprob": lp} for i, lp in enumerate(logprobs)]},
                }
            ]
        }

    def default_payload(self, path, body):
        if path == "/chat/completions":
            return self.chat_payload()
        if path == "/embeddings":
            return {"data": [{"embedding": [3.0, 4.0]}]}
        return {}


@pytest.fixture()
def server():
    srv = _ScriptedServer()
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()
    thread.join(timeout=5)


def http_client(server, **overrides):
    defaults = {"base_url": server.url, "retry_limit": 2, "backoff_base": 0.01, "timeout": 5.0}
    defaults.update(overrides)
    return ModelClient(ModelEndpoint(**defaults), sleep=lambda s: None)


class TestHttpBackend:
    def test_complete_happy_path(self, server):
        result = http_client(server).generate_summary("hello")
        assert result.summary == "an http summary"
        assert result.reasoning == "why"
        assert result.token_logprobs == (-0.5, -0.25)
        body = server.requests[0]["body"]
        assert body["messages"] == [{"role": "user", "content": "hello"}]
        assert body["logprobs"] is True

    def test_api_key_header(self, server, monkeypatch):
        monkeypatch.setenv("TEST_MODEL_KEY", "sekrit")
        http_client(server, api_key_env="TEST_MODEL_KEY").generate_summary("p")
        assert server.requests[0]["headers"]["Authorization"] == "Bearer sekrit"

    def test_missing_api_key_is_config_error(self, server, monkeypatch):
        monkeypatch.delenv("NOPE_KEY", raising=False)
        with pytest.raises(ConfigError):
            http_client(server, api_key_env="NOPE_KEY").generate_summary("p")

    def test_retries_on_server_errors(self, server):
        server.queue = [(500, {}), (429, {})]
        result = http_client(server).generate_summary("p")
        assert result.summary == "an http summary"
        assert len(server.requests) == 3

    def test_client_error_fails_fast(self, server):
        server.queue = [(400, {"error": "bad request"})]
        with pytest.raises(BackendError) as exc_info:
            http_client(server).generate_summary("p")
        assert not exc_info.value.retryable
        assert len(server.requests) == 1

    def test_extra_body_merged(self, server):
        http_client(server, extra={"body": {"top_p": 0.9}}).generate_summary("p")
        assert server.requests[0]["body"]["top_p"] == 0.9

    def test_choice_logprobs_scans_label_position(self, server):
        server.queue = [
            (
                200,
                {
                    "choices": [
                        {
                            "message": {"content": '{"selection": "Item A"}'},
                            "logprobs": {
                                "content": [
                                    {"token": "{", "logprob": -0.01, "top_logprobs": []},
                                    {
                                        "token": "A",
                                        "logprob": -0.1,
                                        "top_logprobs": [
                                            {"token": "A", "logprob": -0.1},
                                            {"token": "B", "logprob": -2.4},
                                        ],
                                    },
                                ]
                            },
                        }
                    ]
                },
            )
        ]
        client = http_client(server)
        verdict = client.judge_pair("pref", None, "x", "y", debias=False)
        assert not verdict.sampled
        assert abs(verdict.prob_first - label_probability(-0.1, -2.4)) < 1e-12

    def test_no_label_position_falls_back_to_sampling(self, server):
        # first call: logprobs present but never both labels; then 3 sampled picks
        sel = (200, _ScriptedServer.chat_payload(text='{"selection": "Item A"}', logprobs=(-0.1,)))
        server.queue = [_only_brace(), sel, sel, sel]
        client = http_client(server, judge_samples=3)
        verdict = client.judge_pair("pref", None, "x", "y", debias=False)
        assert verdict.sampled
        assert verdict.prob_first == 1.0

    def test_score_requires_echo_capability(self, server):
        with pytest.raises(CapabilityError):
            http_client(server).policy_logprobs("prompt ", "response")

    def test_score_with_echo_route(self, server):
        prompt, response = "prompt text ", "resp one two"
        server.queue = [
            (
                200,
                {
                    "choices": [
                        {
                            "logprobs": {
                                "text_offset": [0, 7, 12, 17, 21],
                                "token_logprobs": [None, -0.9, -0.1, -0.2, -0.3],
                            }
                        }
                    ]
                },
            )
        ]
        client = http_client(server, extra={"completions_echo": True})
        out = client.policy_logprobs(prompt, response)
        assert out == [-0.1, -0.2, -0.3]
        assert server.requests[0]["path"] == "/completions"
        assert server.requests[0]["body"]["echo"] is True

    def test_embed_route(self, server):
        vec = http_client(server).embed("text")
        assert np.allclose(vec, [0.6, 0.8])
        assert server.requests[0]["path"] == "/embeddings"

    def test_malformed_response_is_not_retried(self, server):
        server.queue = [(200, {"nonsense": True})]
        with pytest.raises(BackendError) as exc_info:
            http_client(server).generate_summary("p")
        assert not exc_info.value.retryable


def _only_brace():
    return (
        200,
        {
            "choices": [
                {
                    "message": {"content": "{"},
                    "logprobs": {"content": [{"token": "{", "logprob": -0.01, "top_logprobs": []}]},
                }
            ]
        },
    )


def test_concurrent_calls_respect_in_flight_limit():
    active = {"now": 0, "peak": 0}
    lock = threading.Lock()

    def completer(prompt, ctx):
        with lock:
            active["now"] += 1
            active["peak"] = max(active["peak"], active["now"])
        threading.Event().wait(0.01)
        with lock:
            active["now"] -= 1
        return "ok"

    client = make_client(ScriptBackend(completer=completer), max_in_flight=2)
    threads = [threading.Thread(target=client.generate_summary, args=(f"p{i}",)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert active["peak"] <= 2
    assert client.stats["generate_calls"] == 8
