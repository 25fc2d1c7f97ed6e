import json

import httpx
import numpy as np
import pytest

from corona.errors import BackendError, ValidationError
from corona.graph import Stage
from corona.llm import (BackendSpec, Gateway, LlmConfig, MockChat, MockEmbedding, OpenAIChat, OpenAIEmbedding,
                        decade_bucket, extract_attribute_values, intent_prompt, preference_prompt, render_profile,
                        render_record, summarize, token_vector, tokenize)

from conftest import small_llm


class CountingChat:
    def __init__(self, fail_times=0, retryable=True):
        self.calls = 0
        self.fail_times = fail_times
        self.retryable = retryable

    def __call__(self, prompt, temperature):
        self.calls += 1
        if self.calls <= self.fail_times:
            raise BackendError("boom", retryable=self.retryable)
        return f"echo {len(prompt)} {temperature}"


def test_profile_rendering_fills_unknown():
    text = render_profile({"Age": 31, "Gender": "F", "hobby": "chess"})
    assert text == ("Age: 31; Gender: F; Country: unknown; Language: unknown; Occupation: unknown; "
                    "Hobby: chess")


def test_record_rendering():
    rec = {"id": "i1", "title": "Alpha", "year": 1987, "genre": ["noir", "war"], "category": "feature"}
    assert render_record(rec) == "Title: Alpha; Year: 1987; Category: feature; Genre: noir, war"


def test_prompts_structure():
    p = preference_prompt({"Age": 20}, noun="book")
    lines = p.splitlines()
    assert lines[0] == "Task: preference reasoning"
    assert "book" in lines[1]
    assert lines[2].startswith("User profile: Age: 20;")
    s = summarize([{"id": "a", "title": "A", "year": 1991, "genre": "noir"}])
    q = intent_prompt(s, [{"title": "A", "year": 1991}, {"title": "B", "year": 2003}], noun="book", verb="read")
    assert "No.1: Title: A; Year: 1991" in q and "No.2: Title: B; Year: 2003" in q
    assert q.endswith(s.rendered_text)
    with pytest.raises(ValidationError):
        intent_prompt(s, [])
    assert "(no recorded interactions)" in intent_prompt(s, [], empty_history=True)


def test_summary_counts_and_ties():
    recs = [{"id": "1", "title": "a", "year": 1987, "genre": ["noir", "war"]},
            {"id": "2", "title": "b", "year": 1981, "genre": "war"},
            {"id": "3", "title": "c", "year": 2004, "genre": ["anime"]},
            {"id": "4", "title": "d", "year": 2001, "genre": ["noir"]}]
    s = summarize(recs)
    assert s.histograms["genre"] == {"noir": 2, "war": 2, "anime": 1}
    assert s.top_lists["genre"] == ["noir", "war", "anime"]
    assert s.histograms["release period"] == {"1980-1990": 2, "2000-2010": 2}
    assert "title" not in s.histograms
    assert summarize(recs, top_n=1).top_lists["genre"] == ["noir"]
    assert summarize([]).rendered_text == "No candidate items were retrieved."
    assert decade_bucket(1990) == "1990-2000"


def test_mock_chat_echoes_values_deterministically():
    prompt = preference_prompt({"Age": 44, "Favorite genre": "noir"})
    assert extract_attribute_values(prompt) == ["44", "noir"]
    a = MockChat(3)(prompt, 0.2)
    assert a == MockChat(3)(prompt, 0.9)
    assert "44" in tokenize(a) and "noir" in tokenize(a)
    assert a != MockChat(4)(prompt, 0.2)


def test_mock_embedding_is_normalized_token_sum():
    emb = MockEmbedding(0, 32)
    raw = 2 * token_vector(0, 32, "noir") + token_vector(0, 32, "war")
    np.testing.assert_allclose(emb("Noir, noir war."), raw / np.linalg.norm(raw), atol=1e-12)
    assert emb("half-life") @ emb("half-life") == pytest.approx(1.0)
    assert not np.allclose(emb("half-life"), emb("half life"))
    with pytest.raises(ValidationError):
        emb("  ...  ")


def test_identical_prompts_hit_backend_once():
    chat = CountingChat()
    gw = Gateway(small_llm(), chat_backend=chat)
    outs = {gw.complete("same prompt") for _ in range(25)}
    assert chat.calls == 1 and len(outs) == 1
    assert gw.stats.calls == 1 and gw.stats.cache_hits == 24


def test_disk_cache_survives_restart(tmp_path):
    chat = CountingChat()
    Gateway(small_llm(), tmp_path, chat_backend=chat).complete("p")
    again = Gateway(small_llm(), tmp_path, chat_backend=chat)
    again.complete("p")
    assert chat.calls == 1 and again.stats.cache_hits == 1


def test_temperature_is_part_of_the_key(tmp_path):
    chat = CountingChat()
    Gateway(small_llm(temperature=0.2), tmp_path, chat_backend=chat).complete("p")
    Gateway(small_llm(temperature=0.7), tmp_path, chat_backend=chat).complete("p")
    assert chat.calls == 2


def test_retry_backoff_schedule():
    sleeps = []
    chat = CountingChat(fail_times=2)
    gw = Gateway(small_llm(), chat_backend=chat, sleep=sleeps.append)
    gw.complete("p")
    assert chat.calls == 3 and sleeps == [1.0, 2.0]


def test_retries_exhausted_and_fatal_errors():
    sleeps = []
    gw = Gateway(small_llm(), chat_backend=CountingChat(fail_times=5), sleep=sleeps.append)
    with pytest.raises(BackendError, match="3 attempt"):
        gw.complete("p")
    assert sleeps == [1.0, 2.0]
    fatal = CountingChat(fail_times=5, retryable=False)
    with pytest.raises(BackendError):
        Gateway(small_llm(), chat_backend=fatal, sleep=sleeps.append).complete("p")
    assert fatal.calls == 1


def test_empty_prompt_rejected():
    with pytest.raises(ValidationError):
        Gateway(small_llm()).complete("   ")


def test_encode_text_projects_and_normalizes():
    gw = Gateway(small_llm())
    q = gw.encode_text("noir western", Stage.INTENT, source="prompt")
    assert q.vector.shape == (16,) and np.isclose(np.linalg.norm(q.vector), 1.0)
    assert q.stage is Stage.INTENT
    assert np.array_equal(q.vector, Gateway(small_llm()).encode_text("noir western").vector)


def test_config_validation():
    with pytest.raises(ValidationError):
        LlmConfig(temperature=1.5)
    with pytest.raises(ValidationError):
        LlmConfig(dim=64, embed_dim_native=32)


# ---- wire format ----------------------------------------------------------------

def _spec(**kw):
    return BackendSpec(**{"kind": "openai", "endpoint": "http://llm.test/v1", "model": "m1",
                          "api_key_env": "CORONA_TEST_KEY", **kw})


def test_openai_chat_wire(monkeypatch):
    monkeypatch.setenv("CORONA_TEST_KEY", "sekrit")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "hi"}}]})

    chat = OpenAIChat(_spec(), client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert chat("hello", 0.2) == "hi"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sekrit"
    assert seen["body"] == {"model": "m1", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.2}


def test_openai_embedding_wire(monkeypatch):
    monkeypatch.setenv("CORONA_TEST_KEY", "k")

    def handler(request):
        assert request.url.path == "/v1/embeddings"
        assert json.loads(request.content) == {"model": "m1", "input": "txt"}
        return httpx.Response(200, json={"data": [{"embedding": [0.1, 0.2, 0.3]}]})

    emb = OpenAIEmbedding(_spec(), client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert emb("txt").tolist() == [0.1, 0.2, 0.3]


@pytest.mark.parametrize("response", [
    httpx.Response(500, json={}),
    httpx.Response(200, text="not json"),
    httpx.Response(200, json={"choices": []}),
])
def test_openai_failures_become_backend_errors(monkeypatch, response):
    monkeypatch.setenv("CORONA_TEST_KEY", "k")
    chat = OpenAIChat(_spec(), client=httpx.Client(transport=httpx.MockTransport(lambda r: response)))
    with pytest.raises(BackendError):
        chat("x", 0.2)


def test_transport_error_and_missing_key(monkeypatch):
    monkeypatch.setenv("CORONA_TEST_KEY", "k")

    def boom(request):
        raise httpx.ConnectError("refused", request=request)

    chat = OpenAIChat(_spec(), client=httpx.Client(transport=httpx.MockTransport(boom)))
    with pytest.raises(BackendError, match="transport"):
        chat("x", 0.2)
    monkeypatch.delenv("CORONA_TEST_KEY")
    with pytest.raises(BackendError) as info:
        chat("x", 0.2)
    assert not info.value.retryable


def test_wrong_embedding_width_is_fatal(monkeypatch):
    cfg = small_llm()
    gw = Gateway(cfg, embedding_backend=lambda text: np.ones(3))
    with pytest.raises(BackendError, match="shape"):
        gw.embed_native("x")
