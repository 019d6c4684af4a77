import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from semapop.persona import (
    DEFAULT_CUE,
    LLMClientConfig,
    PersonaCache,
    PersonaRecord,
    edited_persona_from_prompt,
    generate_personas,
    mock_editor,
    mock_persona,
    render_edit_prompt,
    render_prompt,
    text_edit,
)
from semapop.schema import default_schema


def _agent(age=37):
    agent = {}
    for s in default_schema():
        agent[s.name] = s.categories[0] if s.is_categorical else 1
    agent["Age"] = age
    return agent


def test_prompt_pure_and_grounded_contains_age():
    schema = default_schema()
    a = _agent(61)
    assert render_prompt(a, schema, "implicit") == render_prompt(a, schema, "implicit")
    assert "Age: 61" in render_prompt(a, schema, "grounded")


def test_randomized_ignores_agent():
    schema = default_schema()
    assert render_prompt(_agent(20), schema, "randomized") == render_prompt(_agent(80), schema, "randomized")


def test_none_mode_has_no_prompt():
    with pytest.raises(ValueError, match="none"):
        render_prompt(_agent(), default_schema(), "none")
    with pytest.raises(ValueError):
        PersonaRecord(0, "none", "", persona_text="text")


def test_edit_prompt_roundtrip():
    prompt = render_edit_prompt("a quiet person\nwho walks", "removal")
    assert DEFAULT_CUE in prompt
    assert edited_persona_from_prompt(prompt) == "a quiet person\nwho walks"
    with pytest.raises(ValueError):
        render_edit_prompt("x", "rewrite")


class _Handler(BaseHTTPRequestHandler):
    fail_first = 0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        prompt = body["messages"][0]["content"]
        cls = type(self)
        cls.seen.append(prompt)
        if cls.fail_first > 0:
            cls.fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        payload = {"choices": [{"message": {"content": "persona for " + prompt}}]}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    _Handler.fail_first = 0
    _Handler.seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()
    server.server_close()


def _client(endpoint, **kw):
    return LLMClientConfig(endpoint=endpoint, backoff=0.01, request_timeout=5, **kw)


def test_empty_prompt_list():
    res = generate_personas([], _client("http://127.0.0.1:9"))
    assert res.texts == [] and res.ok


def test_stub_server_order(stub_server):
    res = generate_personas(["p0", "p1", "p2"], _client(stub_server, max_parallel=3))
    assert res.texts == ["persona for p0", "persona for p1", "persona for p2"]
    assert res.failed == []


def test_retry_then_success(stub_server):
    _Handler.fail_first = 2
    res = generate_personas(["only"], _client(stub_server, max_parallel=1))
    assert res.texts == ["persona for only"]
    assert len(_Handler.seen) == 3


def test_unreachable_endpoint_records_failures():
    res = generate_personas(["a", "b"], _client("http://127.0.0.1:9/none", retries=2))
    assert res.texts == [None, None]
    assert res.failed == [0, 1]


def test_cache_avoids_resend(stub_server, tmp_path):
    cache = PersonaCache(tmp_path)
    generate_personas(["x", "y"], _client(stub_server), cache)
    sent = len(_Handler.seen)
    again = generate_personas(["x", "y"], _client(stub_server), PersonaCache(tmp_path))
    assert again.texts == ["persona for x", "persona for y"]
    assert len(_Handler.seen) == sent


def test_text_edit_passthrough_and_cache(tmp_path):
    assert text_edit([], "insertion", edited_persona_from_prompt).texts == []
    texts = ["first persona", "second persona"]
    assert text_edit(texts, "removal", edited_persona_from_prompt).texts == texts
    cache = PersonaCache(tmp_path)
    calls = []

    def editor(prompt):
        calls.append(prompt)
        return edited_persona_from_prompt(prompt).upper()

    editor.__name__ = "upper"
    first = text_edit(texts, "insertion", editor, cache)
    second = text_edit(texts, "insertion", editor, PersonaCache(tmp_path))
    assert first.texts == second.texts == ["FIRST PERSONA", "SECOND PERSONA"]
    assert len(calls) == 2
    # a different variant is a different cache entry
    text_edit(texts, "removal", editor, cache)
    assert len(calls) == 4


def test_client_config_validation(monkeypatch):
    with pytest.raises(ValueError):
        LLMClientConfig(top_p=0)
    monkeypatch.setenv("SEMAPOP_LLM_ENDPOINT", "http://example.invalid")
    monkeypatch.setenv("SEMAPOP_LLM_API_KEY", "s3cret-token")
    cfg = LLMClientConfig.from_env()
    assert cfg.endpoint == "http://example.invalid" and cfg.api_key == "s3cret-token"
    assert "s3cret" not in repr(cfg)


def test_mock_persona_modes(toy_pop):
    row = toy_pop.frame.iloc[0].to_dict()
    implicit = mock_persona(row, toy_pop.schema, "implicit")
    grounded = mock_persona(row, toy_pop.schema, "grounded")
    assert f"cars={row['Cars']}" in grounded
    assert "cars=" in implicit and f"region={row['Region']}" in implicit
    assert mock_persona(row, toy_pop.schema, "none") == ""
    other = toy_pop.frame.iloc[1].to_dict()
    assert mock_persona(row, toy_pop.schema, "randomized") == mock_persona(other, toy_pop.schema, "randomized")


def test_mock_editor_variants():
    edit = mock_editor("pt_trips")
    base = "region=Urban pt_trips=low cars=moderate"
    assert edit(render_edit_prompt(base, "insertion")) == "region=Urban cars=moderate pt_trips=high"
    assert edit(render_edit_prompt(base, "removal")) == "region=Urban cars=moderate"
    assert edit(render_edit_prompt(base, "suppression")) == "region=Urban pt_trips=none cars=moderate"
