"""Persona prompts, the chat-completion client, and offline persona writers."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
from filelock import FileLock

from semapop.schema import AttributeSchema

logger = logging.getLogger(__name__)

MODES = ("implicit", "grounded", "randomized", "none")
GROUP_TITLES = {"demographic": "Demographic", "household": "Household", "behavioral": "Daily travel and activities"}

IMPLICIT_TEMPLATE = """You will write a short persona for one resident, based on survey information.

{attributes}

Write 3-5 sentences that summarize who this person is and how they tend to travel.
Guidance:
- Speak in qualitative terms (for example "rarely", "a large household", "early riser").
- Do not state any exact numbers, counts, ages, or clock times.
- Keep it in the third person and do not use a name.
"""

GROUNDED_TEMPLATE = """You will write a short persona for one resident, based on survey information.

{attributes}

Write 3-5 sentences that summarize who this person is and how they tend to travel.
Guidance:
- Mention every attribute above with its exact value.
- Keep it in the third person and do not use a name.
"""

RANDOMIZED_TEMPLATE = """You will write a short persona for a resident of a Swedish municipality.

Invent a plausible person; no survey information is given.
Write 3-5 sentences that summarize who this person is and how they tend to travel.
Keep it in the third person and do not use a name.
"""

EDIT_TEMPLATES = {
    "insertion": """Edit the persona below as little as possible so that it clearly signals that the person
{cue}. Add at most one short phrase, keep the rest of the text unchanged, and keep it grammatical.

Persona:
{persona}

Return only the edited persona.""",
    "removal": """Edit the persona below as little as possible by deleting every phrase that signals that the person
{cue}. Do not add new content, keep the rest of the text unchanged, and keep it grammatical.

Persona:
{persona}

Return only the edited persona.""",
    "suppression": """Edit the persona below as little as possible so that it signals that the person does NOT
{cue}: replace phrases that signal it with their opposite. Keep the rest of the text unchanged and grammatical.

Persona:
{persona}

Return only the edited persona.""",
}
DEFAULT_CUE = "regularly uses public transport"


def _format_value(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _attribute_lines(agent, schema: AttributeSchema) -> str:
    lines = []
    for group, title in GROUP_TITLES.items():
        specs = [s for s in schema if s.group == group]
        if specs:
            lines.append(f"{title}:")
            lines.extend(f"- {s.name.replace('_', ' ')}: {_format_value(agent[s.name])}" for s in specs)
    return "\n".join(lines)


def render_prompt(agent, schema: AttributeSchema, mode: str) -> str:
    """Persona-generation prompt for one agent row (mapping name -> value)."""
    if mode == "none":
        raise ValueError("mode 'none' uses zero embeddings and has no prompt")
    if mode == "implicit":
        return IMPLICIT_TEMPLATE.format(attributes=_attribute_lines(agent, schema))
    if mode == "grounded":
        return GROUNDED_TEMPLATE.format(attributes=_attribute_lines(agent, schema))
    if mode == "randomized":
        return RANDOMIZED_TEMPLATE
    raise ValueError(f"unknown persona mode {mode!r}")


def render_edit_prompt(persona: str, variant: str, cue: str = DEFAULT_CUE) -> str:
    if variant not in EDIT_TEMPLATES:
        raise ValueError(f"unknown text edit variant {variant!r}")
    return EDIT_TEMPLATES[variant].format(persona=persona, cue=cue)


@dataclass
class PersonaRecord:
    agent_index: int
    mode: str
    prompt: str
    persona_text: str = ""
    embedding_ref: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown persona mode {self.mode!r}")
        if self.mode == "none" and self.persona_text:
            raise ValueError("mode 'none' cannot carry persona text")


@dataclass
class LLMClientConfig:
    endpoint: str = ""
    model_name: str = "mock"
    temperature: float = 0.9
    top_p: float = 0.9
    max_new_tokens: int = 512
    request_timeout: float = 60.0
    max_parallel: int = 4
    retries: int = 3
    backoff: float = 1.0
    api_key: str | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")

    @classmethod
    def from_env(cls, **overrides) -> LLMClientConfig:
        overrides.setdefault("endpoint", os.environ.get("SEMAPOP_LLM_ENDPOINT", ""))
        overrides.setdefault("api_key", os.environ.get("SEMAPOP_LLM_API_KEY"))
        return cls(**overrides)


@dataclass
class GenerationResult:
    texts: list[str | None]
    failed: list[int]

    @property
    def ok(self) -> bool:
        return not self.failed


class PersonaCache:
    """JSON-lines cache of generated texts keyed by a content hash.

    One writer at a time, guarded by an advisory lock file.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.path = self.directory / "texts.jsonl"
        self.lock = FileLock(str(self.directory / ".lock"))
        self._entries: dict[str, str] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                self._entries[rec["key"]] = rec["text"]

    @staticmethod
    def key(prompt: str, tag: str, model_name: str) -> str:
        return hashlib.sha256(json.dumps([prompt, tag, model_name]).encode()).hexdigest()

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def put_many(self, items: dict[str, str]) -> None:
        new = {k: v for k, v in items.items() if k not in self._entries}
        if not new:
            return
        with self.lock:
            with self.path.open("a", encoding="utf-8") as fh:
                for k, v in new.items():
                    fh.write(json.dumps({"key": k, "text": v}) + "\n")
        self._entries.update(new)

    def __len__(self) -> int:
        return len(self._entries)


def chat_completion(prompt: str, client: LLMClientConfig, http: httpx.Client) -> str:
    payload = {
        "model": client.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": client.temperature,
        "top_p": client.top_p,
        "max_tokens": client.max_new_tokens,
    }
    headers = {"Authorization": f"Bearer {client.api_key}"} if client.api_key else {}
    resp = http.post(client.endpoint, json=payload, headers=headers, timeout=client.request_timeout)
    resp.raise_for_status()
    return resp.json()["choices"][0]["message"]["content"]


def _with_retries(fn: Callable[[], str], client: LLMClientConfig) -> str:
    delay = client.backoff
    for attempt in range(client.retries):
        try:
            return fn()
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            if attempt == client.retries - 1:
                raise
            logger.warning("LLM request failed (%s); retrying in %.1fs", exc, delay)
            time.sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")


def complete_all(
    prompts: Sequence[str],
    client: LLMClientConfig,
    cache: PersonaCache | None = None,
    tag: str = "persona",
) -> GenerationResult:
    """Send every prompt (up to ``max_parallel`` in flight); results in input order.

    Cached prompts are not re-sent.  Failed indices are listed in the result
    instead of raising, so partial runs can be resumed.
    """
    texts: list[str | None] = [None] * len(prompts)
    keys = [PersonaCache.key(p, tag, client.model_name) for p in prompts]
    todo = []
    for i, k in enumerate(keys):
        hit = cache.get(k) if cache is not None else None
        if hit is None:
            todo.append(i)
        else:
            texts[i] = hit
    failed: list[int] = []
    if todo:
        with httpx.Client() as http:
            def one(i):
                try:
                    return i, _with_retries(lambda: chat_completion(prompts[i], client, http), client)
                except Exception as exc:  # recorded in the failure manifest
                    logger.error("prompt %d failed: %s", i, exc)
                    return i, None

            with ThreadPoolExecutor(max_workers=client.max_parallel) as pool:
                for i, text in pool.map(one, todo):
                    if text is None:
                        failed.append(i)
                    else:
                        texts[i] = text
    if cache is not None:
        cache.put_many({keys[i]: texts[i] for i in todo if texts[i] is not None})
    return GenerationResult(texts, sorted(failed))


def generate_personas(prompts: Sequence[str], client: LLMClientConfig, cache: PersonaCache | None = None) -> GenerationResult:
    return complete_all(prompts, client, cache, tag="persona")


def text_edit(
    personas: Sequence[str],
    variant: str,
    client: LLMClientConfig | Callable[[str], str],
    cache: PersonaCache | None = None,
    cue: str = DEFAULT_CUE,
) -> GenerationResult:
    """Minimal persona edits for one intervention variant.

    ``client`` is either an HTTP client configuration or a plain callable
    mapping an edit prompt to edited text (used for offline stubs).
    """
    prompts = [render_edit_prompt(p, variant, cue) for p in personas]
    if callable(client):
        out = []
        keys = [PersonaCache.key(p, f"edit:{variant}", getattr(client, "__name__", "callable")) for p in prompts]
        for p, k in zip(prompts, keys):
            hit = cache.get(k) if cache is not None else None
            out.append(hit if hit is not None else client(p))
        if cache is not None:
            cache.put_many(dict(zip(keys, out)))
        return GenerationResult(out, [])
    return complete_all(prompts, client, cache, tag=f"edit:{variant}")


def edited_persona_from_prompt(prompt: str) -> str:
    """Extract the original persona from an edit prompt (pass-through stub)."""
    return prompt.split("Persona:\n", 1)[1].rsplit("\n\nReturn only", 1)[0]


def qualitative_level(value: float, spec) -> str:
    if value == 0:
        return "none"
    z = (value - spec.mean) / spec.std
    if z < -0.5:
        return "low"
    if z > 0.5:
        return "high"
    return "moderate"


def mock_persona(agent, schema: AttributeSchema, mode: str) -> str:
    """Deterministic offline persona text, one ``name=value`` token per attribute.

    ``implicit`` replaces numerical values by qualitative levels, ``grounded``
    keeps exact values, and ``randomized`` ignores the agent.
    """
    if mode == "none":
        return ""
    if mode == "randomized":
        return "resident=any household=any travel=any"
    tokens = []
    for s in schema:
        v = agent[s.name]
        if s.is_categorical or mode == "grounded":
            tokens.append(f"{s.name.lower()}={_format_value(v)}")
        else:
            tokens.append(f"{s.name.lower()}={qualitative_level(float(v), s)}")
    return " ".join(tokens)


def mock_editor(cue_token: str, high_value: str = "high", low_value: str = "none") -> Callable[[str], str]:
    """Rule-based stand-in for the editing LLM over :func:`mock_persona` texts.

    insertion sets the cue attribute to ``high_value``; removal drops the cue
    token; suppression sets it to ``low_value``.
    """

    def edit(prompt: str) -> str:
        persona = edited_persona_from_prompt(prompt)
        tokens = persona.split()
        key = cue_token.lower() + "="
        if "clearly signals" in prompt:
            kept = [t for t in tokens if not t.startswith(key)]
            return " ".join(kept + [key + high_value])
        if "by deleting" in prompt:
            return " ".join(t for t in tokens if not t.startswith(key))
        return " ".join(key + low_value if t.startswith(key) else t for t in tokens)

    edit.__name__ = f"mock_editor[{cue_token}]"
    return edit
