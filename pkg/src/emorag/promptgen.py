"""Emotion Prompt generation: request rendering, LLM clients, and the prompt store.

A request pairs the original transcript with its retrieved corpus texts and
their sentiment scores, plus a fixed instruction block asking the model for
two questions (severity and causes; cross-text emotional patterns) and their
answers.  The returned Q&A text is the Emotion Prompt.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from emorag.corpus import SentimentRecord
from emorag.errors import CorruptionError, EndpointError, PreconditionError, ProtocolError, ProvenanceError
from emorag.retrieval import RetrievalHit
from emorag.textproc import tokenize

TOKEN_ENV = "EMORAG_LLM_TOKEN"
MAX_RETRIEVED_CHARS = 500
TRUNCATION_MARK = " [...]"

INSTRUCTION_SEVERITY = (
    "Question 1: write one question asking how severe the speaker's depression appears "
    "and what its likely causes are, using both the original text and the retrieved texts as evidence."
)
INSTRUCTION_PATTERNS = (
    "Question 2: write one question asking what emotional patterns run across the original "
    "and retrieved texts, covering the themes they share, where their sentiments contrast, "
    "and the emotional implications underneath."
)
ANSWER_DIRECTIVE = "Then answer both questions. Reply in the form Q1, A1, Q2, A2."

INSTRUCTION_BLOCK = "\n".join([INSTRUCTION_SEVERITY, INSTRUCTION_PATTERNS, ANSWER_DIRECTIVE])


@dataclass(frozen=True)
class RetrievedItem:
    record_id: str
    text: str
    sentiment: float
    similarity: float


def _sha256(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def compute_request_hash(original_text: str, retrieved: Sequence[RetrievedItem], instruction_block: str) -> str:
    return _sha256(
        {
            "original_text": original_text,
            "retrieved": [[r.record_id, r.text, r.sentiment, r.similarity] for r in retrieved],
            "instruction_block": instruction_block,
        }
    )


@dataclass(frozen=True)
class PromptRequest:
    original_text: str
    retrieved: tuple[RetrievedItem, ...]
    instruction_block: str
    request_hash: str

    @property
    def retrieved_ids(self) -> list[str]:
        return [r.record_id for r in self.retrieved]

    def render(self) -> str:
        """The single user message sent to the model."""
        lines = ["Original text:", self.original_text.strip(), ""]
        lines.append("Retrieved texts (rank order; sentiment from -3 strongly negative to 3 strongly positive):")
        for rank, item in enumerate(self.retrieved, start=1):
            text = item.text.strip()
            if len(text) > MAX_RETRIEVED_CHARS:
                text = text[:MAX_RETRIEVED_CHARS] + TRUNCATION_MARK
            lines.append(f"{rank}. [sentiment {item.sentiment:.2f}] {text}")
        lines += ["", "Instructions:", self.instruction_block, ""]
        return "\n".join(lines)


def build_request(
    original_text: str,
    hits: Sequence[RetrievalHit],
    corpus: Mapping[str, SentimentRecord] | Iterable[SentimentRecord],
) -> PromptRequest:
    if not hits:
        raise PreconditionError("a prompt request needs at least one retrieved text")
    if not isinstance(corpus, Mapping):
        corpus = {r.id: r for r in corpus}
    items = []
    for hit in sorted(hits, key=lambda h: h.rank):
        record = corpus.get(hit.record_id)
        if record is None:
            raise ProvenanceError(f"retrieved id {hit.record_id} is not in the sentiment corpus")
        items.append(RetrievedItem(record.id, record.text, float(record.sentiment), float(hit.similarity)))
    items = tuple(items)
    return PromptRequest(
        original_text=original_text,
        retrieved=items,
        instruction_block=INSTRUCTION_BLOCK,
        request_hash=compute_request_hash(original_text, items, INSTRUCTION_BLOCK),
    )


def requests_for_samples(samples, cache, corpus) -> list[PromptRequest]:
    """One request per sample, built from its cached retrieval hits."""
    if not isinstance(corpus, Mapping):
        corpus = {r.id: r for r in corpus}
    out = []
    for s in samples:
        if s.id not in cache.entries:
            raise ProvenanceError(f"retrieval cache has no entry for sample {s.id}")
        out.append(build_request(s.text, cache.entries[s.id], corpus))
    return out


# --- mock completion ---------------------------------------------------------

_STOPWORDS = frozenset(
    "a an and are as at be been but by for from has have i im in is it its just know like lot "
    "me mostly my of on or so stuff that the then this to too um uh hmm was were with you yeah "
    "guess lately especially plus happening".split()
)

_TONE_LADDER = [
    (-2.0, "despairing"),
    (-1.0, "gloomy"),
    (-0.25, "uneasy"),
    (0.25, "balanced"),
    (1.0, "content"),
    (2.0, "cheerful"),
]


def tone_word(score: float) -> str:
    for upper, word in _TONE_LADDER:
        if score <= upper:
            return word
    return "elated"


def sign_word(score: float) -> str:
    if score > 0:
        return "positive"
    if score < 0:
        return "negative"
    return "neutral"


def salient_tokens(text: str, n: int = 3) -> list[str]:
    counts = Counter(t for t in tokenize(text) if t not in _STOPWORDS)
    ranked = sorted(counts, key=lambda t: (-counts[t], -len(t), t))
    return ranked[:n]


def mock_complete(request: PromptRequest) -> str:
    """Deterministic Q&A skeleton that carries the retrieved sentiment forward."""
    salient = salient_tokens(request.original_text) or ["nothing specific"]
    scores = [item.sentiment for item in request.retrieved]
    mean = sum(scores) / len(scores)
    original = set(tokenize(request.original_text)) - _STOPWORDS

    topic = ", ".join(salient)
    lines = [
        "Q1: How severe does the speaker's depression seem, and what might be causing it?",
        f"A1: The speaker keeps returning to {topic}. The retrieved texts average a sentiment "
        f"of {mean:.2f}, a {tone_word(mean)} tone, which points to these topics as likely causes.",
        "Q2: Which emotional patterns do the original and retrieved texts share or contrast?",
    ]
    parts = []
    for rank, item in enumerate(request.retrieved, start=1):
        shared = sorted(original & set(tokenize(item.text)))
        shared_txt = " ".join(shared) if shared else "no words"
        parts.append(
            f"text {rank} shares {shared_txt}, {sign_word(item.sentiment)} "
            f"{tone_word(item.sentiment)} at {item.sentiment:.2f}"
        )
    signs = Counter(sign_word(s) for s in scores)
    summary = (
        f"Overall {signs['negative']} negative, {signs['neutral']} neutral and "
        f"{signs['positive']} positive references."
    )
    lines.append("A2: " + "; ".join(parts) + ". " + summary)
    return "\n".join(lines)


# --- clients -----------------------------------------------------------------


class MockLLMClient:
    source = "mock"

    def complete(self, request: PromptRequest) -> str:
        return mock_complete(request)


class LiveLLMClient:
    """Chat-completions client: one user message, temperature 0, bearer-token auth."""

    def __init__(
        self,
        base_url: str,
        model: str,
        token: str | None = None,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        attempts: int = 3,
        backoff: float = 0.5,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.timeout = timeout
        self.max_in_flight = max(1, int(max_in_flight))
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    @property
    def source(self) -> str:
        return f"live:{self.model}"

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def complete(self, request: PromptRequest) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.render()}],
            "temperature": 0,
        }
        url = f"{self.base_url}/chat/completions"
        last_error = "no attempt made"
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=body, headers=self._headers())
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"{url} rejected the request: HTTP {resp.status_code}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"unexpected completion payload from {url}: {exc}") from None
            if not isinstance(content, str):
                raise ProtocolError(f"completion content from {url} is not a string")
            return content
        raise EndpointError(f"{url} failed after {self.attempts} attempts ({last_error})")


# --- prompts -----------------------------------------------------------------


@dataclass(frozen=True)
class EmotionPrompt:
    text: str
    source: str
    request_hash: str
    retrieved_ids: tuple[str, ...]
    sample_id: str = ""

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "text": self.text,
            "source": self.source,
            "request_hash": self.request_hash,
            "retrieved_ids": list(self.retrieved_ids),
        }


def _finish(request: PromptRequest, text: str, source: str, sample_id: str) -> EmotionPrompt:
    if not text or not text.strip():
        raise ProtocolError("the model returned an empty completion")
    return EmotionPrompt(text, source, request.request_hash, tuple(request.retrieved_ids), sample_id)


def generate(request: PromptRequest, client, sample_id: str = "") -> EmotionPrompt:
    return _finish(request, client.complete(request), client.source, sample_id)


def generate_batch(
    requests: Sequence[PromptRequest],
    client,
    sample_ids: Sequence[str] | None = None,
) -> list[EmotionPrompt]:
    """Generate prompts in input order; live clients run several requests at once."""
    sample_ids = list(sample_ids) if sample_ids is not None else [""] * len(requests)
    if len(sample_ids) != len(requests):
        raise PreconditionError("sample_ids and requests differ in length")
    workers = getattr(client, "max_in_flight", 1)
    if workers <= 1 or len(requests) <= 1:
        return [generate(r, client, sid) for r, sid in zip(requests, sample_ids)]
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        futures = [pool.submit(client.complete, r) for r in requests]
        texts = [f.result() for f in futures]
    finally:
        # on failure, queued requests are dropped rather than sent
        pool.shutdown(wait=True, cancel_futures=True)
    return [_finish(r, t, client.source, sid) for r, t, sid in zip(requests, texts, sample_ids)]


def verify_provenance(prompt: EmotionPrompt, request: PromptRequest) -> bool:
    """True when ``prompt`` was generated from exactly ``request``."""
    rederived = compute_request_hash(request.original_text, request.retrieved, request.instruction_block)
    return (
        rederived == request.request_hash == prompt.request_hash
        and tuple(request.retrieved_ids) == tuple(prompt.retrieved_ids)
    )


# --- prompt store ------------------------------------------------------------


@dataclass
class PromptStore:
    prompts: list[EmotionPrompt] = field(default_factory=list)

    def by_sample(self) -> dict[str, EmotionPrompt]:
        return {p.sample_id: p for p in self.prompts}

    def __len__(self) -> int:
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)


def _entry_hash(entry: dict) -> str:
    return _sha256({k: v for k, v in entry.items() if k != "entry_hash"})


def persist_prompts(prompts: Iterable[EmotionPrompt], path) -> None:
    lines = []
    seen: set[str] = set()
    for p in prompts:
        if p.sample_id in seen:
            raise PreconditionError(f"duplicate prompt for sample {p.sample_id}")
        seen.add(p.sample_id)
        entry = p.to_json()
        entry["entry_hash"] = _entry_hash(entry)
        lines.append(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_prompts(path) -> PromptStore:
    """Read a prompt store, verifying every line; any damage loads nothing."""
    raw = Path(path).read_text(encoding="utf-8")
    if raw and not raw.endswith("\n"):
        raise CorruptionError(f"{path}: truncated final line")
    prompts: list[EmotionPrompt] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        try:
            entry = json.loads(line)
            prompt = EmotionPrompt(
                text=str(entry["text"]),
                source=str(entry["source"]),
                request_hash=str(entry["request_hash"]),
                retrieved_ids=tuple(str(i) for i in entry["retrieved_ids"]),
                sample_id=str(entry["sample_id"]),
            )
            stored = entry["entry_hash"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorruptionError(f"{path}:{lineno}: unreadable prompt entry ({exc})") from None
        if _entry_hash(entry) != stored:
            raise CorruptionError(f"{path}:{lineno}: entry hash mismatch")
        if prompt.sample_id in seen:
            raise CorruptionError(f"{path}:{lineno}: duplicate sample id {prompt.sample_id}")
        seen.add(prompt.sample_id)
        prompts.append(prompt)
    return PromptStore(prompts)
