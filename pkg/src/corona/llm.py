"""Prompt construction, candidate summaries and the chat/embedding gateway.

Two backend kinds exist: an OpenAI-compatible HTTP client and a seeded mock.
The mock chat model echoes the attribute values it finds in the profile or
history section of a prompt, interleaved with filler words; the mock embedder
sums seeded per-token Gaussian vectors. Together they let synthetic data plant
a known alignment between reasoning text and user/item features.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .errors import BackendError, ValidationError
from .graph import Stage

log = logging.getLogger(__name__)

PROFILE_KEYS = ("Age", "Gender", "Country", "Language", "Occupation")
TOP_N = 20
UNKNOWN = "unknown"

PREFERENCE_INSTRUCTION = (
    "Infer which {noun}s this user is likely to enjoy, using only the profile below and your "
    "general knowledge. Cover likely categories, styles, origins and release years. First restate "
    "the profile facts that matter, then give your prediction of the user's preferences."
)
INTENT_INSTRUCTION = (
    "Infer what this user wants to {verb} next, using the interaction history and the summary of "
    "candidate {noun}s below. The prediction must stay within the candidate range. First restate "
    "the relevant history and candidate facts, then give your prediction of the user's current intent."
)


# ---- prompts -------------------------------------------------------------------

def _render_value(value) -> str:
    if value is None or value == "" or value == []:
        return UNKNOWN
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _label(key: str) -> str:
    return key[:1].upper() + key[1:]


def render_profile(profile: Mapping) -> str:
    """``Key: value;`` pairs, core keys first, the rest alphabetically."""
    by_label = {_label(str(k)): v for k, v in profile.items()}
    keys = list(PROFILE_KEYS) + sorted(k for k in by_label if k not in PROFILE_KEYS)
    return "; ".join(f"{k}: {_render_value(by_label.get(k))}" for k in keys)


def render_record(record: Mapping) -> str:
    """One item as ``Title: ...; Year: ...; <other fields sorted>``."""
    parts = [f"Title: {_render_value(record.get('title'))}", f"Year: {_render_value(record.get('year'))}"]
    for key in sorted(k for k in record if k not in ("id", "title", "year")):
        parts.append(f"{_label(key)}: {_render_value(record[key])}")
    return "; ".join(parts)


def preference_prompt(profile: Mapping, noun: str = "movie") -> str:
    return "\n".join([
        "Task: preference reasoning",
        "Instruction: " + PREFERENCE_INSTRUCTION.format(noun=noun),
        "User profile: " + render_profile(profile),
    ])


def intent_prompt(summary: "CandidateSummary", history_texts: Sequence[Mapping], noun: str = "movie",
                  verb: str = "watch", empty_history: bool = False) -> str:
    if not history_texts and not empty_history:
        raise ValidationError("empty history requires empty_history=True")
    lines = [
        "Task: intent reasoning",
        "Instruction: " + INTENT_INSTRUCTION.format(noun=noun, verb=verb),
        "User history:",
    ]
    if history_texts:
        lines += [f"No.{i}: {render_record(rec)}" for i, rec in enumerate(history_texts, start=1)]
    else:
        lines.append("(no recorded interactions)")
    lines.append("Candidate summary:")
    lines.append(summary.rendered_text)
    return "\n".join(lines)


# ---- candidate summary ---------------------------------------------------------

def decade_bucket(year: int) -> str:
    start = (int(year) // 10) * 10
    return f"{start}-{start + 10}"


RELEASE = "release period"


@dataclass(frozen=True)
class CandidateSummary:
    histograms: dict[str, dict[str, int]]
    top_lists: dict[str, list[str]]
    rendered_text: str


def _attribute_order(names):
    head = [n for n in ("genre", "category") if n in names]
    rest = sorted(n for n in names if n not in head and n != RELEASE)
    tail = [RELEASE] if RELEASE in names else []
    return head + rest + tail


def summarize(item_records: Sequence[Mapping], top_n: int = TOP_N) -> CandidateSummary:
    """Frequency histograms per attribute and their ``top_n`` most common values."""
    hists: dict[str, Counter] = {}
    for rec in item_records:
        for key, value in rec.items():
            if key in ("id", "title"):
                continue
            if key == "year":
                if value in (None, ""):
                    continue
                hists.setdefault(RELEASE, Counter())[decade_bucket(value)] += 1
                continue
            values = value if isinstance(value, (list, tuple)) else [value]
            for v in values:
                if v is None or v == "":
                    continue
                hists.setdefault(str(key).lower(), Counter())[str(v)] += 1
    top = {k: [v for v, _ in sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]]
           for k, c in hists.items()}
    if not item_records:
        text = "No candidate items were retrieved."
    elif not hists:
        text = "Candidate items carry no descriptive attributes."
    else:
        lines = []
        for name in _attribute_order(hists):
            label = "Release periods" if name == RELEASE else f"Candidate {name} values"
            lines.append(f"{label}: {', '.join(top[name])}")
        text = "\n".join(lines)
    return CandidateSummary({k: dict(c) for k, c in hists.items()}, top, text)


# ---- configuration -------------------------------------------------------------

@dataclass
class BackendSpec:
    kind: str = "mock"  # "mock" | "openai"
    seed: int = 0
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if self.kind not in ("mock", "openai"):
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if self.kind == "openai" and not self.endpoint:
            raise ValidationError("openai backend needs an endpoint")

    @property
    def backend_id(self) -> str:
        return f"mock:{self.seed}" if self.kind == "mock" else self.endpoint.rstrip("/")

    @property
    def model_name(self) -> str:
        return self.model or ("mock" if self.kind == "mock" else "")


@dataclass
class LlmConfig:
    chat: BackendSpec = field(default_factory=BackendSpec)
    embedding: BackendSpec = field(default_factory=BackendSpec)
    temperature: float = 0.2
    embed_dim_native: int = 1536
    dim: int = 128
    projection_seed: int = 0
    max_in_flight: int = 4
    max_attempts: int = 3
    backoff_seconds: float = 1.0
    timeout_seconds: float = 60.0
    noun: str = "movie"
    verb: str = "watch"

    def __post_init__(self):
        if isinstance(self.chat, Mapping):
            self.chat = BackendSpec(**self.chat)
        if isinstance(self.embedding, Mapping):
            self.embedding = BackendSpec(**self.embedding)
        if not 0.0 <= self.temperature <= 1.0:
            raise ValidationError(f"temperature {self.temperature} outside [0, 1]")
        if self.dim < 1 or self.embed_dim_native < self.dim:
            raise ValidationError("embed_dim_native must be >= dim >= 1")


# ---- backends ------------------------------------------------------------------

FILLER = ("notably", "perhaps", "likely", "also", "broadly", "mostly", "often", "generally",
          "clearly", "probably", "mainly", "somewhat")

_PUNCT = string.punctuation.replace("-", "")
_HISTORY_PREFIX = re.compile(r"^No\.\d+:\s*")


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _seed_from(*parts) -> int:
    h = hashlib.sha256("\x00".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def extract_attribute_values(prompt: str) -> list[str]:
    """Values from the profile/history sections of a prompt, in order."""
    values, section = [], None
    for line in prompt.splitlines():
        if line.startswith("User profile:"):
            section, body = "profile", line[len("User profile:"):]
        elif line.startswith("User history:"):
            section, body = "history", line[len("User history:"):]
        elif line.startswith("Candidate summary:") or line.startswith("Instruction:"):
            section = None
            continue
        elif section == "history":
            body = _HISTORY_PREFIX.sub("", line)
        else:
            continue
        for pair in body.split(";"):
            if ":" not in pair:
                continue
            value = pair.split(":", 1)[1].strip()
            for v in value.split(","):
                v = v.strip()
                if v and v != UNKNOWN:
                    values.append(v)
    return values


class MockChat:
    """Deterministic stand-in for a chat model: a pure function of (seed, prompt)."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, prompt: str, temperature: float) -> str:
        rng = np.random.default_rng(_seed_from("chat", self.seed, prompt))
        words = []
        for value in extract_attribute_values(prompt):
            words.append(value)
            words.append(FILLER[rng.integers(len(FILLER))])
        if not words:
            words = [FILLER[i] for i in rng.integers(len(FILLER), size=4)]
        return "Reasoning: " + " ".join(words) + "."


def tokenize(text: str) -> list[str]:
    return [t for t in (w.strip(_PUNCT) for w in text.lower().split()) if t]


@lru_cache(maxsize=1 << 16)
def token_vector(seed: int, dim: int, token: str) -> np.ndarray:
    vec = np.random.default_rng(_seed_from("tok", seed, token)).standard_normal(dim)
    vec.setflags(write=False)
    return vec


class MockEmbedding:
    """Normalized sum of seeded per-token Gaussian vectors."""

    def __init__(self, seed: int = 0, dim: int = 1536):
        self.seed = seed
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError("text has no tokens to embed")
        total = np.zeros(self.dim)
        for tok in tokens:
            total += token_vector(self.seed, self.dim, tok)
        return total / np.linalg.norm(total)


class _OpenAIBase:
    def __init__(self, spec: BackendSpec, timeout: float = 60.0, client: httpx.Client | None = None):
        self.spec = spec
        self.client = client or httpx.Client(timeout=timeout)

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.spec.api_key_env:
            key = os.environ.get(self.spec.api_key_env)
            if not key:
                raise BackendError(f"environment variable {self.spec.api_key_env} is not set", retryable=False)
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, route: str, body: dict) -> dict:
        url = f"{self.spec.endpoint.rstrip('/')}/{route}"
        try:
            resp = self.client.post(url, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise BackendError(f"transport error calling {url}: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise BackendError(f"{url} returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendError(f"{url} returned a non-JSON body") from exc


class OpenAIChat(_OpenAIBase):
    def __call__(self, prompt: str, temperature: float) -> str:
        payload = self._post("chat/completions", {
            "model": self.spec.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        })
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendError("malformed chat completion body") from None
        if not isinstance(content, str):
            raise BackendError("chat completion content is not text")
        return content


class OpenAIEmbedding(_OpenAIBase):
    def __call__(self, text: str) -> np.ndarray:
        payload = self._post("embeddings", {"model": self.spec.model, "input": text})
        try:
            vec = np.asarray(payload["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError):
            raise BackendError("malformed embedding body") from None
        if vec.ndim != 1 or not np.isfinite(vec).all():
            raise BackendError("embedding is not a finite vector")
        return vec


def make_chat_backend(config: LlmConfig):
    if config.chat.kind == "mock":
        return MockChat(config.chat.seed)
    return OpenAIChat(config.chat, config.timeout_seconds)


def make_embedding_backend(config: LlmConfig):
    if config.embedding.kind == "mock":
        return MockEmbedding(config.embedding.seed, config.embed_dim_native)
    return OpenAIEmbedding(config.embedding, config.timeout_seconds)


# ---- cache ---------------------------------------------------------------------

class ResponseCache:
    """Content-addressed JSON files (``<root>/<k[:2]>/<k>.json``) behind a memory map.

    With ``root=None`` the cache lives in memory only.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, object] = {}
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self.root is None:
            return None
        path = self._path(key)
        try:
            value = json.loads(path.read_text())["value"]
        except (FileNotFoundError, json.JSONDecodeError, KeyError):
            return None
        with self._lock:
            self._mem[key] = value
        return value

    def put(self, key: str, value, meta: Mapping | None = None) -> None:
        with self._lock:
            self._mem[key] = value
        if self.root is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump({"key": key, "value": value, **(meta or {})}, fh)
        os.replace(tmp, path)  # identical keys carry identical values; last writer wins

    def entries(self) -> list[Path]:
        if self.root is None or not self.root.exists():
            return []
        return sorted(self.root.glob("*/*.json"))

    def clear(self) -> int:
        files = self.entries()
        for f in files:
            f.unlink()
        with self._lock:
            self._mem.clear()
        return len(files)


# ---- gateway -------------------------------------------------------------------

@lru_cache(maxsize=8)
def projection_matrix(seed: int, native_dim: int, dim: int) -> np.ndarray:
    mat = np.random.default_rng(seed).standard_normal((native_dim, dim)) / np.sqrt(dim)
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray
    stage: Stage
    source_hash: str


@dataclass
class GatewayStats:
    calls: int = 0
    cache_hits: int = 0
    est_tokens: int = 0

    def as_dict(self):
        return {"calls": self.calls, "cache_hits": self.cache_hits, "est_tokens": self.est_tokens}


def _estimate_tokens(*texts: str) -> int:
    return sum(-(-len(t) // 4) for t in texts)


class Gateway:
    """Cached access to the chat and embedding backends."""

    def __init__(self, config: LlmConfig | None = None, cache_dir=None, chat_backend=None,
                 embedding_backend=None, sleep: Callable[[float], None] = time.sleep):
        self.config = config or LlmConfig()
        self.cache = ResponseCache(cache_dir)
        self.chat_backend = chat_backend or make_chat_backend(self.config)
        self.embedding_backend = embedding_backend or make_embedding_backend(self.config)
        self.stats = GatewayStats()
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max(1, self.config.max_in_flight))
        self._stats_lock = threading.Lock()

    def _key(self, kind: str, spec: BackendSpec, text: str) -> str:
        tau = self.config.temperature if kind == "chat" else None
        return _digest(json.dumps([kind, spec.backend_id, spec.model_name, tau, _digest(text)]))

    def _with_retry(self, fn, *args):
        attempts = max(1, self.config.max_attempts)
        for attempt in range(attempts):
            try:
                with self._slots:
                    return fn(*args)
            except BackendError as exc:
                if not exc.retryable or attempt == attempts - 1:
                    raise BackendError(f"giving up after {attempt + 1} attempt(s): {exc}", retryable=False) from exc
                delay = self.config.backoff_seconds * 2 ** attempt
                log.warning("backend call failed (%s); retrying in %.1fs", exc, delay)
                self._sleep(delay)

    def _count(self, hit: bool, *texts):
        with self._stats_lock:
            if hit:
                self.stats.cache_hits += 1
            else:
                self.stats.calls += 1
                self.stats.est_tokens += _estimate_tokens(*texts)

    def complete(self, prompt: str) -> str:
        if not prompt or not prompt.strip():
            raise ValidationError("prompt is empty")
        key = self._key("chat", self.config.chat, prompt)
        cached = self.cache.get(key)
        if cached is not None:
            self._count(True)
            return cached
        text = self._with_retry(self.chat_backend, prompt, self.config.temperature)
        self._count(False, prompt, text)
        self.cache.put(key, text, {"kind": "chat", "backend": self.config.chat.backend_id})
        return text

    def embed_native(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValidationError("text is empty")
        key = self._key("embedding", self.config.embedding, text)
        cached = self.cache.get(key)
        if cached is not None:
            self._count(True)
            return np.asarray(cached, dtype=np.float64)
        vec = np.asarray(self._with_retry(self.embedding_backend, text), dtype=np.float64)
        if vec.shape != (self.config.embed_dim_native,):
            raise BackendError(f"embedding has shape {vec.shape}, expected ({self.config.embed_dim_native},)",
                               retryable=False)
        self._count(False, text)
        self.cache.put(key, vec.tolist(), {"kind": "embedding", "backend": self.config.embedding.backend_id})
        return vec

    def encode_text(self, text: str, stage: Stage = Stage.PREFERENCE, source: str | None = None) -> QueryEmbedding:
        """Native embedding, seeded Gaussian projection to ``dim``, then L2 normalization.

        ``source`` is the prompt that produced ``text``; its digest tags the result.
        """
        native = self.embed_native(text)
        proj = projection_matrix(self.config.projection_seed, self.config.embed_dim_native, self.config.dim)
        vec = native @ proj
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValidationError("projected embedding has zero norm")
        return QueryEmbedding(vec / norm, Stage(stage), _digest(source if source is not None else text))
