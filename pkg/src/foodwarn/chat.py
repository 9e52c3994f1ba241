"""Staged chat orchestration: filter, QA retrieval, then profile-aware generation.

A single generation backend serves three prompt configurations (greeting,
relevance filter, answer). ``StubBackend`` is deterministic and offline;
``HttpBackend`` talks to a local completion server.
"""

from __future__ import annotations

import hashlib
import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendUnavailable, EmptyStore, EmptyText, IncompleteProfile
from .ingest import WarningLabel

EMBED_DIM = 256
TAU_FILTER = 0.25
TAU_RETRIEVE = 0.8
CONTEXT_TURNS = 5

ROUTES = ("filtered", "retrieved", "generated")
REFUSAL = (
    "I can only help with questions about food commodity prices, price warnings, "
    "and how these forecasts are produced."
)
SEVERITY_PHRASES = {
    WarningLabel.NONE: "None (no active price warning)",
    WarningLabel.MODERATE: "Moderate (a moderate price warning is in effect)",
    WarningLabel.HIGH: "High (a high price warning is in effect)",
}

_TOKEN = re.compile(r"[a-z0-9]+")
_STOPWORDS = frozenset(
    "a an and are as at be by can could do does for from how i if in is it me my of on or should "
    "so that the this to was we what when where which who why will with would you your".split()
)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def content_tokens(text: str) -> list[str]:
    """Tokens minus stopwords; falls back to all tokens if nothing is left."""
    tokens = tokenize(text)
    return [t for t in tokens if t not in _STOPWORDS] or tokens


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def embed_text(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Hashed bag of content tokens, L2-normalized."""
    tokens = content_tokens(text)
    if not tokens:
        raise EmptyText("text has no alphanumeric tokens")
    v = np.zeros(dim)
    for tok in tokens:
        v[_bucket(tok, dim)] += 1.0
    return v / np.linalg.norm(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# knowledge store


@dataclass(frozen=True)
class QaEntry:
    question: str
    answer: str
    citation: str | None = None


class QaStore:
    def __init__(self, entries: Sequence[QaEntry] = ()):
        seen = set()
        for e in entries:
            norm = " ".join(tokenize(e.question))
            if not norm:
                raise EmptyText("QA questions must be non-empty")
            if norm in seen:
                raise ValueError(f"duplicate QA question: {e.question!r}")
            seen.add(norm)
        self.entries = list(entries)

    def __len__(self):
        return len(self.entries)

    @classmethod
    def load(cls, path: str | Path) -> "QaStore":
        items = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([QaEntry(d["question"], d["answer"], d.get("citation")) for d in items])

    def save(self, path: str | Path):
        items = [{"question": e.question, "answer": e.answer, "citation": e.citation} for e in self.entries]
        Path(path).write_text(json.dumps(items, indent=2), encoding="utf-8")


@dataclass
class EmbeddingIndex:
    dimension: int
    vectors: np.ndarray  # [entries, dimension], unit rows

    @classmethod
    def build(cls, store: QaStore, dim: int = EMBED_DIM) -> "EmbeddingIndex":
        if not len(store):
            return cls(dim, np.zeros((0, dim)))
        return cls(dim, np.stack([embed_text(e.question, dim) for e in store.entries]))

    def centroid(self) -> np.ndarray | None:
        if not len(self.vectors):
            return None
        c = self.vectors.mean(axis=0)
        return c / np.linalg.norm(c)


# ---------------------------------------------------------------------------
# profile, turns, backends


@dataclass(frozen=True)
class UserProfile:
    country: str | None
    commodity: str | None
    severity: WarningLabel | None
    language: str | None = "en"

    def check(self):
        missing = [f for f in ("country", "commodity", "severity", "language") if getattr(self, f) in (None, "")]
        if missing:
            raise IncompleteProfile(f"profile is missing: {', '.join(missing)}")

    def describe(self) -> str:
        return (
            f"country={self.country}; commodity={self.commodity}; "
            f"severity={WarningLabel(self.severity).title}; language={self.language}"
        )


@dataclass(frozen=True)
class ChatTurn:
    role: str  # "user" | "assistant"
    text: str
    route: str | None = None
    citation: str | None = None
    score: float | None = None


@dataclass(frozen=True)
class GenerationRequest:
    purpose: str  # "greeting" | "filter" | "answer"
    prompt: str
    profile: UserProfile
    query: str | None = None


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


class StubBackend:
    """Template responses; deterministic and never fails."""

    def generate(self, request: GenerationRequest) -> str:
        p = request.profile
        severity = SEVERITY_PHRASES[WarningLabel(p.severity)]
        if request.purpose == "filter":
            return "RELEVANT"
        if request.purpose == "greeting":
            return (
                f"[{p.language}] Welcome. This briefing covers {p.commodity} in {p.country}. "
                f"Current warning status: {severity}. Ask about prices, warnings, or how the forecast is made."
            )
        return (
            f"[{p.language}] For {p.commodity} in {p.country}, the warning status is {severity}. "
            f"On your question \"{request.query}\": watch local market prices, compare them with the "
            f"forecast, and plan purchases ahead of expected increases."
        )


class HttpBackend:
    """POSTs ``{prompt, max_tokens, temperature}`` and reads ``{text}``."""

    def __init__(self, url: str, max_tokens: int = 256, temperature: float = 0.2, timeout: float = 30.0):
        self.url = url
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.timeout = timeout

    def generate(self, request: GenerationRequest) -> str:
        payload = json.dumps({
            "prompt": request.prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        }).encode("utf-8")
        req = urllib.request.Request(self.url, data=payload, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendUnavailable(f"generation backend at {self.url} failed: {exc}") from None
        if not isinstance(body, dict) or not isinstance(body.get("text"), str):
            raise BackendUnavailable(f"generation backend at {self.url} returned no 'text' field")
        return body["text"]


def make_backend(name: str, url: str | None = None, **kwargs) -> Backend:
    if name == "stub":
        return StubBackend()
    if name == "http":
        if not url:
            raise BackendUnavailable("http backend needs a url")
        return HttpBackend(url, **kwargs)
    raise BackendUnavailable(f"unknown backend {name!r}")


# ---------------------------------------------------------------------------
# prompts


_INSTRUCTIONS = {
    "greeting": (
        "You are an assistant explaining food commodity price warnings to non-specialists. "
        "Open the conversation: introduce the country, commodity and warning severity below, "
        "and reply in the requested language."
    ),
    "filter": (
        "Decide whether the user message concerns food prices, price warnings, the forecasting "
        "models, their data, or food security. Answer RELEVANT or IRRELEVANT only."
    ),
    "answer": (
        "Answer the user concisely with actionable advice, using the profile and conversation "
        "so far. Reply in the requested language."
    ),
}


def build_prompt(purpose: str, profile: UserProfile, history: Sequence[ChatTurn] = (), query: str | None = None) -> str:
    lines = [_INSTRUCTIONS[purpose], f"Profile: {profile.describe()}"]
    if history:
        lines.append("Conversation:")
        lines.extend(f"{t.role}: {t.text}" for t in history)
    if query is not None:
        lines.append(f"user: {query}")
    lines.append("assistant:")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# conversation


@dataclass
class ChatState:
    profile: UserProfile
    store: QaStore
    index: EmbeddingIndex
    backend: Backend
    history: list[ChatTurn] = field(default_factory=list)
    tau_filter: float = TAU_FILTER
    tau_retrieve: float = TAU_RETRIEVE
    context_turns: int = CONTEXT_TURNS
    llm_filter: bool = False


@dataclass(frozen=True)
class FilterResult:
    relevant: bool
    score: float
    reason: str = ""


@dataclass(frozen=True)
class Retrieval:
    hit: bool
    score: float
    index: int | None = None
    answer: str | None = None
    citation: str | None = None


def filter_query(state: ChatState, query: str) -> FilterResult:
    """Relevance by similarity to the QA centroid or to any single stored question."""
    if not query or not tokenize(query):
        raise EmptyText("empty query")
    q = embed_text(query, state.index.dimension)
    centroid = state.index.centroid()
    if centroid is None:
        score = 0.0
    else:
        score = max(float(q @ centroid), float(np.max(state.index.vectors @ q)))
    if score < state.tau_filter:
        return FilterResult(False, score, f"similarity {score:.3f} below {state.tau_filter}")
    if state.llm_filter:
        prompt = build_prompt("filter", state.profile, state.history[-state.context_turns:], query)
        verdict = state.backend.generate(GenerationRequest("filter", prompt, state.profile, query))
        if verdict.strip().upper().startswith("IRRELEVANT"):
            return FilterResult(False, score, "backend judged the query irrelevant")
    return FilterResult(True, score)


def retrieve_answer(state: ChatState, query: str) -> Retrieval:
    if not len(state.store):
        raise EmptyStore("no QA entries loaded")
    q = embed_text(query, state.index.dimension)
    sims = state.index.vectors @ q
    best = int(np.argmax(sims))  # first maximum: lowest index wins ties
    score = float(sims[best])
    if score < state.tau_retrieve:
        return Retrieval(False, score)
    entry = state.store.entries[best]
    return Retrieval(True, score, best, entry.answer, entry.citation)


def respond(state: ChatState, query: str) -> ChatTurn:
    """Route one user message and append both turns to the history."""
    verdict = filter_query(state, query)
    context = state.history[-state.context_turns:]
    if not verdict.relevant:
        turn = ChatTurn("assistant", REFUSAL, "filtered", score=verdict.score)
    else:
        hit = retrieve_answer(state, query) if len(state.store) else Retrieval(False, 0.0)
        if hit.hit:
            turn = ChatTurn("assistant", hit.answer, "retrieved", hit.citation, hit.score)
        else:
            prompt = build_prompt("answer", state.profile, context, query)
            text = state.backend.generate(GenerationRequest("answer", prompt, state.profile, query))
            turn = ChatTurn("assistant", text, "generated", score=hit.score)
    state.history.append(ChatTurn("user", query))
    state.history.append(turn)
    return turn


def init_conversation(
    profile: UserProfile,
    backend: Backend,
    store: QaStore | None = None,
    **settings,
) -> ChatState:
    """Validate the profile and open with a backend-generated greeting."""
    profile.check()
    store = store or QaStore()
    state = ChatState(profile, store, EmbeddingIndex.build(store), backend, **settings)
    prompt = build_prompt("greeting", profile)
    text = backend.generate(GenerationRequest("greeting", prompt, profile))
    state.history.append(ChatTurn("assistant", text, "generated"))
    return state


DEFAULT_QA = [
    QaEntry(
        "What does a high price warning mean?",
        "A high warning means local prices have risen far faster than usual over the last three "
        "months, a sign that food may soon become unaffordable for many households.",
        "https://www.fao.org/giews/food-prices/home/en/",
    ),
    QaEntry(
        "How is the price forecast made?",
        "A transformer model reads the last three months of local and futures prices together with "
        "food-security and market indicators, and predicts the cleaned local price ahead.",
        None,
    ),
    QaEntry(
        "Where does the price data come from?",
        "Local prices and price indices come from FAO monitoring tools; futures come from exchange "
        "quotes; financial indicators come from IMF statistics.",
        "https://fpma.fao.org/",
    ),
    QaEntry(
        "What is the Proteus food security index?",
        "Proteus is a composite index that summarizes a country's food security across availability, "
        "access, utilization and stability.",
        None,
    ),
    QaEntry(
        "Should I buy food now or wait for prices to fall?",
        "If a warning is in effect, prices are likely to keep rising for a while; buying staples "
        "early and storing them safely usually costs less than waiting.",
        None,
    ),
    QaEntry(
        "Why are maize, wheat and rice prices rising in the market?",
        "Staple prices rise with poor harvests, higher international futures prices, currency "
        "weakness and transport costs; the forecast combines these signals.",
        None,
    ),
]
