"""Commonsense knowledge text for objects and object pairs, and its encoding.

The offline backend fills fixed templates from a bundled lexicon and is fully
deterministic. The external backend asks an HTTP completion endpoint, but
only after checking an on-disk cache, so a warm cache never touches the
network.
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BackendUnavailable, NoCategoryFound
from .io_utils import atomic_write_text

D_FEAT = 64
ROOM_NAMES = ("living room", "dining room", "kitchen", "bathroom", "bedroom", "office", "study", "hallway")

OBJECT_LOCATION = "object-location/1"
OBJECT_USAGE = "object-usage/1"
EDGE_GEOMETRIC = "edge-geometric/1"
EDGE_FUNCTIONAL = "edge-functional/1"

PROMPTS = {
    OBJECT_LOCATION: "Where is a {0} typically located{1}? Answer with one short phrase.",
    OBJECT_USAGE: "What is a {0}{1} typically used for? Answer with one short phrase.",
    EDGE_GEOMETRIC: "Describe the usual spatial relationship between a {0} and a {1} in a home.",
    EDGE_FUNCTIONAL: "Describe the functional link between a {0} and a {1} in a home.",
}

_TOKEN = re.compile(r"[^a-z0-9]+")


@dataclass(frozen=True)
class ObjectKnowledge:
    location_text: str
    usage_text: str


@dataclass(frozen=True)
class EdgeKnowledge:
    geometric_text: str
    functional_text: str


@dataclass(frozen=True)
class TargetQuery:
    raw_text: str
    category: str
    hint: str | None = None


@dataclass(frozen=True)
class ProviderConfig:
    backend: str = "offline"
    cache_dir: str | None = None
    endpoint: str | None = None
    credentials: str | None = field(default=None, repr=False)
    lexicon_path: str | None = None

    def __post_init__(self):
        if self.backend not in ("offline", "external"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @classmethod
    def from_env(cls, backend: str = "offline", cache_dir=None, lexicon_path=None) -> "ProviderConfig":
        return cls(backend=backend, cache_dir=None if cache_dir is None else str(cache_dir),
                   endpoint=os.environ.get("CSG_LLM_ENDPOINT"),
                   credentials=os.environ.get("CSG_LLM_KEY"),
                   lexicon_path=None if lexicon_path is None else str(lexicon_path))


# -- embedding -------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN.split(text.lower()) if t]


@functools.lru_cache(maxsize=None)
def _token_slot(token: str, d_feat: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return h % d_feat, (1.0 if (h >> 63) & 1 == 0 else -1.0)


@functools.lru_cache(maxsize=65536)
def _embed(text: str, d_feat: int) -> np.ndarray:
    v = np.zeros(d_feat)
    for tok in tokenize(text):
        slot, sign = _token_slot(tok, d_feat)
        v[slot] += sign
    n = np.linalg.norm(v)
    if n > 0:
        v /= n
    v.setflags(write=False)
    return v


def embed_text(text: str, d_feat: int = D_FEAT) -> np.ndarray:
    """Signed hashed bag-of-tokens, L2-normalized; empty text gives zeros."""
    return _embed(text, d_feat)


def encode_node(category: str, k: ObjectKnowledge, d_feat: int = D_FEAT) -> np.ndarray:
    return np.concatenate([embed_text(category, d_feat), embed_text(k.location_text, d_feat),
                           embed_text(k.usage_text, d_feat)])


def encode_edge(k: EdgeKnowledge, d_feat: int = D_FEAT) -> np.ndarray:
    return np.concatenate([embed_text(k.geometric_text, d_feat), embed_text(k.functional_text, d_feat)])


# -- lexicon ---------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def load_lexicon(path: str | None = None) -> dict[str, dict[str, str]]:
    if path is None:
        raw = resources.files("csgos").joinpath("data/lexicon.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    return {k.lower(): v for k, v in json.loads(raw).items()}


def cache_key(backend: str, template_id: str, *inputs: str) -> str:
    payload = json.dumps([backend, template_id, *inputs], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def http_completion(endpoint: str, credentials: str | None, prompt: str, timeout: float = 30.0) -> str:
    req = urllib.request.Request(
        endpoint,
        data=json.dumps({"prompt": prompt}).encode("utf-8"),
        headers={"Content-Type": "application/json",
                 **({"Authorization": f"Bearer {credentials}"} if credentials else {})},
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            body = resp.read().decode("utf-8")
    except (urllib.error.URLError, OSError) as exc:
        raise BackendUnavailable(f"LLM endpoint unreachable: {exc}") from exc
    try:
        doc = json.loads(body)
    except json.JSONDecodeError:
        return body.strip()
    return str(doc.get("text", "")).strip() if isinstance(doc, dict) else str(doc).strip()


class KnowledgeProvider:
    """Produces object and edge knowledge under a :class:`ProviderConfig`.

    ``client`` is a ``prompt -> text`` callable used by the external backend;
    it defaults to a plain HTTP POST against ``cfg.endpoint``.
    """

    def __init__(self, cfg: ProviderConfig | None = None, client: Callable[[str], str] | None = None):
        self.cfg = cfg or ProviderConfig()
        self.lexicon = load_lexicon(self.cfg.lexicon_path)
        self._client = client
        self.external_calls = 0
        self._memo: dict = {}

    # text sources ---------------------------------------------------------

    def _offline(self, template_id: str, inputs: tuple[str, ...]) -> str:
        if template_id in (OBJECT_LOCATION, OBJECT_USAGE):
            category, room = inputs
            entry = self.lexicon.get(category.lower())
            if template_id == OBJECT_LOCATION:
                phrase = entry["location"] if entry else category
                if room:
                    return f"{category} in the {room} typically located: {room}, {phrase}"
                return f"{category} typically located: {phrase}"
            phrase = entry["usage"] if entry else category
            if room:
                return f"{category} in the {room} typically used for: {phrase}"
            return f"{category} typically used for: {phrase}"
        a, b = inputs
        ea, eb = self.lexicon.get(a.lower()), self.lexicon.get(b.lower())
        if template_id == EDGE_GEOMETRIC:
            pa = ea["location"] if ea else a
            pb = eb["location"] if eb else b
            return f"{a} and {b} placement: {a} {pa}; {b} {pb}"
        ua = ea["usage"] if ea else a
        ub = eb["usage"] if eb else b
        return f"{a} and {b} function: {a} for {ua}; {b} for {ub}"

    def _external(self, template_id: str, inputs: tuple[str, ...]) -> str:
        key = cache_key(self.cfg.backend, template_id, *inputs)
        path = Path(self.cfg.cache_dir) / f"{key}.txt" if self.cfg.cache_dir else None
        if path is not None and path.exists():
            return path.read_text(encoding="utf-8")
        if template_id in (OBJECT_LOCATION, OBJECT_USAGE):
            prompt = PROMPTS[template_id].format(inputs[0], f" in the {inputs[1]}" if inputs[1] else "")
        else:
            prompt = PROMPTS[template_id].format(*inputs)
        client = self._client
        if client is None:
            if not self.cfg.endpoint:
                raise BackendUnavailable("external backend has no cache entry and no CSG_LLM_ENDPOINT")
            client = functools.partial(http_completion, self.cfg.endpoint, self.cfg.credentials)
        self.external_calls += 1
        try:
            text = client(prompt)
        except BackendUnavailable:
            raise
        except Exception as exc:  # any client failure means the backend is unusable
            raise BackendUnavailable(str(exc)) from exc
        if not text:
            raise BackendUnavailable("LLM returned an empty answer")
        if path is not None:
            atomic_write_text(path, text)
        return text

    def _text(self, template_id: str, *inputs: str) -> str:
        memo_key = (template_id, inputs)
        if memo_key not in self._memo:
            if self.cfg.backend == "offline":
                self._memo[memo_key] = self._offline(template_id, inputs)
            else:
                self._memo[memo_key] = self._external(template_id, inputs)
        return self._memo[memo_key]

    # public API -----------------------------------------------------------

    def describe_object(self, category: str, room_hint: str | None = None) -> ObjectKnowledge:
        if not category:
            raise ValueError("category must be non-empty")
        room = room_hint or ""
        return ObjectKnowledge(self._text(OBJECT_LOCATION, category, room),
                               self._text(OBJECT_USAGE, category, room))

    def describe_edge(self, cat_a: str, cat_b: str) -> EdgeKnowledge:
        if not cat_a or not cat_b:
            raise ValueError("categories must be non-empty")
        a, b = sorted((cat_a, cat_b))
        return EdgeKnowledge(self._text(EDGE_GEOMETRIC, a, b), self._text(EDGE_FUNCTIONAL, a, b))

    def node_feature(self, category: str, room_hint: str | None = None) -> np.ndarray:
        key = ("node", category, room_hint)
        if key not in self._memo:
            self._memo[key] = encode_node(category, self.describe_object(category, room_hint))
        return self._memo[key]

    def edge_feature(self, cat_a: str, cat_b: str) -> np.ndarray:
        key = ("edge",) + tuple(sorted((cat_a, cat_b)))
        if key not in self._memo:
            self._memo[key] = encode_edge(self.describe_edge(cat_a, cat_b))
        return self._memo[key]

    def categories(self) -> list[str]:
        return sorted(self.lexicon)

    def parse_target_query(self, raw: str) -> TargetQuery:
        """Pull a lexicon category and an optional room name out of free text.

        Parsing is rule-based under both backends.
        """
        if not raw or not raw.strip():
            raise ValueError("query must be non-empty")
        text = " ".join(tokenize(raw))
        hint = None
        for room in sorted(ROOM_NAMES, key=len, reverse=True):
            m = re.search(rf"\b{re.escape(room)}\b", text)
            if m:
                hint = room
                text = text[:m.start()] + " " + text[m.end():]
                break
        best = None
        for cat in self.lexicon:
            m = re.search(rf"\b{re.escape(' '.join(tokenize(cat)))}\b", text)
            if m:
                rank = (m.start(), -len(cat))
                if best is None or rank < best[0]:
                    best = (rank, cat)
        if best is None:
            raise NoCategoryFound(f"no known object category in {raw!r}")
        return TargetQuery(raw_text=raw, category=best[1], hint=hint)


@functools.lru_cache(maxsize=16)
def get_provider(cfg: ProviderConfig = ProviderConfig()) -> KnowledgeProvider:
    """Shared provider per configuration."""
    return KnowledgeProvider(cfg)


def describe_object(category: str, room_hint: str | None = None,
                    cfg: ProviderConfig = ProviderConfig()) -> ObjectKnowledge:
    return get_provider(cfg).describe_object(category, room_hint)


def describe_edge(cat_a: str, cat_b: str, cfg: ProviderConfig = ProviderConfig()) -> EdgeKnowledge:
    return get_provider(cfg).describe_edge(cat_a, cat_b)


def parse_target_query(raw: str, cfg: ProviderConfig = ProviderConfig()) -> TargetQuery:
    return get_provider(cfg).parse_target_query(raw)
