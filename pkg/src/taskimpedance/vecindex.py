"""Text embeddings and an exact flat cosine-similarity index."""

from __future__ import annotations

import json
import logging
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import DimensionMismatch, DuplicateId, EmptyIndex, EmptyText, ProviderUnavailable

log = logging.getLogger(__name__)

DEFAULT_DIMENSION = 384

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return [tok for tok in _TOKEN_RE.split(text.lower()) if tok]


def normalize(values) -> np.ndarray:
    vec = np.asarray(values, dtype=float).reshape(-1)
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError("cannot normalize a zero or non-finite vector")
    out = vec / norm
    out.setflags(write=False)
    return out


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic hashed bag-of-words embedder.

    Each token is hashed with 64-bit FNV-1a; the hash modulo ``dimension``
    picks the bucket and the top bit picks the sign.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    def bucket(self, token: str) -> tuple[int, float]:
        h = fnv1a_64(token.encode("utf-8"))
        return h % self.dimension, (-1.0 if h >> 63 else 1.0)

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise EmptyText("text has no alphanumeric tokens")
        vec = np.zeros(self.dimension)
        for tok in tokens:
            idx, sign = self.bucket(tok)
            vec[idx] += sign
        if not vec.any():
            # opposite-signed collisions cancelled out; fall back to unsigned counts
            for tok in tokens:
                vec[self.bucket(tok)[0]] += 1.0
        return normalize(vec)


class HttpEmbedder:
    """Client for a remote embedding service.

    Protocol: ``POST url`` with JSON ``{"text": ...}``; the response body is
    ``{"vector": [...]}`` of length ``dimension``.
    """

    def __init__(self, url: str, dimension: int = DEFAULT_DIMENSION, timeout: float = 5.0,
                 retries: int = 2, backoff: float = 0.1):
        if not re.match(r"^https?://[^/\s]+", url):
            raise ValueError(f"malformed embedding endpoint url: {url!r}")
        self.url = url
        self.dimension = dimension
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _request(self, text):
        body = json.dumps({"text": text}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def embed(self, text: str) -> np.ndarray:
        last_exc = None
        for attempt in range(self.retries + 1):
            try:
                payload = self._request(text)
                break
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last_exc = exc
                log.warning("embedding request %d/%d failed: %s", attempt + 1,
                            self.retries + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        else:
            raise ProviderUnavailable(f"embedding service at {self.url} failed: {last_exc}")
        try:
            vec = np.asarray(payload["vector"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderUnavailable(f"bad response from {self.url}: {exc!r}") from exc
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(f"service returned {vec.size} values, expected {self.dimension}")
        try:
            return normalize(vec)
        except ValueError as exc:
            raise ProviderUnavailable(f"bad vector from {self.url}: {exc}") from exc


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    if not text or not text.strip():
        raise EmptyText("text is empty")
    vec = provider.embed(text)
    return normalize(vec)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True)
class SearchHit:
    id: str
    score: float


class FlatIndex:
    """Exhaustive cosine-similarity index with insertion-order tie-breaking.

    Vectors are stored unit-normalized, so the score is a plain dot product.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self._ids: list[str] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def __len__(self):
        return len(self._ids)

    @property
    def ids(self):
        return tuple(self._ids)

    def vector(self, id_):
        return self._rows[self._ids.index(id_)]

    def add(self, id_: str, vector) -> "FlatIndex":
        if id_ in self._ids:
            raise DuplicateId(id_)
        vec = np.asarray(vector, dtype=float).reshape(-1)
        if vec.shape != (self.dimension,):
            raise DimensionMismatch(f"vector has {vec.size} dims, index has {self.dimension}")
        self._ids.append(id_)
        self._rows.append(normalize(vec))
        self._matrix = None
        return self

    def search(self, query, k: int = 1) -> list[SearchHit]:
        if not self._ids:
            raise EmptyIndex("index is empty")
        if k < 1:
            raise ValueError("k must be positive")
        q = np.asarray(query, dtype=float).reshape(-1)
        if q.shape != (self.dimension,):
            raise DimensionMismatch(f"query has {q.size} dims, index has {self.dimension}")
        q = normalize(q)
        if self._matrix is None:
            self._matrix = np.vstack(self._rows)
        scores = np.clip(self._matrix @ q, -1.0, 1.0)
        # stable sort on -score keeps insertion order among ties
        order = np.argsort(-scores, kind="stable")[:k]
        return [SearchHit(self._ids[i], float(scores[i])) for i in order]

    def to_dict(self):
        return {"dimension": self.dimension, "ids": list(self._ids),
                "vectors": [row.tolist() for row in self._rows]}

    @classmethod
    def from_dict(cls, data):
        index = cls(int(data["dimension"]))
        for id_, vec in zip(data["ids"], data["vectors"]):
            index.add(id_, vec)
        return index


def index_add(index: FlatIndex, id_: str, vector) -> FlatIndex:
    return index.add(id_, vector)


def index_search(index: FlatIndex, query, k: int = 1) -> list[SearchHit]:
    return index.search(query, k)
