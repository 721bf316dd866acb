"""Multi-vector documents over the target schema and late-interaction retrieval.

Every target attribute becomes one document whose text is its descriptive
rendering. Documents keep one vector per token; query/document relevance is
the sum over query tokens of the best cosine similarity against the
document's tokens (MaxSim). Vectors are stored unit-normalized so cosine is
a plain dot product.

Two embedders satisfy the same contract: a deterministic offline hash
embedder (each token string seeds a pseudo-random unit vector) and a remote
HTTP embedder for real token-level models.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .schema_model import AttributeRef, Schema, render_query

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Stands in when a text has no alphanumeric tokens at all; '<' can never
# appear in a real token, so there is no collision.
PAD_TOKEN = "<pad>"

UNIT_NORM_TOL = 1e-6


class EmbeddingError(RuntimeError):
    """Remote embedder transport failures or malformed responses."""


class EmptyIndexError(ValueError):
    """Retrieval was attempted against an index with no documents."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenEmbeddings:
    """Parallel token strings and unit-norm vectors, one row per token."""

    tokens: tuple[str, ...]
    vectors: np.ndarray  # shape (len(tokens), dim), float64

    def __post_init__(self) -> None:
        if len(self.tokens) != self.vectors.shape[0]:
            raise ValueError(
                f"{len(self.tokens)} tokens but {self.vectors.shape[0]} vectors"
            )
        norms = np.linalg.norm(self.vectors, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("vectors must be unit-norm")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)


class Embedder(Protocol):
    """Token-level embedder: fixed output dimension, unit-norm rows."""

    @property
    def dim(self) -> int: ...

    def tokenize(self, text: str) -> list[str]: ...

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic offline embedder.

    Each distinct token string maps to a fixed pseudo-random unit vector,
    keyed on (seed, token). Identical tokens always land on the same vector,
    distinct tokens on nearly orthogonal ones, so MaxSim reduces to a soft
    token-overlap score. The whole construction is bit-reproducible for a
    given seed.
    """

    def __init__(self, dim: int = 64, seed: int = 0) -> None:
        if dim < 1:
            raise ValueError("dim must be positive")
        self._dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    def tokenize(self, text: str) -> list[str]:
        return tokenize(text)

    def _vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}\x00{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            raw = rng.standard_normal(self._dim)
            vec = raw / np.linalg.norm(raw)
            self._cache[token] = vec
        return vec

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.empty((0, self._dim))
        return np.stack([self._vector(t) for t in tokens])


class RemoteEmbedder:
    """HTTP embedder speaking `POST /embed {"texts": [...]}`.

    Tokenization happens locally; the whitespace-joined tokens are posted as
    one text and the service must return one vector per posted token. Returned
    vectors are re-normalized defensively. Transient transport errors and 5xx
    responses are retried with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 10.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._dim: int | None = None

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise EmbeddingError("remote embedder dimension unknown before first call")
        return self._dim

    def tokenize(self, text: str) -> list[str]:
        return tokenize(text)

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        payload = {"texts": [" ".join(tokens)]}
        data = self._post(payload)
        try:
            dim = int(data["dim"])
            per_text = data["embeddings"]
            vectors = np.asarray(per_text[0], dtype=float)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise EmbeddingError(f"malformed embed response: {exc!r}") from exc
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise EmbeddingError(
                f"malformed embed response: expected (n, {dim}) vectors"
            )
        if vectors.shape[0] != len(tokens):
            raise EmbeddingError(
                f"embed response returned {vectors.shape[0]} vectors "
                f"for {len(tokens)} tokens"
            )
        if self._dim is None:
            self._dim = dim
        elif dim != self._dim:
            raise EmbeddingError(f"embedder dimension changed: {self._dim} -> {dim}")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return vectors / norms

    def _post(self, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(f"{self.base_url}/embed", json=payload)
                if resp.status_code >= 500:
                    last_error = EmbeddingError(f"server error {resp.status_code}")
                elif resp.status_code >= 400:
                    raise EmbeddingError(f"embed request rejected: {resp.status_code}")
                else:
                    return resp.json()
            except (httpx.TransportError, json.JSONDecodeError) as exc:
                last_error = exc
            if attempt < self.max_retries and self.backoff_base > 0:
                time.sleep(self.backoff_base * 2**attempt)
        raise EmbeddingError(f"embed request failed after retries: {last_error!r}")


def embed(text: str, embedder: Embedder) -> TokenEmbeddings:
    """Embed a text at token level; empty texts get a single padding token."""
    tokens = embedder.tokenize(text) or [PAD_TOKEN]
    vectors = embedder.embed_tokens(tokens)
    return TokenEmbeddings(tokens=tuple(tokens), vectors=np.asarray(vectors, dtype=float))


def maxsim(query: TokenEmbeddings, doc: TokenEmbeddings) -> float:
    """Sum over query tokens of the max cosine similarity over doc tokens."""
    if query.dim != doc.dim:
        raise ValueError(f"dimension mismatch: {query.dim} vs {doc.dim}")
    if len(doc) == 0 or len(query) == 0:
        return 0.0
    sims = query.vectors @ doc.vectors.T
    return float(sims.max(axis=1).sum())


def pooled_similarity(a: str, b: str, embedder: Embedder) -> float:
    """Cosine of mean-pooled, re-normalized token vectors. Symmetric."""

    def pool(text: str) -> np.ndarray:
        emb = embed(text, embedder)
        mean = emb.vectors.mean(axis=0)
        norm = np.linalg.norm(mean)
        return mean / norm if norm > 0 else mean

    value = float(np.dot(pool(a), pool(b)))
    return max(-1.0, min(1.0, value))


@dataclass(frozen=True)
class IndexedDocument:
    doc_id: int
    target_ref: AttributeRef
    text: str
    table_metadata: str
    embeddings: TokenEmbeddings


@dataclass(frozen=True)
class SemanticCandidate:
    target_ref: AttributeRef
    score: float
    rank: int  # 1-based


def build_documents(
    target: Schema,
    embedder: Embedder,
    workers: int = 1,
) -> list[IndexedDocument]:
    """One document per target attribute, in schema order.

    Document text is the attribute's descriptive rendering; the owning
    table's description rides along as metadata. Embedding may fan out over
    a bounded worker pool; doc_id order is preserved regardless.
    """
    refs = list(target.attribute_refs())
    texts = [render_query(ref, target) for ref in refs]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            embedded = list(pool.map(lambda t: embed(t, embedder), texts))
    else:
        embedded = [embed(t, embedder) for t in texts]
    return [
        IndexedDocument(
            doc_id=i,
            target_ref=ref,
            text=text,
            table_metadata=target.table(ref.table).description,
            embeddings=emb,
        )
        for i, (ref, text, emb) in enumerate(zip(refs, texts, embedded))
    ]


class VectorIndex:
    """Immutable exhaustive MaxSim index over one target schema.

    Target schemas here have at most a few hundred attributes, so every
    retrieval scores every document; there is no approximate search.
    """

    def __init__(self, schema_name: str, dim: int, documents: Sequence[IndexedDocument]):
        self.schema_name = schema_name
        self.dim = dim
        self.documents = tuple(documents)

    @classmethod
    def build(cls, target: Schema, embedder: Embedder, workers: int = 1) -> "VectorIndex":
        docs = build_documents(target, embedder, workers=workers)
        dim = docs[0].embeddings.dim if docs else embedder.dim
        return cls(schema_name=target.name, dim=dim, documents=docs)

    def __len__(self) -> int:
        return len(self.documents)

    def retrieve(self, query: TokenEmbeddings, k: int) -> list[SemanticCandidate]:
        """Top-k documents by MaxSim, ties broken by ascending doc_id."""
        if not self.documents:
            raise EmptyIndexError("index has no documents")
        if k < 1:
            raise ValueError("k must be >= 1")
        scored = sorted(
            ((maxsim(query, doc.embeddings), doc) for doc in self.documents),
            key=lambda pair: (-pair[0], pair[1].doc_id),
        )
        return [
            SemanticCandidate(target_ref=doc.target_ref, score=score, rank=i + 1)
            for i, (score, doc) in enumerate(scored[:k])
        ]

    def retrieve_text(self, text: str, k: int, embedder: Embedder) -> list[SemanticCandidate]:
        return self.retrieve(embed(text, embedder), k)

    def save(self, path: str | Path) -> None:
        payload = {
            "version": 1,
            "schema_name": self.schema_name,
            "dim": self.dim,
            "documents": [
                {
                    "doc_id": doc.doc_id,
                    "table": doc.target_ref.table,
                    "attribute": doc.target_ref.attribute,
                    "text": doc.text,
                    "table_metadata": doc.table_metadata,
                    "tokens": list(doc.embeddings.tokens),
                    "vectors": [list(row) for row in doc.embeddings.vectors],
                }
                for doc in self.documents
            ],
        }
        Path(path).write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("version") != 1:
            raise ValueError(f"unsupported index version {data.get('version')!r}")
        docs = [
            IndexedDocument(
                doc_id=d["doc_id"],
                target_ref=AttributeRef(d["table"], d["attribute"]),
                text=d["text"],
                table_metadata=d["table_metadata"],
                embeddings=TokenEmbeddings(
                    tokens=tuple(d["tokens"]),
                    vectors=np.asarray(d["vectors"], dtype=float),
                ),
            )
            for d in data["documents"]
        ]
        return cls(schema_name=data["schema_name"], dim=data["dim"], documents=docs)


def retrieve_topk(
    query_ref: AttributeRef,
    k: int,
    index: VectorIndex,
    source: Schema,
    embedder: Embedder,
) -> list[SemanticCandidate]:
    """Retrieve candidates for a source attribute by its rendered query text."""
    return index.retrieve_text(render_query(query_ref, source), k, embedder)
