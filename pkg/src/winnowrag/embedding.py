"""Query-aware document embeddings.

Each document is embedded jointly with the query so that clustering groups
documents by the stance they take on that particular question.
"""
from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from .documents import RetrievedDocument
from .errors import (
    BackendError,
    BackendUnavailableError,
    ConfigurationError,
    InputValidationError,
    MalformedResponseError,
)

log = logging.getLogger(__name__)

EMBEDDING_TEMPLATE = "Query: {query}\nDocument: {title}\n{text}"
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class QueryDocumentPrompt:
    query: str
    document: str
    rendered: str


class Embedder(Protocol):
    """Anything that maps a batch of texts to vectors, deterministically."""

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]: ...


def render_embedding_prompt(query: str, document: RetrievedDocument) -> QueryDocumentPrompt:
    if not query or not query.strip():
        raise InputValidationError("query must be nonempty")
    if not document.text or not document.text.strip():
        raise InputValidationError(f"document {document.doc_id!r} has empty text")
    rendered = EMBEDDING_TEMPLATE.format(query=query, title=document.title, text=document.text)
    return QueryDocumentPrompt(query=query, document=document.text, rendered=rendered)


def embed_documents(
    query: str,
    docs: Sequence[RetrievedDocument],
    embedder: Optional[Embedder],
    *,
    trust_precomputed: bool = True,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_workers: int = 4,
) -> list[np.ndarray]:
    """Embed every document against ``query``; output order matches ``docs``.

    Documents carrying a precomputed embedding are passed through untouched
    when ``trust_precomputed`` is set. The rest are sent to ``embedder`` in
    batches of ``batch_size``, possibly concurrently.

    Raises:
        InputValidationError: ``docs`` empty, or an embedder is needed but missing.
        BackendError: the embedder failed.
        ConfigurationError: returned vectors disagree on dimension.
    """
    if not docs:
        raise InputValidationError("docs must be nonempty")
    if batch_size < 1:
        raise InputValidationError("batch_size must be >= 1")

    out: list[Optional[np.ndarray]] = [None] * len(docs)
    pending: list[int] = []
    prompts: list[str] = []
    for i, doc in enumerate(docs):
        if trust_precomputed and doc.embedding is not None:
            out[i] = np.asarray(doc.embedding, dtype=float)
        else:
            prompts.append(render_embedding_prompt(query, doc).rendered)
            pending.append(i)

    if pending:
        if embedder is None:
            raise InputValidationError("documents lack precomputed embeddings and no embedder was given")
        batches = [prompts[s : s + batch_size] for s in range(0, len(prompts), batch_size)]

        def run(batch: list[str]) -> list[list[float]]:
            try:
                vecs = embedder.embed_batch(batch)
            except BackendError:
                raise
            except Exception as exc:  # backend-specific failures
                raise BackendError(f"embedder failed: {exc}") from exc
            if len(vecs) != len(batch):
                raise MalformedResponseError(f"embedder returned {len(vecs)} vectors for {len(batch)} texts")
            return vecs

        if len(batches) == 1 or max_workers <= 1:
            results = [run(b) for b in batches]
        else:
            with ThreadPoolExecutor(max_workers=min(max_workers, len(batches))) as pool:
                results = list(pool.map(run, batches))
        flat = [v for batch in results for v in batch]
        for i, vec in zip(pending, flat):
            out[i] = np.asarray(vec, dtype=float)

    vectors = [v for v in out if v is not None]
    dims = {v.shape[0] if v.ndim == 1 else -1 for v in vectors}
    if len(dims) != 1 or min(dims) <= 0:
        raise ConfigurationError(f"embedding dimension mismatch: {sorted(dims)}")
    for v in vectors:
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("embedding contains non-finite values")
    return vectors


class HashEmbedder:
    """Deterministic offline embedder: each text seeds a unit Gaussian vector.

    Identical texts map to identical vectors across processes. It carries no
    semantics; it exists for tests and fully offline runs.
    """

    def __init__(self, dim: int = 64) -> None:
        if dim < 1:
            raise InputValidationError("dim must be positive")
        self.dim = dim
        self.calls: list[list[str]] = []

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        self.calls.append(list(texts))
        out = []
        for text in texts:
            seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
            v = np.random.default_rng(seed).standard_normal(self.dim)
            out.append((v / np.linalg.norm(v)).tolist())
        return out


class HttpEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        *,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        client: Optional[httpx.Client] = None,
    ) -> None:
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"model": self.model, "input": list(texts)}
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = self._client.post(self.url, json=payload, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                body = resp.json()
                data = sorted(body["data"], key=lambda d: d.get("index", 0))
                return [list(map(float, d["embedding"])) for d in data]
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponseError(f"bad embeddings payload: {exc}") from exc
            except httpx.HTTPError as exc:
                last = exc
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff * 2**attempt)
        raise BackendUnavailableError(f"embedding endpoint unavailable after {self.max_attempts} attempts: {last}")

    @classmethod
    def from_env(cls, base_url: str, model: str, api_key_env: str = "OPENAI_API_KEY") -> "HttpEmbedder":
        return cls(base_url, model, os.environ.get(api_key_env))
