"""Corpus ingestion, embedding, and the embedded top-k vector index.

The index is a plain exhaustive cosine scan over unit-normalized float64
embeddings. That is deliberate: at the corpus sizes this package targets, a
brute-force matmul is faster to build, trivially correct, and bit-stable
across save/load, which is what the tests pin down. Ties are broken by
ascending chunk_id.

Token counts are estimated as len(text) // 4 (floor, min 1). The estimate is
documented behavior, not an approximation detail: ingestion truncation and
compute_k are exact under it.

Index cache layout (little-endian), version 1:

    magic   4 bytes  b"DVIX"
    version u32
    dim     u32
    count   u32
    provider_id  u32 length + utf-8 bytes
    then per chunk:
        doc_id    u32 length + utf-8 bytes
        chunk_id  u32 length + utf-8 bytes
        text      u32 length + utf-8 bytes
        token_estimate u32
        embedding dim * f64
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, replace
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .core import DelveError

MAGIC = b"DVIX"
FORMAT_VERSION = 1
K_CAP = 20

TOOL_NAME = "vector_search"


class RetrievalError(DelveError):
    pass


class ProviderFailure(RetrievalError):
    """Embedding provider failed; carries the offending batch's chunk ids."""

    def __init__(self, message: str, failing_ids: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.failing_ids = list(failing_ids)


class ToolExecutionError(RetrievalError):
    pass


def token_estimate(text: str) -> int:
    return max(1, len(text) // 4)


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    chunk_id: str
    text: str
    token_estimate: int
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("chunk text must be nonempty")


@dataclass(frozen=True)
class IngestionPolicy:
    """How raw documents become chunks.

    modes: truncate_prefix (first T estimated tokens of each document as one
    chunk), page_level (one chunk per page), provided_chunks (pass through
    pre-segmented chunks), whole_document.
    """

    mode: str
    t: int | None = None

    MODES = ("truncate_prefix", "page_level", "provided_chunks", "whole_document")

    def __post_init__(self) -> None:
        if self.mode not in self.MODES:
            raise ValueError(f"unknown ingestion mode {self.mode!r}")
        if self.mode == "truncate_prefix" and (self.t is None or self.t <= 0):
            raise ValueError("truncate_prefix requires positive T")

    @classmethod
    def parse(cls, text: str) -> "IngestionPolicy":
        """Parse CLI shorthand: truncate:512 | pages | chunks | whole."""
        if text.startswith("truncate:"):
            return cls("truncate_prefix", int(text.split(":", 1)[1]))
        name = {
            "pages": "page_level",
            "page_level": "page_level",
            "chunks": "provided_chunks",
            "provided_chunks": "provided_chunks",
            "whole": "whole_document",
            "whole_document": "whole_document",
        }.get(text)
        if name is None:
            raise ValueError(f"unknown ingestion policy {text!r}")
        return cls(name)


@dataclass
class IngestResult:
    chunks: list[Chunk]
    skipped_empty: int = 0


def _chunk_id(doc_id: str, i: int) -> str:
    return f"{doc_id}#{i:04d}"


def ingest(raw_docs: Iterable[dict[str, Any]], policy: IngestionPolicy) -> IngestResult:
    """Turn raw documents into chunks under the given policy.

    Raw documents are dicts with doc_id and text; page_level additionally
    reads a pages list (fallback: form-feed splits), provided_chunks reads a
    chunks list. Empty documents are skipped and counted, not fatal.
    """
    chunks: list[Chunk] = []
    skipped = 0
    for doc in raw_docs:
        doc_id = str(doc.get("doc_id", "")).strip()
        if not doc_id:
            raise RetrievalError("raw document without doc_id")
        text = doc.get("text", "") or ""
        if policy.mode == "provided_chunks":
            provided = [c for c in doc.get("chunks", []) if c]
            if not provided:
                skipped += 1
                continue
            for i, piece in enumerate(provided):
                chunks.append(Chunk(doc_id, _chunk_id(doc_id, i), piece, token_estimate(piece)))
            continue
        if policy.mode == "page_level":
            pages = doc.get("pages")
            if pages is None:
                pages = [p for p in text.split("\f")]
            pages = [p for p in pages if p.strip()]
            if not pages:
                skipped += 1
                continue
            for i, page in enumerate(pages):
                chunks.append(Chunk(doc_id, _chunk_id(doc_id, i), page, token_estimate(page)))
            continue
        if not text.strip():
            skipped += 1
            continue
        if policy.mode == "truncate_prefix":
            assert policy.t is not None
            text = text[: 4 * policy.t]
        chunks.append(Chunk(doc_id, _chunk_id(doc_id, 0), text, token_estimate(text)))
    return IngestResult(chunks, skipped)


class EmbeddingProvider(Protocol):
    dimension: int
    provider_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic test embedder: seeded feature hashing of char n-grams.

    Character 1-, 2-, and 3-grams are hashed (crc32 with a seed prefix) into
    the configured dimension with a sign bit, then the vector is normalized.
    Stable across platforms and Python versions; no model downloads.
    """

    def __init__(self, dimension: int = 256, seed: int = 0) -> None:
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension
        self.seed = seed
        self.provider_id = f"hash-v1:d{dimension}:s{seed}"
        self._basis = zlib.crc32(f"hash-embedder:{seed}".encode("utf-8"))

    def _accumulate(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        data = text.encode("utf-8")
        basis = self._basis
        dim = self.dimension
        for n in (1, 2, 3):
            if len(data) < n:
                continue
            for i in range(len(data) - n + 1):
                h = zlib.crc32(data[i : i + n], basis + n)
                if (h >> 17) & 1:
                    vec[h % dim] += 1.0
                else:
                    vec[h % dim] -= 1.0
        return vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            vec = self._accumulate(text)
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                vec[0] = 1.0
                norm = 1.0
            out[row] = vec / norm
        return out


_HASH_PROVIDER_ID = re.compile(r"^hash-v1:d(?P<dim>\d+):s(?P<seed>-?\d+)$")


def hash_provider_from_id(provider_id: str) -> HashEmbedder:
    """Rebuild the embedder a saved index was built with, from its id."""
    m = _HASH_PROVIDER_ID.match(provider_id)
    if m is None:
        raise RetrievalError(f"not a hash-embedder provider id: {provider_id!r}")
    return HashEmbedder(dimension=int(m.group("dim")), seed=int(m.group("seed")))


@dataclass(frozen=True)
class QueryResult:
    """Ranked (chunk_id, cosine score) pairs, best first."""

    hits: tuple[tuple[str, float], ...]

    def chunk_ids(self) -> list[str]:
        return [cid for cid, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)


class VectorIndex:
    """Immutable exhaustive-scan cosine index over unit-norm embeddings."""

    def __init__(self, chunks: list[Chunk], dimension: int, provider_id: str) -> None:
        if not chunks:
            raise RetrievalError("index needs at least one chunk")
        ids = [c.chunk_id for c in chunks]
        if len(set(ids)) != len(ids):
            raise RetrievalError("chunk_ids must be unique")
        for c in chunks:
            if c.embedding is None or c.embedding.shape != (dimension,):
                raise RetrievalError(f"chunk {c.chunk_id} missing a dim-{dimension} embedding")
        self.chunks = chunks
        self.dimension = dimension
        self.provider_id = provider_id
        self._ids = ids
        self._matrix = np.stack([c.embedding for c in chunks]).astype(np.float64)
        norms = np.linalg.norm(self._matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise RetrievalError("embeddings must be unit-norm within 1e-6")

    def __len__(self) -> int:
        return len(self.chunks)

    def by_chunk_id(self, chunk_id: str) -> Chunk:
        # linear is fine here; hot paths never call this
        for c in self.chunks:
            if c.chunk_id == chunk_id:
                return c
        raise KeyError(chunk_id)

    def search_vector(self, query_vec: np.ndarray, k: int) -> QueryResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self._matrix @ np.asarray(query_vec, dtype=np.float64)
        n = len(self._ids)
        kk = min(k, n)
        if n <= 4 * kk + 16:
            cand = range(n)
        else:
            pool = 4 * kk + 16
            top = np.argpartition(-scores, pool - 1)[:pool]
            cmin = scores[top].min()
            # everything strictly above cmin is inside the pool; pulling in all
            # score==cmin rows keeps the global tie rule exact at the boundary
            cand = np.flatnonzero(scores >= cmin)
        order = sorted(cand, key=lambda i: (-scores[i], self._ids[i]))[:kk]
        return QueryResult(tuple((self._ids[i], float(scores[i])) for i in order))


def build_index(
    chunks: Sequence[Chunk], provider: EmbeddingProvider, batch_size: int = 256
) -> VectorIndex:
    """Embed chunks (renormalizing) and assemble the index."""
    embedded: list[Chunk] = []
    for start in range(0, len(chunks), batch_size):
        batch = list(chunks[start : start + batch_size])
        try:
            vectors = provider.embed([c.text for c in batch])
        except Exception as exc:
            raise ProviderFailure(
                f"embedding batch failed: {exc}", [c.chunk_id for c in batch]
            ) from exc
        for c, vec in zip(batch, np.asarray(vectors, dtype=np.float64)):
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ProviderFailure("provider returned a zero vector", [c.chunk_id])
            embedded.append(replace(c, embedding=vec / norm))
    return VectorIndex(embedded, provider.dimension, provider.provider_id)


def search(index: VectorIndex, provider: EmbeddingProvider, query: str, k: int) -> QueryResult:
    vec = provider.embed([query])[0]
    norm = float(np.linalg.norm(vec))
    if norm > 0:
        vec = vec / norm
    return index.search_vector(vec, k)


def compute_k(token_budget: int, avg_chunk_tokens: int) -> int:
    """Retrieval depth from a context token budget: capped inverse scaling."""
    if token_budget <= 0 or avg_chunk_tokens <= 0:
        raise ValueError("token_budget and avg_chunk_tokens must be positive")
    return min(K_CAP, max(1, round(token_budget / avg_chunk_tokens)))


# --- persistence -------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise RetrievalError("index file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_index(index: VectorIndex, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, index.dimension, len(index)))
        fh.write(_pack_str(index.provider_id))
        for c in index.chunks:
            fh.write(_pack_str(c.doc_id))
            fh.write(_pack_str(c.chunk_id))
            fh.write(_pack_str(c.text))
            fh.write(struct.pack("<I", c.token_estimate))
            assert c.embedding is not None
            fh.write(c.embedding.astype("<f8").tobytes())


def load_index(path: str) -> VectorIndex:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise RetrievalError("not an index file (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise RetrievalError(f"unsupported index version {version}")
    dimension = reader.u32()
    count = reader.u32()
    provider_id = reader.string()
    chunks: list[Chunk] = []
    for _ in range(count):
        doc_id = reader.string()
        chunk_id = reader.string()
        text = reader.string()
        estimate = reader.u32()
        vec = np.frombuffer(reader.take(8 * dimension), dtype="<f8").astype(np.float64)
        chunks.append(Chunk(doc_id, chunk_id, text, estimate, vec))
    return VectorIndex(chunks, dimension, provider_id)


# --- the agent-facing tool ---------------------------------------------------

TOOL_SCHEMA = {
    "name": TOOL_NAME,
    "description": (
        "Search the task corpus. Takes a free-text query and returns the "
        "top matching chunks with their ids and similarity scores."
    ),
    "parameters": {
        "type": "object",
        "properties": {"query": {"type": "string", "description": "search query text"}},
        "required": ["query"],
    },
}

_RESULT_HEADER = "[{chunk_id}] score={score:.4f}"


def format_results(result: QueryResult, index: VectorIndex) -> str:
    blocks = []
    for chunk_id, score in result.hits:
        chunk = index.by_chunk_id(chunk_id)
        blocks.append(_RESULT_HEADER.format(chunk_id=chunk_id, score=score) + "\n" + chunk.text)
    return "\n\n".join(blocks) if blocks else "(no results)"


def parse_result_chunk_ids(output_text: str) -> list[str]:
    """Recover chunk ids from a formatted tool output (analytics side)."""
    ids = []
    for line in output_text.splitlines():
        if line.startswith("[") and "] score=" in line:
            ids.append(line[1 : line.index("] score=")])
    return ids


def doc_id_of(chunk_id: str) -> str:
    return chunk_id.rsplit("#", 1)[0]


class SearchTool:
    """vector_search: the agent's sole tool."""

    name = TOOL_NAME

    def __init__(self, index: VectorIndex, provider: EmbeddingProvider, k: int) -> None:
        if not 1 <= k <= K_CAP:
            raise ValueError(f"k must be in 1..{K_CAP}")
        self.index = index
        self.provider = provider
        self.k = k

    def schema(self) -> dict:
        return TOOL_SCHEMA

    def execute(self, arguments: dict[str, Any]) -> str:
        query = arguments.get("query")
        if not isinstance(query, str) or not query:
            raise ToolExecutionError("vector_search requires a nonempty string 'query'")
        result = search(self.index, self.provider, query, self.k)
        return format_results(result, self.index)
