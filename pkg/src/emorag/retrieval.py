"""Top-K retrieval over the sentiment corpus.

Similarity is the inner product of unit vectors (cosine).  Rankings sort by
similarity descending and break ties by ascending record id; similarities are
compared after rounding to ``TIE_DECIMALS`` places so that values equal up to
floating-point summation order count as ties in every backend.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from emorag.corpus import Sample, SentimentRecord
from emorag.errors import FormatError, PreconditionError, ShapeError, StaleCacheError, ValidationError
from emorag.textproc import bucket_ids

TIE_DECIMALS = 12
INDEX_MAGIC = b"EMIX"
INDEX_VERSION = 1


# --- embedding providers ----------------------------------------------------


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingProvider:
    """Bag of hashed tokens: counts in ``dim`` buckets, L2-normalized."""

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 1:
            raise PreconditionError("embedding dim must be positive")
        self.dim = int(dim)
        self.seed = int(seed)
        self.name = f"hashing-d{self.dim}-s{self.seed}"

    def counts(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.int64)
        for b in bucket_ids(text, self.dim, self.seed):
            out[b] += 1
        return out

    def embed(self, text: str) -> np.ndarray:
        counts = self.counts(text)
        total = int(counts @ counts)
        if total == 0:
            raise PreconditionError(f"text has no tokens to embed: {text!r}")
        return counts / math.sqrt(total)

    def __repr__(self) -> str:
        return f"HashingProvider(dim={self.dim}, seed={self.seed})"


_PROVIDERS: dict[str, Callable[..., EmbeddingProvider]] = {"hashing": HashingProvider}


def register_provider(name: str, factory: Callable[..., EmbeddingProvider]) -> None:
    _PROVIDERS[name] = factory


def get_provider(name: str = "hashing", **kwargs) -> EmbeddingProvider:
    try:
        factory = _PROVIDERS[name]
    except KeyError:
        raise PreconditionError(f"embedding provider {name!r} is not registered") from None
    return factory(**kwargs)


def embed_text(text: str, provider: EmbeddingProvider | str | None = None) -> np.ndarray:
    if provider is None or isinstance(provider, str):
        provider = get_provider(provider or "hashing")
    if not text or not text.strip():
        raise PreconditionError("cannot embed empty text")
    vec = np.asarray(provider.embed(text), dtype=np.float64)
    norm = float(np.sqrt(vec @ vec))
    if norm == 0.0:
        raise PreconditionError(f"provider {provider.name} returned a zero vector")
    if abs(norm - 1.0) > 1e-12:
        vec = vec / norm
    return vec


# --- hits and ranking -------------------------------------------------------


@dataclass(frozen=True)
class RetrievalHit:
    record_id: str
    similarity: float
    rank: int

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "similarity": self.similarity, "rank": self.rank}


def _rank(ids: Sequence[str], sims: Sequence[float], k: int) -> list[RetrievalHit]:
    keyed = sorted(zip(ids, sims), key=lambda pair: (-round(float(pair[1]), TIE_DECIMALS), pair[0]))
    return [RetrievalHit(rid, float(sim), rank) for rank, (rid, sim) in enumerate(keyed[:k], start=1)]


# --- index ------------------------------------------------------------------


@dataclass(frozen=True)
class Backend:
    kind: str = "flat"
    n_lists: int = 0
    n_probe: int = 0

    @classmethod
    def flat(cls) -> "Backend":
        return cls("flat")

    @classmethod
    def ivf(cls, n_lists: int, n_probe: int) -> "Backend":
        if n_lists < 1 or not 1 <= n_probe <= n_lists:
            raise PreconditionError(f"ivf needs 1 <= n_probe <= n_lists, got ({n_lists}, {n_probe})")
        return cls("ivf", int(n_lists), int(n_probe))

    def describe(self) -> str:
        return "flat" if self.kind == "flat" else f"ivf({self.n_lists},{self.n_probe})"


@dataclass
class EmbeddingIndex:
    dim: int
    backend: Backend
    vectors: np.ndarray
    ids: list[str]
    centroids: np.ndarray | None = None
    assignments: np.ndarray | None = None
    _lists: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.backend.kind == "ivf":
            self._lists = [np.flatnonzero(self.assignments == c) for c in range(self.backend.n_lists)]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        if self.vectors.shape != (len(self.ids), self.dim):
            raise ValidationError(f"vectors {self.vectors.shape} not aligned with {len(self.ids)} ids, dim {self.dim}")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("index ids are not unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-9:
            raise ValidationError("index vectors are not unit-norm")
        if self.backend.kind == "ivf":
            nearest = _nearest_centroid(self.vectors, self.centroids)
            if not np.array_equal(nearest, self.assignments):
                raise ValidationError("ivf assignments are not nearest-centroid")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"dim": self.dim, "backend": self.backend.describe()}, sort_keys=True).encode())
        for rid in self.ids:
            h.update(rid.encode("utf-8") + b"\0")
        h.update(self.vectors.astype("<f8").tobytes())
        if self.backend.kind == "ivf":
            h.update(self.centroids.astype("<f8").tobytes())
            h.update(self.assignments.astype("<i8").tobytes())
        return h.hexdigest()


def _nearest_centroid(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        (vectors * vectors).sum(axis=1)[:, None]
        - 2.0 * vectors @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def kmeans(vectors: np.ndarray, n_clusters: int, seed: int = 0, n_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means with k-means++ seeding; returns (centroids, assignments)."""
    n = vectors.shape[0]
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = ((vectors - vectors[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((vectors - vectors[nxt]) ** 2).sum(axis=1))
    centroids = vectors[chosen].copy()

    for _ in range(n_iter):
        assign = _nearest_centroid(vectors, centroids)
        for c in range(n_clusters):
            members = vectors[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # re-seed an empty list at the point farthest from its centroid
                far = np.argmax(((vectors - centroids[assign]) ** 2).sum(axis=1))
                centroids[c] = vectors[far]
    return centroids, _nearest_centroid(vectors, centroids)


def build_index(
    records: Sequence[SentimentRecord],
    provider: EmbeddingProvider | None = None,
    backend: Backend | None = None,
    seed: int = 0,
) -> EmbeddingIndex:
    provider = provider or HashingProvider()
    backend = backend or Backend.flat()
    if not records:
        raise PreconditionError("cannot index an empty corpus")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate record ids: {dupes[:5]}")
    vectors = np.stack([embed_text(r.text, provider) for r in records])
    if backend.kind == "flat":
        return EmbeddingIndex(provider.dim, backend, vectors, ids)
    if backend.n_lists > len(records):
        raise PreconditionError(f"ivf n_lists={backend.n_lists} exceeds corpus size {len(records)}")
    centroids, assignments = kmeans(vectors, backend.n_lists, seed=seed)
    return EmbeddingIndex(provider.dim, backend, vectors, ids, centroids, assignments)


def _check_query(index: EmbeddingIndex, query: np.ndarray, k: int) -> np.ndarray:
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ShapeError(f"query has shape {query.shape}, index dim is {index.dim}")
    return query


def top_k(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[RetrievalHit]:
    query = _check_query(index, query, k)
    if index.backend.kind == "flat":
        candidates = np.arange(len(index))
    else:
        d2 = ((index.centroids - query) ** 2).sum(axis=1)
        probe = sorted(range(len(d2)), key=lambda c: (d2[c], c))[: index.backend.n_probe]
        candidates = np.concatenate([index._lists[c] for c in probe])
    sims = index.vectors[candidates] @ query
    return _rank([index.ids[i] for i in candidates], sims.tolist(), k)


def brute_force_top_k(
    records: Sequence[SentimentRecord],
    provider: EmbeddingProvider | None,
    query_text: str,
    k: int,
) -> list[RetrievalHit]:
    """Full-scan cosine ranking, independent of any index structure.

    For :class:`HashingProvider` the cosine is evaluated from integer token
    counts with exact rational comparison; other providers fall back to a
    compensated float sum.
    """
    provider = provider or HashingProvider()
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    if not query_text.strip():
        raise PreconditionError("cannot embed empty text")
    if isinstance(provider, HashingProvider):
        q = provider.counts(query_text)
        qn = int(q @ q)
        if qn == 0:
            raise PreconditionError(f"text has no tokens to embed: {query_text!r}")
        scored = []
        for r in records:
            c = provider.counts(r.text)
            dot = int(q @ c)
            cn = int(c @ c)
            # cosine^2 as an exact fraction, signed
            key = Fraction(dot * abs(dot), qn * cn)
            scored.append((key, r.id, dot / math.sqrt(qn * cn)))
        scored.sort(key=lambda t: (-t[0], t[1]))
        return [RetrievalHit(rid, sim, rank) for rank, (_, rid, sim) in enumerate(scored[:k], start=1)]

    q = embed_text(query_text, provider)
    sims = []
    for r in records:
        v = np.asarray(provider.embed(r.text), dtype=np.float64)
        dot = math.fsum(float(a) * float(b) for a, b in zip(q, v))
        sims.append(dot / math.sqrt(math.fsum(float(x) * float(x) for x in v)))
    return _rank([r.id for r in records], sims, k)


# --- index file --------------------------------------------------------------


def save_index(index: EmbeddingIndex, path) -> str:
    """Write the binary index container; returns its fingerprint.

    Layout (little-endian): ``EMIX`` | u16 version | u32 dim | u8 backend tag
    (0 flat, 1 ivf) | u32 n | [ivf: u32 n_lists, u32 n_probe] | n ids as
    u32 length + UTF-8 bytes | n*dim f64 vectors | [ivf: n_lists*dim f64
    centroids, n u32 assignments].
    """
    tag = 0 if index.backend.kind == "flat" else 1
    parts = [INDEX_MAGIC, struct.pack("<HIBI", INDEX_VERSION, index.dim, tag, len(index))]
    if tag == 1:
        parts.append(struct.pack("<II", index.backend.n_lists, index.backend.n_probe))
    for rid in index.ids:
        raw = rid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(index.vectors.astype("<f8").tobytes())
    if tag == 1:
        parts.append(index.centroids.astype("<f8").tobytes())
        parts.append(index.assignments.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    return index.fingerprint()


def load_index(path) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index file (bad magic)")
        version, dim, tag, n = struct.unpack_from("<HIBI", raw, 4)
        if version != INDEX_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        pos = 4 + struct.calcsize("<HIBI")
        backend = Backend.flat()
        if tag == 1:
            n_lists, n_probe = struct.unpack_from("<II", raw, pos)
            pos += 8
            backend = Backend.ivf(n_lists, n_probe)
        elif tag != 0:
            raise FormatError(f"{path}: unknown backend tag {tag}")
        ids = []
        for _ in range(n):
            (length,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            ids.append(raw[pos : pos + length].decode("utf-8"))
            pos += length
        vectors = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=pos).reshape(n, dim).astype(np.float64)
        pos += 8 * n * dim
        centroids = assignments = None
        if tag == 1:
            centroids = np.frombuffer(raw, dtype="<f8", count=backend.n_lists * dim, offset=pos)
            centroids = centroids.reshape(backend.n_lists, dim).astype(np.float64)
            pos += 8 * backend.n_lists * dim
            assignments = np.frombuffer(raw, dtype="<u4", count=n, offset=pos).astype(np.int64)
            pos += 4 * n
        if pos != len(raw):
            raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt index ({exc})") from None
    index = EmbeddingIndex(dim, backend, vectors, ids, centroids, assignments)
    index.validate()
    return index


# --- offline cache -----------------------------------------------------------


@dataclass
class RetrievalCache:
    k: int
    index_fingerprint: str
    entries: dict[str, list[RetrievalHit]]

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "index_fingerprint": self.index_fingerprint,
            "entries": {sid: [h.to_json() for h in hits] for sid, hits in sorted(self.entries.items())},
        }


def precompute_cache(
    samples: Iterable[Sample],
    index: EmbeddingIndex,
    provider: EmbeddingProvider | None,
    k: int,
) -> RetrievalCache:
    """Retrieve top-``k`` hits for every sample, using its transcript as the query."""
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    provider = provider or HashingProvider()
    entries = {s.id: top_k(index, embed_text(s.text, provider), k) for s in samples}
    return RetrievalCache(k, index.fingerprint(), entries)


def save_cache(cache: RetrievalCache, path) -> None:
    Path(path).write_text(json.dumps(cache.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_cache(path, index: EmbeddingIndex | None = None, expected_fingerprint: str | None = None) -> RetrievalCache:
    """Read a cache file; any damage or fingerprint mismatch is a stale-cache error."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        k = int(obj["k"])
        fingerprint = str(obj["index_fingerprint"])
        entries = {}
        for sid, hits in obj["entries"].items():
            parsed = [RetrievalHit(str(h["record_id"]), float(h["similarity"]), int(h["rank"])) for h in hits]
            if [h.rank for h in parsed] != list(range(1, len(parsed) + 1)):
                raise ValueError(f"entry {sid} ranks are not consecutive")
            entries[str(sid)] = parsed
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise StaleCacheError(f"retrieval cache {path} is unreadable ({exc}); rebuild it") from None
    if index is not None:
        expected_fingerprint = index.fingerprint()
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise StaleCacheError(f"retrieval cache {path} was built for a different index; rebuild it")
    if index is not None:
        want = min(k, len(index))
        for sid, hits in entries.items():
            if len(hits) != want:
                raise StaleCacheError(f"cache entry {sid} has {len(hits)} hits, expected {want}")
    return RetrievalCache(k, fingerprint, entries)
