"""Tokenization and stable token hashing shared by retrieval and the text encoder."""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache

_PUNCT = re.compile(r"[^\w\s]|_", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


@lru_cache(maxsize=1 << 16)
def token_bucket(token: str, n_buckets: int, seed: int = 0) -> int:
    # blake2b keyed by the seed: stable across processes, unlike hash()
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % n_buckets


def bucket_ids(text: str, n_buckets: int, seed: int = 0) -> list[int]:
    return [token_bucket(tok, n_buckets, seed) for tok in tokenize(text)]
