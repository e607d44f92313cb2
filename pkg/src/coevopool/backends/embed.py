"""Text embedding providers and cosine helpers."""

from __future__ import annotations

import logging
import os
import time
import zlib
from typing import Optional, Sequence

import numpy as np

from ..exceptions import BackendError

logger = logging.getLogger(__name__)

HASH_DIM = 256
NGRAM = 3


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; vectors of unequal length are zero-padded, zero vectors give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        n = max(a.shape[0], b.shape[0])
        a = np.pad(a, (0, n - a.shape[0]))
        b = np.pad(b, (0, n - b.shape[0]))
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_to_many(query: np.ndarray, matrix: Sequence[np.ndarray]) -> np.ndarray:
    if len(matrix) == 0:
        return np.zeros(0)
    m = np.vstack(matrix)
    norms = np.linalg.norm(m, axis=1) * np.linalg.norm(query)
    dots = m @ query
    out = np.zeros(len(matrix))
    nz = norms > 0
    out[nz] = dots[nz] / norms[nz]
    return out


class HashingEmbedder:
    """Character n-gram counts hashed into a fixed-size L2-normalized vector.

    CRC32 of the UTF-8 n-gram picks the bucket, so vectors are identical
    across runs and platforms.
    """

    def __init__(self, dim: int = HASH_DIM, n: int = NGRAM, lowercase: bool = True):
        self.dim = dim
        self.n = n
        self.lowercase = lowercase

    def ngrams(self, text: str) -> list:
        if self.lowercase:
            text = text.lower()
        if len(text) < self.n:
            return [text] if text else []
        return [text[i:i + self.n] for i in range(len(text) - self.n + 1)]

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram in self.ngrams(text):
            vec[zlib.crc32(gram.encode("utf-8")) % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class RemoteEmbedder:
    """Embeddings from an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, base_url: str, model: str, api_key: Optional[str] = None, dim: int = 0,
                 timeout: float = 60.0, attempts: int = 3, backoff: float = 1.0, client=None, sleep=time.sleep):
        import httpx

        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("COEVO_API_KEY")
        self.dim = dim
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, text: str) -> np.ndarray:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last = None
        for attempt in range(self.attempts):
            try:
                resp = self._client.post(self.url, json={"model": self.model, "input": text}, headers=headers)
                if resp.status_code == 200:
                    vec = np.array(resp.json()["data"][0]["embedding"], dtype=np.float64)
                    self.dim = vec.shape[0]
                    return vec
                last = BackendError(f"embedding endpoint returned {resp.status_code}", status=resp.status_code)
            except (KeyError, IndexError, ValueError) as exc:
                last = BackendError(f"malformed embedding response: {exc}")
            except Exception as exc:  # transport errors
                last = BackendError(f"embedding request failed: {exc}")
            if attempt + 1 < self.attempts:
                self._sleep(self.backoff * 2 ** attempt)
        logger.warning("embedding failed after %d attempts", self.attempts)
        raise last
