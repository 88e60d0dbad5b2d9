"""Sentence embeddings: semantic (F_s) and sentiment (F_e), 768-d each.

Two backends share one interface: ``semantic(text)`` and
``sentiment(text, force_label=None)``. ``StubBackend`` is deterministic and
offline; ``HttpBackend`` talks to a local inference endpoint serving
pretrained models. ``CachedBackend`` wraps either with an on-disk cache.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendError, ContractError

log = logging.getLogger(__name__)

FEATURE_DIM = 768
SENTIMENT_LABELS = ("joy", "sadness", "anger")
ENDPOINT_ENV = "SIGNFACE_BACKEND_URL"

KEYWORDS = {
    "joy": ("happy", "joy", "glad", "delighted", "love", "great", "wonderful", "excited"),
    "sadness": ("sad", "unhappy", "sorry", "miss", "cry", "lonely", "grief", "upset"),
    "anger": ("angry", "mad", "furious", "hate", "annoyed", "rage", "outraged"),
}
_NOISE_SCALE = 0.1


@dataclass
class SentenceFeatures:
    semantic: np.ndarray
    sentiment: np.ndarray
    sentiment_label: str | None = None
    source_text: str = ""

    def __post_init__(self):
        self.semantic = _check_vector(self.semantic, "semantic")
        self.sentiment = _check_vector(self.sentiment, "sentiment")

    def concat(self) -> np.ndarray:
        return np.concatenate([self.semantic, self.sentiment])


def _check_vector(vec, what):
    vec = np.asarray(vec, dtype=np.float32)
    if vec.shape != (FEATURE_DIM,):
        raise ContractError(f"{what} embedding must have {FEATURE_DIM} entries, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ContractError(f"{what} embedding is not finite")
    return vec


def _check_text(text):
    if not isinstance(text, str) or not text.strip():
        raise ContractError("text must be a non-empty string")


def _hashed_gaussian(*parts) -> np.ndarray:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(FEATURE_DIM)


def _unit(v):
    return v / np.linalg.norm(v)


class StubBackend:
    """Deterministic offline backend.

    Semantic vectors average per-token hashed directions with a whole-text
    direction, so sentences sharing words land near each other while any
    character edit still moves the vector. Sentiment vectors sit on one of
    three mutually orthogonal prototypes, picked by keyword, plus small
    text-dependent noise.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.backend_id = f"stub-{seed}"
        q, _ = np.linalg.qr(np.stack([_hashed_gaussian("prototype", seed, lab) for lab in SENTIMENT_LABELS], 1))
        self.prototypes = {lab: q[:, i] for i, lab in enumerate(SENTIMENT_LABELS)}

    def semantic(self, text: str) -> np.ndarray:
        tokens = re.findall(r"\w+", text.lower()) or [text]
        words = np.mean([_unit(_hashed_gaussian("token", self.seed, t)) for t in tokens], axis=0)
        whole = _unit(_hashed_gaussian("text", self.seed, text))
        return _unit(_unit(words) + 0.5 * whole).astype(np.float32)

    def classify(self, text: str) -> str:
        tokens = re.findall(r"\w+", text.lower())
        for label in SENTIMENT_LABELS:
            if any(t.startswith(k) for t in tokens for k in KEYWORDS[label]):
                return label
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        return SENTIMENT_LABELS[digest[0] % len(SENTIMENT_LABELS)]

    def sentiment(self, text: str, force_label: str | None = None):
        label = force_label or self.classify(text)
        if label not in self.prototypes:
            raise ContractError(f"unknown sentiment label {label!r}")
        noise = _NOISE_SCALE * _unit(_hashed_gaussian("sentiment-noise", self.seed, text))
        return (self.prototypes[label] + noise).astype(np.float32), label


def stub_backend(seed: int = 0) -> StubBackend:
    return StubBackend(seed)


class HttpBackend:
    """Client for a local embedding service.

    Protocol: ``POST {endpoint}/semantic`` with ``{"text": ...}`` answers
    ``{"embedding": [768 floats]}``; ``POST {endpoint}/sentiment`` with
    ``{"text": ..., "label": optional}`` answers ``{"embedding": [...],
    "label": "joy"|"sadness"|"anger"}``.
    """

    def __init__(self, endpoint: str | None = None, timeout=30.0, retries=3, backoff=0.5,
                 transport=None, sleep=time.sleep):
        import httpx

        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise BackendError(f"no backend endpoint configured (set {ENDPOINT_ENV})")
        self.endpoint = endpoint.rstrip("/")
        self.backend_id = f"http:{self.endpoint}"
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _post(self, route, payload):
        import httpx

        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(f"{self.endpoint}/{route}", json=payload)
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    delay = self.backoff * 2 ** attempt
                    log.warning("backend %s/%s failed (%s); retrying in %.1fs", self.endpoint, route, exc, delay)
                    self._sleep(delay)
        raise BackendError(f"backend {self.endpoint}/{route} unreachable after {self.retries + 1} attempts: {last}")

    def semantic(self, text):
        doc = self._post("semantic", {"text": text})
        return np.asarray(doc.get("embedding"), dtype=np.float32)

    def sentiment(self, text, force_label=None):
        payload = {"text": text}
        if force_label:
            payload["label"] = force_label
        doc = self._post("sentiment", payload)
        return np.asarray(doc.get("embedding"), dtype=np.float32), doc.get("label")


CACHE_MAGIC = b"SGNFEAT\x00"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sHH")
_LABEL_CODES = {None: 0, **{lab: i + 1 for i, lab in enumerate(SENTIMENT_LABELS)}}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def write_cache_record(path, vec, label=None):
    """8-byte magic, u16 version, u16 label code, then 768 little-endian float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, _LABEL_CODES[label]) + np.asarray(vec, "<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


def read_cache_record(path):
    raw = Path(path).read_bytes()
    if len(raw) != _HEADER.size + 4 * FEATURE_DIM:
        raise ContractError(f"cache record {path} has the wrong size")
    magic, version, code = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ContractError(f"cache record {path}: bad magic or version")
    vec = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    return vec, _CODE_LABELS.get(code)


class CachedBackend:
    """Content-hash keyed on-disk cache in front of another backend."""

    def __init__(self, inner, cache_dir):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.cache_dir = Path(cache_dir)
        self.hits = self.misses = 0

    def _path(self, *parts):
        key = hashlib.sha256("\x00".join((self.backend_id,) + parts).encode()).hexdigest()
        return self.cache_dir / key[:2] / f"{key}.bin"

    def _lookup(self, path, compute):
        if path.exists():
            self.hits += 1
            return read_cache_record(path)
        self.misses += 1
        vec, label = compute()
        vec = _check_vector(vec, "backend")
        write_cache_record(path, vec, label)
        return read_cache_record(path)

    def semantic(self, text):
        vec, _ = self._lookup(self._path("semantic", text), lambda: (self.inner.semantic(text), None))
        return vec

    def sentiment(self, text, force_label=None):
        return self._lookup(self._path("sentiment", force_label or "", text),
                            lambda: self.inner.sentiment(text, force_label))


def extract_semantic(text: str, backend) -> np.ndarray:
    _check_text(text)
    return _check_vector(backend.semantic(text), "semantic")


def extract_sentiment(text: str, backend, force_label: str | None = None):
    _check_text(text)
    if force_label is not None and force_label not in SENTIMENT_LABELS:
        raise ContractError(f"unknown sentiment label {force_label!r}")
    vec, label = backend.sentiment(text, force_label)
    return _check_vector(vec, "sentiment"), label


def sentence_features(text: str, backend, force_label: str | None = None) -> SentenceFeatures:
    semantic = extract_semantic(text, backend)
    sentiment, label = extract_sentiment(text, backend, force_label)
    return SentenceFeatures(semantic, sentiment, label, text)
