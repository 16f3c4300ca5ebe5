"""Black-box classifier handles: a bundled toy CNN, a remote HTTP client, caching.

Every handle classifies batches of (3, H, W) images with pixel values in
[0, 255] and returns argmax labels (ties to the lowest class index). Images
are quantized to 32-bit floats before classification: that is the wire
precision of the remote protocol, so the bundled model sees exactly what a
served model would, and label caches keyed by the 32-bit bytes are faithful.

Remote protocol: POST {base_url}/v1/classify with JSON
{"shape": [N, 3, H, W], "dtype": "f32le", "data": "<base64 of raw
little-endian float32, NCHW, 0-255>"} answered by {"labels": [int, ...]}.
"""

from __future__ import annotations

import base64
import hashlib
import math
import threading
from typing import List, Optional, Sequence, Tuple

import numpy as np
import requests

from .core import seeded_rng, to_f32_bytes

DEFAULT_TIMEOUT = 30.0
DEFAULT_BATCH_LIMIT = 64


class ClassifierError(RuntimeError):
    """Base for classifier transport/protocol failures."""


class TransportError(ClassifierError):
    """The endpoint could not be reached (connection, timeout, DNS)."""


class HttpStatusError(ClassifierError):
    """The endpoint answered with a non-200 status."""

    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"classifier endpoint returned HTTP {status} {detail}".strip())
        self.status = status


class ProtocolError(ClassifierError):
    """The endpoint's response body does not follow the protocol."""


class ClassifierHandle:
    """Base class: immutable metadata plus batch classification."""

    name: str
    input_shape: Tuple[int, int, int]
    n_classes: int

    def classify_batch(self, images) -> List[int]:
        raise NotImplementedError

    def _as_batch(self, images) -> np.ndarray:
        batch = np.asarray(images, dtype=float)
        if batch.size == 0:
            return np.zeros((0,) + self.input_shape)
        if batch.ndim == 3:
            batch = batch[np.newaxis]
        if batch.ndim != 4 or batch.shape[1:] != self.input_shape:
            raise ValueError(
                f"images must be (N,) + {self.input_shape}, got {batch.shape}"
            )
        return batch


class ToyCnnClassifier(ClassifierHandle):
    """Seeded 3-layer conv-ReLU network, stride 2, global average pool, readout.

    Deterministic pure function of the 32-bit pixel bytes; two instances with
    equal seeds classify identically.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, seed: int, input_shape: Tuple[int, int, int] = (3, 32, 32),
                 n_classes: int = 10):
        c, h, w = input_shape
        if c != 3:
            raise ValueError(f"toy classifier expects 3 channels, got {c}")
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.seed = int(seed)
        self.name = f"builtin:{seed}"
        self.input_shape = (3, int(h), int(w))
        self.n_classes = int(n_classes)
        rng = seeded_rng(seed, "toy-cnn")
        self.kernels = []
        prev = 3
        for c_out in self.CHANNELS:
            fan_in = prev * 9
            self.kernels.append(
                rng.standard_normal((c_out, prev, 3, 3)) * math.sqrt(2.0 / fan_in)
            )
            prev = c_out
        self.readout = rng.standard_normal((n_classes, prev)) / math.sqrt(prev)

    @staticmethod
    def _conv_stride2(batch: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        padded = np.pad(batch, ((0, 0), (0, 0), (1, 1), (1, 1)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3),
                                                           axis=(2, 3))
        windows = windows[:, :, ::2, ::2]
        return np.einsum("ncijab,ocab->noij", windows, kernel, optimize=True)

    def logits(self, images) -> np.ndarray:
        batch = self._as_batch(images)
        # quantize to wire precision first so labels depend only on f32 bytes
        batch = batch.astype(np.float32).astype(np.float64)
        act = batch / 127.5 - 1.0
        for kernel in self.kernels:
            act = np.maximum(self._conv_stride2(act, kernel), 0.0)
        pooled = act.mean(axis=(2, 3))
        return pooled @ self.readout.T

    def classify_batch(self, images) -> List[int]:
        batch = self._as_batch(images)
        if batch.shape[0] == 0:
            return []
        return [int(label) for label in np.argmax(self.logits(batch), axis=1)]


def builtin_toy_classifier(seed: int, shape: Tuple[int, int, int] = (3, 32, 32),
                           n_classes: int = 10) -> ToyCnnClassifier:
    return ToyCnnClassifier(seed, shape, n_classes)


class RemoteClassifier(ClassifierHandle):
    """HTTP client for the classify protocol; splits batches under the limit."""

    def __init__(self, base_url: str, input_shape: Tuple[int, int, int] = (3, 32, 32),
                 n_classes: int = 1000, timeout: float = DEFAULT_TIMEOUT,
                 batch_limit: int = DEFAULT_BATCH_LIMIT,
                 session: Optional[requests.sessions.Session] = None):
        if batch_limit < 1:
            raise ValueError("batch_limit must be positive")
        self.base_url = base_url.rstrip("/")
        self.name = f"remote:{self.base_url}"
        self.input_shape = tuple(int(v) for v in input_shape)
        self.n_classes = int(n_classes)
        self.timeout = float(timeout)
        self.batch_limit = int(batch_limit)
        self._session = session or requests.Session()

    def classify_batch(self, images) -> List[int]:
        batch = self._as_batch(images)
        labels: List[int] = []
        for start in range(0, batch.shape[0], self.batch_limit):
            chunk = batch[start:start + self.batch_limit]
            labels.extend(self._classify_chunk(chunk))
        return labels

    def _classify_chunk(self, chunk: np.ndarray) -> List[int]:
        payload = {
            "shape": list(chunk.shape),
            "dtype": "f32le",
            "data": base64.b64encode(
                np.ascontiguousarray(chunk, dtype="<f4").tobytes()
            ).decode("ascii"),
        }
        try:
            resp = self._session.post(f"{self.base_url}/v1/classify",
                                      json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"classifier endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise HttpStatusError(resp.status_code, resp.text[:200])
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {exc}") from exc
        labels = body.get("labels") if isinstance(body, dict) else None
        if (not isinstance(labels, list) or len(labels) != chunk.shape[0]
                or not all(isinstance(v, int) and not isinstance(v, bool)
                           for v in labels)):
            raise ProtocolError(
                f"expected {chunk.shape[0]} integer labels, got {labels!r:.200}"
            )
        return list(labels)


def image_cache_key(image: np.ndarray) -> bytes:
    """Digest of the image's 32-bit wire bytes; bit-level differences separate."""
    return hashlib.sha256(to_f32_bytes(image)).digest()


class CachedClassifier(ClassifierHandle):
    """Wraps a handle with a content-addressed label cache.

    Semantics are identical to the inner handle (which must be pure); repeated
    bit-identical images cost zero inner queries. Reads are lock-free on the
    GIL-protected dict; writes are serialized.
    """

    def __init__(self, inner: ClassifierHandle):
        self.inner = inner
        self.name = inner.name
        self.input_shape = inner.input_shape
        self.n_classes = inner.n_classes
        self._cache: dict = {}
        self._lock = threading.Lock()
        self.images_seen = 0
        self.cache_hits = 0
        self.inner_images = 0

    def classify_batch(self, images) -> List[int]:
        batch = self._as_batch(images)
        keys = [image_cache_key(img) for img in batch]
        labels: List[Optional[int]] = [self._cache.get(key) for key in keys]
        missing: dict = {}
        for pos, (key, label) in enumerate(zip(keys, labels)):
            if label is None and key not in missing:
                missing[key] = pos
        if missing:
            order = list(missing.values())
            fresh = self.inner.classify_batch(batch[order])
            with self._lock:
                for key, label in zip(missing.keys(), fresh):
                    self._cache[key] = int(label)
            labels = [self._cache[key] for key in keys]
        with self._lock:
            self.images_seen += len(keys)
            self.inner_images += len(missing)
            self.cache_hits += len(keys) - len(missing)
        return [int(v) for v in labels]


def cached(handle: ClassifierHandle) -> CachedClassifier:
    """Wrap with a label cache (idempotent)."""
    if isinstance(handle, CachedClassifier):
        return handle
    return CachedClassifier(handle)


def parse_classifier_spec(spec: str, input_shape: Tuple[int, int, int] = (3, 32, 32),
                          n_classes: int = 10, timeout: float = DEFAULT_TIMEOUT,
                          batch_limit: int = DEFAULT_BATCH_LIMIT,
                          url_override: Optional[str] = None) -> ClassifierHandle:
    """Turn a spec string into a handle.

    Forms: "builtin:SEED" for the bundled toy CNN; "remote:URL", or a raw
    http(s) URL, for the HTTP client. `url_override` (from the environment)
    replaces any remote URL.
    """
    spec = spec.strip()
    if spec.startswith("builtin:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad builtin classifier seed in {spec!r}")
        return ToyCnnClassifier(seed, input_shape, n_classes)
    if spec.startswith("remote:") or spec.startswith(("http://", "https://")):
        url = spec.split(":", 1)[1] if spec.startswith("remote:") else spec
        url = url_override or url
        if not url:
            raise ValueError("remote classifier needs a URL")
        return RemoteClassifier(url, input_shape, n_classes,
                                timeout=timeout, batch_limit=batch_limit)
    raise ValueError(
        f"unknown classifier spec {spec!r}; expected builtin:SEED or remote:URL"
    )
