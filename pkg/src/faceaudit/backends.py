"""Pluggable prediction backends with caching and rate limiting.

A backend is anything with a `descriptor` and a `raw_predict(image_bytes)`
method returning a Prediction.  Remote adapters parse vendor-shaped JSON via
an injected transport callable; the local backend wraps a model checkpoint.
Predictions are cached on disk keyed by (image content hash, backend
name+version, task), so re-running an audit over an unchanged corpus issues
zero remote requests.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import AuthError, TransportError

TASK_GENDER = "Gender"
TASK_COUNTRY = "Country"


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    kind: str  # "Remote" | "Local"
    task: str = TASK_GENDER
    rate_limit: Optional[float] = None  # requests/second, required for Remote
    version: str = "1"

    def __post_init__(self):
        if self.kind not in ("Remote", "Local"):
            raise ValueError(f"kind must be Remote or Local: {self.kind}")
        if self.kind == "Remote" and not (self.rate_limit and self.rate_limit > 0):
            raise ValueError("Remote backends require rate_limit > 0")

    @property
    def cache_name(self) -> str:
        return f"{self.name}-{self.version}-{self.task}"


@dataclass
class Prediction:
    """One backend response: a label, or a typed failure, never both."""

    label: Optional[str] = None
    confidence: Optional[float] = None
    latency_ms: float = 0.0
    source: str = ""
    error: Optional[str] = None  # "face_not_found" | "transport" | "auth"

    def __post_init__(self):
        if (self.label is None) == (self.error is None):
            raise ValueError("exactly one of label/error must be set")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0, 1]: {self.confidence}")

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "latency_ms": self.latency_ms,
            "source": self.source,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Prediction":
        return cls(**d)


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class PredictionCache:
    """Append-only on-disk store: <cache>/<backend>/<hash>.json.

    The backend path component folds in name, version and task, so bumping a
    backend version misses cleanly.  Existing entries are never overwritten.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _path(self, key: str, descriptor: BackendDescriptor) -> Path:
        return self.root / descriptor.cache_name / f"{key}.json"

    def lookup(self, key: str, descriptor: BackendDescriptor) -> Optional[Prediction]:
        path = self._path(key, descriptor)
        if not path.is_file():
            return None
        return Prediction.from_dict(json.loads(path.read_text()))

    def store(self, key: str, descriptor: BackendDescriptor, pred: Prediction) -> None:
        path = self._path(key, descriptor)
        with self._lock:
            if path.is_file():
                return  # append-only: first write wins
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(pred.to_dict()))
            tmp.replace(path)


class RateLimiter:
    """Token bucket: at most rate*window requests in any sliding window.

    Clock and sleep are injectable so tests can drive a fake clock.
    """

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._next_free = None

    def acquire(self) -> float:
        """Block until a request slot is available; returns the grant time."""
        interval = 1.0 / self.rate
        while True:
            with self._lock:
                now = self.clock()
                if self._next_free is None or self._next_free <= now:
                    self._next_free = now + interval
                    return now
                wait = self._next_free - now
                self._next_free += interval
                grant = self._next_free - interval
            self.sleep(wait)
            return grant


# -- backends ------------------------------------------------------------

class Backend:
    """Interface: descriptor attribute + raw_predict(image_bytes) -> Prediction."""

    descriptor: BackendDescriptor

    def raw_predict(self, image_bytes: bytes) -> Prediction:
        raise NotImplementedError


class LocalModelBackend(Backend):
    """Runs the numpy classifier on normalized face crops."""

    def __init__(self, checkpoint, name: str = "local-cnn", version: str = "1"):
        from .model import forward  # local import avoids cycle at module load

        self._forward = forward
        self.checkpoint = checkpoint
        task = TASK_GENDER if checkpoint.config.classes == 2 else TASK_COUNTRY
        if tuple(checkpoint.config.class_names) == ("Male", "Female"):
            task = TASK_GENDER
        self.descriptor = BackendDescriptor(
            name=name, kind="Local", task=task, version=version
        )

    def raw_predict(self, image_bytes: bytes) -> Prediction:
        import io

        from PIL import Image

        start = time.monotonic()
        img = np.asarray(Image.open(io.BytesIO(image_bytes)).convert("RGB"))
        probs = self._forward(self.checkpoint, img)
        idx = int(np.argmax(probs))
        return Prediction(
            label=self.checkpoint.config.class_names[idx],
            confidence=float(probs[idx]),
            latency_ms=(time.monotonic() - start) * 1e3,
            source=self.descriptor.name,
        )


# Transport: callable(endpoint: str, payload: dict) -> (status_code, body dict).
Transport = Callable[[str, dict], tuple]


def _env_credential(var: str) -> str:
    value = os.environ.get(var)
    if not value:
        raise AuthError(f"credential environment variable {var} is not set")
    return value


class RemoteAdapter(Backend):
    """Base for vendor-shaped HTTP JSON adapters.

    Subclasses define the endpoint, credential env vars, and response
    parsing.  The transport is injected; fixtures stand in for vendors in
    tests, and a real HTTP transport can be supplied in deployment.
    """

    endpoint = ""
    credential_vars: tuple = ()

    def __init__(self, transport: Transport, rate_limit: float = 5.0,
                 version: str = "1"):
        self.transport = transport
        self.descriptor = BackendDescriptor(
            name=self.adapter_name, kind="Remote", task=TASK_GENDER,
            rate_limit=rate_limit, version=version,
        )

    adapter_name = "remote"

    def credentials(self) -> dict:
        return {var: _env_credential(var) for var in self.credential_vars}

    def build_payload(self, image_bytes: bytes) -> dict:
        raise NotImplementedError

    def parse_response(self, body: dict) -> Prediction:
        raise NotImplementedError

    def raw_predict(self, image_bytes: bytes) -> Prediction:
        self.credentials()  # fail fast on missing credentials
        start = time.monotonic()
        try:
            status, body = self.transport(self.endpoint, self.build_payload(image_bytes))
        except Exception as exc:
            raise TransportError(str(exc)) from exc
        latency = (time.monotonic() - start) * 1e3
        if status in (401, 403):
            raise AuthError(f"{self.adapter_name}: HTTP {status}")
        if status != 200:
            raise TransportError(f"{self.adapter_name}: HTTP {status}")
        pred = self.parse_response(body)
        pred.latency_ms = latency
        pred.source = self.descriptor.name
        return pred


class AwsShapedAdapter(RemoteAdapter):
    """Adapter for a DetectFaces-style API (FaceDetails/Gender/Value shape)."""

    adapter_name = "aws-rekognition"
    endpoint = "/detect-faces"
    credential_vars = ("FACEAUDIT_AWS_ACCESS_KEY", "FACEAUDIT_AWS_SECRET_KEY")

    def build_payload(self, image_bytes: bytes) -> dict:
        import base64

        return {"Image": {"Bytes": base64.b64encode(image_bytes).decode()},
                "Attributes": ["GENDER"]}

    def parse_response(self, body: dict) -> Prediction:
        details = body.get("FaceDetails") or []
        if not details:
            return Prediction(error="face_not_found")
        gender = details[0]["Gender"]
        return Prediction(label=gender["Value"],
                          confidence=gender.get("Confidence", 100.0) / 100.0)


class AzureShapedAdapter(RemoteAdapter):
    """Adapter for a Face-API-style service (faceAttributes.gender shape)."""

    adapter_name = "azure-face"
    endpoint = "/face/detect"
    credential_vars = ("FACEAUDIT_AZURE_KEY",)

    def build_payload(self, image_bytes: bytes) -> dict:
        import base64

        return {"image": base64.b64encode(image_bytes).decode(),
                "returnFaceAttributes": "gender"}

    def parse_response(self, body: dict) -> Prediction:
        faces = body.get("faces") or body.get("value") or []
        if not faces:
            return Prediction(error="face_not_found")
        gender = faces[0]["faceAttributes"]["gender"]
        return Prediction(label=gender.capitalize())


class FacePlusPlusShapedAdapter(RemoteAdapter):
    """Adapter for a Face++-style detect API (faces/attributes/gender shape)."""

    adapter_name = "facepp"
    endpoint = "/facepp/v3/detect"
    credential_vars = ("FACEAUDIT_FPP_KEY", "FACEAUDIT_FPP_SECRET")

    def build_payload(self, image_bytes: bytes) -> dict:
        import base64

        return {"image_base64": base64.b64encode(image_bytes).decode(),
                "return_attributes": "gender"}

    def parse_response(self, body: dict) -> Prediction:
        faces = body.get("faces") or []
        if not faces:
            return Prediction(error="face_not_found")
        return Prediction(label=faces[0]["attributes"]["gender"]["value"])


# -- prediction driver ---------------------------------------------------

RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.5


@dataclass
class PredictOptions:
    cache: Optional[PredictionCache] = None
    rate_limiter: Optional[RateLimiter] = None
    sleep: Callable[[float], None] = time.sleep
    log: Optional[list] = None  # call log entries appended here when provided


def _read_bytes(image_ref) -> bytes:
    try:
        return Path(image_ref).read_bytes()
    except OSError as exc:
        raise TransportError(f"cannot read {image_ref}: {exc}") from exc


def predict(backend: Backend, image_ref, options: Optional[PredictOptions] = None) -> Prediction:
    """Predict one image through the cache/rate-limit/retry pipeline.

    Transport errors retry with exponential backoff; auth errors fail fast.
    Every call, hit or miss, is logged with the image content hash.
    """
    options = options or PredictOptions()
    data = _read_bytes(image_ref)
    key = content_hash(data)
    desc = backend.descriptor

    if options.cache is not None:
        hit = options.cache.lookup(key, desc)
        if hit is not None:
            if options.log is not None:
                options.log.append({"hash": key, "backend": desc.cache_name,
                                    "cache": "hit"})
            return hit

    last_exc = None
    for attempt in range(RETRY_ATTEMPTS):
        if options.rate_limiter is not None:
            options.rate_limiter.acquire()
        try:
            pred = backend.raw_predict(data)
            break
        except AuthError:
            raise
        except TransportError as exc:
            last_exc = exc
            if attempt < RETRY_ATTEMPTS - 1:
                options.sleep(RETRY_BASE_DELAY * 2 ** attempt)
    else:
        raise last_exc

    if options.log is not None:
        options.log.append({"hash": key, "backend": desc.cache_name,
                            "cache": "miss"})
    if options.cache is not None:
        options.cache.store(key, desc, pred)
    return pred


def predict_batch(backend: Backend, image_refs,
                  options: Optional[PredictOptions] = None,
                  max_workers: int = 4) -> list:
    """Bounded-parallel fan-out preserving input order.

    Per-item failures become error Predictions; the batch never aborts.
    """
    options = options or PredictOptions()
    refs = list(image_refs)
    results = [None] * len(refs)

    def one(i_ref):
        i, ref = i_ref
        try:
            return i, predict(backend, ref, options)
        except AuthError:
            raise
        except TransportError as exc:
            return i, Prediction(error="transport", source=backend.descriptor.name,
                                 confidence=None)

    if not refs:
        return []
    with ThreadPoolExecutor(max_workers=max_workers) as ex:
        for i, pred in ex.map(one, enumerate(refs)):
            results[i] = pred
    return results


# -- test/audit doubles --------------------------------------------------

class StubBackend(Backend):
    """Deterministic local stub answering from a fixed mapping or constant.

    `answer` may be a label string applied to every image, or a callable
    mapping image bytes -> Prediction.
    """

    def __init__(self, answer, name: str = "stub", task: str = TASK_GENDER,
                 version: str = "1"):
        self.answer = answer
        self.calls = 0
        self.descriptor = BackendDescriptor(name=name, kind="Local", task=task,
                                            version=version)

    def raw_predict(self, image_bytes: bytes) -> Prediction:
        self.calls += 1
        if callable(self.answer):
            return self.answer(image_bytes)
        return Prediction(label=self.answer, source=self.descriptor.name)
