"""Multimodal request assembly and pluggable chat backends.

Every backend consumes a :class:`ChatPrompt` (interleaved text and image
parts) and returns a :class:`BackendResponse` whose ``raw_text`` is the model
reply verbatim. Three implementations ship: a remote OpenAI-compatible HTTP
endpoint, a deterministic mock, and a record/replay cache that wraps either.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar, Union

import httpx

from .clip_repr import ClipRepresentation, FrameRef, ResizeCache
from .manifest import ProductInfo

log = logging.getLogger(__name__)

API_KEY_ENV = "ADCUT_API_KEY"
API_BASE_ENV = "ADCUT_API_BASE"


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class BackendTimeout(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class BackendRefusal(BackendError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class CacheMiss(BackendError):
    pass


class SampleSkipped(RuntimeError):
    """A training sample could not be augmented; carries the reason."""


# -- prompts -----------------------------------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    path: str
    resolution: tuple[int, int]
    time_s: float
    clip_id: str = ""


Part = Union[TextPart, ImagePart]


@lru_cache(maxsize=4096)
def _file_digest(path: str, mtime_ns: int, size: int) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def file_digest(path: str | Path) -> str:
    st = os.stat(path)
    return _file_digest(str(path), st.st_mtime_ns, st.st_size)


@dataclass(frozen=True)
class ChatPrompt:
    parts: tuple[Part, ...]

    def to_json(self, *, with_paths: bool = True) -> list[dict[str, Any]]:
        out: list[dict[str, Any]] = []
        for part in self.parts:
            if isinstance(part, TextPart):
                out.append({"type": "text", "text": part.text})
            else:
                entry: dict[str, Any] = {
                    "type": "image",
                    "height": part.resolution[0],
                    "width": part.resolution[1],
                    "time_s": part.time_s,
                }
                if with_paths:
                    entry["path"] = part.path
                else:
                    entry["sha256"] = file_digest(part.path)
                out.append(entry)
        return out

    def serialize(self) -> str:
        return canonical_json(self.to_json())

    def key(self) -> str:
        """Content hash: images contribute their bytes, not their location."""
        return hashlib.sha256(canonical_json(self.to_json(with_paths=False)).encode()).hexdigest()

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def load_template(template_id: str) -> str:
    try:
        return resources.files("adcut.templates").joinpath(f"{template_id}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValueError(f"unknown template {template_id!r}") from None


def render_template(template_id: str, **values: str) -> str:
    text = load_template(template_id)
    for key, value in values.items():
        text = text.replace("{" + key + "}", value)
    return text


def product_block(product: ProductInfo) -> str:
    lines = [f"Product: {product.name}"]
    if product.selling_points:
        lines.append("Selling points:")
        lines.extend(f"- {p}" for p in product.selling_points)
    lines.extend(f"{k}: {v}" for k, v in product.extra.items())
    return "\n".join(lines)


# -- requests ----------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationRequest:
    product: ProductInfo
    clips: tuple[tuple[int, ClipRepresentation], ...]
    k: int | None = None
    instruction_template_id: str = "compose_v1"
    seed: int | None = None

    def to_prompt(self) -> ChatPrompt:
        parts: list[Part] = [TextPart(product_block(self.product))]
        for index, rep in self.clips:
            parts.append(TextPart(f"Clip {index}:"))
            parts.append(_image(rep.clip_id, rep.spatial))
            parts.append(TextPart(f"Clip {index} frames:"))
            parts.extend(_image(rep.clip_id, ref) for ref in rep.temporal)
            if rep.supplementary is not None:
                parts.append(TextPart(f"Clip {index} supplementary information: {rep.supplementary}"))
        if self.k is None:
            k_text = "Choose how many clips to use."
        else:
            k_text = f"Use exactly {self.k} clips."
        parts.append(TextPart(render_template(self.instruction_template_id, k_instruction=k_text)))
        return ChatPrompt(tuple(parts))

    def serialize(self) -> str:
        return self.to_prompt().serialize()

    def has_supplementary(self) -> bool:
        return any(rep.supplementary is not None for _, rep in self.clips)


def _image(clip_id: str, ref: FrameRef) -> ImagePart:
    return ImagePart(ref.path, ref.resolution, ref.time_s, clip_id)


def assemble_request(
    product: ProductInfo,
    representations: Sequence[tuple[int, ClipRepresentation]],
    k: int | None = None,
    template: str = "compose_v1",
    seed: int | None = None,
) -> GenerationRequest:
    if not representations:
        raise ValueError("cannot assemble a request with no clips")
    if k is not None and not 1 <= k <= len(representations):
        raise ValueError(f"k must be in 1..{len(representations)}, got {k}")
    load_template(template)
    return GenerationRequest(product, tuple(sorted(representations, key=lambda p: p[0])), k, template, seed)


@dataclass(frozen=True)
class AugmentedInput:
    base: GenerationRequest
    supplementary: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        indices = {i for i, _ in self.base.clips}
        stray = set(self.supplementary) - indices
        if stray:
            raise ValueError(f"supplementary info for clips not in the request: {sorted(stray)}")

    def to_request(self) -> GenerationRequest:
        clips = tuple(
            (i, replace(rep, supplementary=self.supplementary.get(i))) for i, rep in self.base.clips
        )
        return replace(self.base, clips=clips)


# -- backends ----------------------------------------------------------------------


@dataclass(frozen=True)
class BackendResponse:
    raw_text: str
    usage: dict[str, int]
    latency_ms: int
    backend_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw_text": self.raw_text,
            "usage": dict(self.usage),
            "latency_ms": self.latency_ms,
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BackendResponse:
        return cls(data["raw_text"], dict(data.get("usage", {})), int(data.get("latency_ms", 0)), data["backend_id"])


class Backend:
    backend_id = "backend"

    def complete(self, prompt: ChatPrompt) -> BackendResponse:
        raise NotImplementedError


class MockBackend(Backend):
    """Deterministic backend: replies looked up by prompt key, or computed by a responder."""

    def __init__(
        self,
        responses: Mapping[str, str] | None = None,
        responder: Callable[[ChatPrompt], str] | None = None,
        default: str | None = None,
        backend_id: str = "mock",
    ):
        self.responses = dict(responses or {})
        self.responder = responder
        self.default = default
        self.backend_id = backend_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: ChatPrompt) -> BackendResponse:
        with self._lock:
            self.calls += 1
        if self.responses:
            key = prompt.key()
            if key in self.responses:
                return self._reply(self.responses[key])
        if self.responder is not None:
            return self._reply(self.responder(prompt))
        if self.default is not None:
            return self._reply(self.default)
        raise BackendRefusal("mock backend has no scripted reply for this prompt")

    def _reply(self, text: str) -> BackendResponse:
        return BackendResponse(text, {"completion_chars": len(text)}, 0, self.backend_id)


class RemoteBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` endpoint with bounded retries."""

    def __init__(
        self,
        model: str = "gpt-4o",
        base_url: str | None = None,
        api_key: str | None = None,
        timeout_s: float = 120.0,
        max_attempts: int = 3,
        backoff_s: float = 1.0,
        image_cache: ResizeCache | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.model = model
        self.base_url = (base_url or os.environ.get(API_BASE_ENV) or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.image_cache = image_cache or ResizeCache(Path(tempfile.gettempdir()) / "adcut-frames")
        self.sleep = sleep
        self.backend_id = f"remote:{model}"
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def _content(self, prompt: ChatPrompt) -> list[dict[str, Any]]:
        content: list[dict[str, Any]] = []
        for part in prompt.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                ref = FrameRef(part.path, part.time_s, part.resolution)
                data = self.image_cache.get(part.clip_id or "frame", ref).read_bytes()
                url = "data:image/png;base64," + base64.b64encode(data).decode()
                content.append({"type": "image_url", "image_url": {"url": url}})
        return content

    def complete(self, prompt: ChatPrompt) -> BackendResponse:
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": self._content(prompt)}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = f"{self.base_url}/chat/completions"
        last: Exception | None = None
        timed_out = False
        for attempt in range(1, self.max_attempts + 1):
            started = time.monotonic()
            try:
                resp = self._client.post(url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last, timed_out = exc, True
            except httpx.TransportError as exc:
                last, timed_out = exc, False
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last, timed_out = BackendError(f"HTTP {resp.status_code}"), False
                elif resp.status_code >= 400:
                    raise BackendRefusal(f"HTTP {resp.status_code}: {resp.text[:500]}", resp.status_code)
                else:
                    return self._parse(resp, started)
            log.warning("attempt %d/%d to %s failed: %s", attempt, self.max_attempts, url, last)
            if attempt < self.max_attempts:
                self.sleep(self.backoff_s * 2 ** (attempt - 1))
        if timed_out:
            raise BackendTimeout(f"request to {url} timed out after {self.timeout_s}s", self.max_attempts)
        raise TransportError(f"request to {url} failed: {last}", self.max_attempts)

    def _parse(self, resp: httpx.Response, started: float) -> BackendResponse:
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRefusal(f"malformed response body: {exc}", resp.status_code) from None
        if text is None or choice.get("finish_reason") == "content_filter":
            raise BackendRefusal("model refused to answer", resp.status_code)
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, int)}
        return BackendResponse(text, usage, int((time.monotonic() - started) * 1000), self.backend_id)


class ReplayCache(Backend):
    """Record/replay wrapper: one JSON file per prompt key under ``cache_dir``.

    With ``inner=None`` the cache is replay-only and a miss raises :class:`CacheMiss`.
    """

    _locks: dict[str, threading.Lock] = {}
    _locks_guard = threading.Lock()

    def __init__(self, cache_dir: str | Path, inner: Backend | None = None):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.inner = inner
        self.backend_id = inner.backend_id if inner is not None else "replay"
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def _lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def complete(self, prompt: ChatPrompt) -> BackendResponse:
        key = prompt.key()
        path = self._path(key)
        with self._lock(key):
            if path.is_file():
                self.hits += 1
                return BackendResponse.from_dict(json.loads(path.read_text(encoding="utf-8"))["response"])
            self.misses += 1
            if self.inner is None:
                raise CacheMiss(f"no recorded response for prompt {key[:12]}")
            response = self.inner.complete(prompt)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump({"key": key, "response": response.to_dict()}, fh, ensure_ascii=False)
            os.replace(tmp, path)
            return response


class AuditLog(Backend):
    """Writes every request/response pair as JSON under ``log_dir``."""

    def __init__(self, inner: Backend, log_dir: str | Path):
        self.inner = inner
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.backend_id = inner.backend_id

    def complete(self, prompt: ChatPrompt) -> BackendResponse:
        key = prompt.key()
        record: dict[str, Any] = {"key": key, "request": prompt.to_json()}
        try:
            response = self.inner.complete(prompt)
        except BackendError as exc:
            record["error"] = f"{type(exc).__name__}: {exc}"
            raise
        else:
            record["response"] = response.to_dict()
            return response
        finally:
            (self.log_dir / f"{key}.json").write_text(
                json.dumps(record, ensure_ascii=False, indent=2), encoding="utf-8"
            )


# -- dispatch ----------------------------------------------------------------------

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class Outcome:
    value: Any = None
    error: BaseException | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_bounded(fn: Callable[[T], R], items: Iterable[T], concurrency: int = 4) -> list[Outcome]:
    """Apply ``fn`` to each item with at most ``concurrency`` in flight; order preserved."""
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")

    def wrapped(item: T) -> Outcome:
        try:
            return Outcome(fn(item))
        except Exception as exc:  # delivered to the caller per item
            return Outcome(error=exc)

    items = list(items)
    if concurrency == 1 or len(items) <= 1:
        return [wrapped(i) for i in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(wrapped, items))


def generate(request: GenerationRequest, backend: Backend) -> BackendResponse:
    return backend.complete(request.to_prompt())


def augment_with_supplementary(
    request: GenerationRequest,
    scripts: Mapping[int, str],
    rewriter: Backend,
    template: str = "rewrite_v1",
) -> AugmentedInput:
    """Attach a rewritten copy of each clip's ground-truth script as supplementary input.

    Training-data construction only. One rewriter call per clip that has a script.
    """
    supplementary: dict[int, str] = {}
    for index, _ in request.clips:
        script = scripts.get(index)
        if not script:
            continue
        prompt = ChatPrompt((TextPart(render_template(template, script=script)),))
        try:
            reply = rewriter.complete(prompt).raw_text.strip()
        except BackendError as exc:
            raise SampleSkipped(f"rewriter failed on clip {index}: {exc}") from exc
        if not reply:
            raise SampleSkipped(f"rewriter returned an empty rewrite for clip {index}")
        supplementary[index] = reply
    return AugmentedInput(request, supplementary)
