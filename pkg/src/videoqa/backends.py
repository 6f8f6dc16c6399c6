"""Model backends: chat, caption, and embedding calls behind one interface.

Three implementations: a remote JSON-over-HTTP adapter (chat-completion and
embedding wire shapes), a deterministic scripted mock for offline runs and
tests, and a caching wrapper keyed on the canonical payload rendering.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import requests

from .errors import (
    AuthError,
    BackendError,
    BackendTimeout,
    CapabilityMismatchError,
    ConfigError,
    InputError,
    MalformedResponseError,
    MockScriptError,
    TransportError,
)

logger = logging.getLogger(__name__)

CAPABILITIES = ("chat", "caption", "embed")

MAX_RETRIES = 2
BACKOFF_BASE_S = 1.0


@dataclass(frozen=True)
class BackendRequest:
    """One model call. The payload shape depends on the capability:

    chat    {"messages": [{"role", "content"}, ...]}
    caption {"image": <reference string>, "prompt": <text>}
    embed   {"text": <text>} or {"image": <reference string>}
    """

    capability: str
    payload: dict
    request_id: str = ""

    def __post_init__(self) -> None:
        if self.capability not in CAPABILITIES:
            raise ValueError(f"unknown capability: {self.capability}")


def chat_request(prompt: str, request_id: str = "") -> BackendRequest:
    return BackendRequest(
        "chat", {"messages": [{"role": "user", "content": prompt}]}, request_id
    )


def caption_request(image_ref: str, prompt: str, request_id: str = "") -> BackendRequest:
    return BackendRequest("caption", {"image": image_ref, "prompt": prompt}, request_id)


def embed_request(text: str | None = None, image_ref: str | None = None,
                  request_id: str = "") -> BackendRequest:
    if (text is None) == (image_ref is None):
        raise ValueError("embed request needs exactly one of text or image_ref")
    payload = {"text": text} if text is not None else {"image": image_ref}
    return BackendRequest("embed", payload, request_id)


def render_payload(request: BackendRequest) -> str:
    """Canonical string for mock matching and cache keys.

    Deterministic across runs; excludes request_id so logically identical
    requests render identically.
    """
    body = json.dumps(request.payload, sort_keys=True, ensure_ascii=False,
                      separators=(",", ":"))
    return f"{request.capability}:{body}"


def payload_hash(request: BackendRequest) -> str:
    return hashlib.sha256(render_payload(request).encode("utf-8")).hexdigest()


@dataclass
class CallRecord:
    capability: str
    rendered: str
    response: Any
    latency_s: float
    retries: int = 0
    error: str | None = None


class Backend:
    """Shared call-log plumbing and the per-backend in-flight cap;
    subclasses implement _call()."""

    def __init__(self, max_inflight: int = 8) -> None:
        self.call_log: list[CallRecord] = []
        self._log_lock = threading.Lock()
        self._inflight = threading.BoundedSemaphore(max(1, max_inflight))

    def call(self, request: BackendRequest) -> Any:
        rendered = render_payload(request)
        start = time.monotonic()
        try:
            with self._inflight:
                response, retries = self._call(request, rendered)
        except BackendError as exc:
            self._record(CallRecord(request.capability, rendered, None,
                                    time.monotonic() - start, error=str(exc)))
            raise
        self._record(CallRecord(request.capability, rendered, response,
                                time.monotonic() - start, retries=retries))
        return response

    def _record(self, record: CallRecord) -> None:
        with self._log_lock:
            self.call_log.append(record)

    def _call(self, request: BackendRequest, rendered: str) -> tuple[Any, int]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Scripted mock
# ---------------------------------------------------------------------------

_ERROR_KINDS = {
    "transport": TransportError,
    "timeout": BackendTimeout,
    "auth": AuthError,
    "malformed": MalformedResponseError,
}


@dataclass
class MockRule:
    """First matching rule wins. `match` is a substring, or a regex when
    `regex` is true. A rule with `error` set raises that failure kind."""

    match: str
    response: Any = None
    regex: bool = False
    error: str | None = None

    def matches(self, rendered: str) -> bool:
        if self.regex:
            return re.search(self.match, rendered) is not None
        return self.match in rendered


class MockScript:
    """Ordered canned responses plus a shared call log.

    `default_response` may be a literal or a callable on the rendered
    payload (callables are for in-code tests; script files hold literals).
    """

    def __init__(self, rules: list[MockRule] | None = None,
                 default_response: Any = None):
        self.rules = list(rules or [])
        self.default_response = default_response
        self.call_log: list[CallRecord] = []

    def add(self, match: str, response: Any = None, *, regex: bool = False,
            error: str | None = None) -> "MockScript":
        self.rules.append(MockRule(match, response, regex=regex, error=error))
        return self

    def lookup(self, rendered: str) -> MockRule | None:
        for rule in self.rules:
            if rule.matches(rendered):
                return rule
        return None

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        p = Path(path)
        if not p.exists():
            raise InputError(f"mock script not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"mock script is not valid JSON: {exc}") from exc
        if isinstance(doc, dict):
            rules_doc = doc.get("rules", [])
            default = doc.get("default_response")
        elif isinstance(doc, list):
            rules_doc, default = doc, None
        else:
            raise ConfigError("mock script must be a JSON list or object")
        rules = []
        for i, item in enumerate(rules_doc):
            if not isinstance(item, dict) or "match" not in item:
                raise ConfigError(f"mock rule {i} must be an object with a 'match' key")
            rules.append(MockRule(
                match=item["match"],
                response=item.get("response"),
                regex=bool(item.get("regex", False)),
                error=item.get("error"),
            ))
        return cls(rules, default)


class MockBackend(Backend):
    """Deterministic backend driven by a MockScript."""

    def __init__(self, script: MockScript,
                 capabilities: tuple[str, ...] = CAPABILITIES):
        super().__init__()
        self.script = script
        self.capabilities = tuple(capabilities)
        # Alias the script's log so every call lands there as well.
        self.call_log = script.call_log

    def _call(self, request: BackendRequest, rendered: str) -> tuple[Any, int]:
        if request.capability not in self.capabilities:
            raise CapabilityMismatchError(
                f"mock serves {self.capabilities}, got {request.capability!r}")
        rule = self.script.lookup(rendered)
        if rule is not None:
            if rule.error is not None:
                kind = _ERROR_KINDS.get(rule.error, BackendError)
                raise kind(f"scripted {rule.error} failure")
            response = rule.response
        elif self.script.default_response is not None:
            default = self.script.default_response
            response = default(rendered) if callable(default) else default
        else:
            raise MockScriptError(f"no mock rule matches: {rendered[:200]}")
        return _coerce_response(request.capability, response), 0


def _coerce_response(capability: str, response: Any) -> Any:
    if capability == "embed":
        if isinstance(response, str):
            try:
                response = json.loads(response)
            except json.JSONDecodeError:
                raise MalformedResponseError("embed response is not a vector")
        if not isinstance(response, list) or not all(
                isinstance(x, (int, float)) for x in response):
            raise MalformedResponseError("embed response is not a vector")
        return [float(x) for x in response]
    if not isinstance(response, str):
        raise MalformedResponseError(
            f"{capability} response must be text, got {type(response).__name__}")
    return response


# ---------------------------------------------------------------------------
# Remote HTTP adapter
# ---------------------------------------------------------------------------

class RemoteBackend(Backend):
    """JSON-over-HTTP adapter for chat-completion and embedding endpoints.

    Retries transport failures and 5xx responses up to twice with
    exponential backoff (1 s base). `transport` and `sleep` are injectable
    for tests.
    """

    def __init__(self, endpoints: dict[str, str], api_key_env: str = "VIDEOQA_API_KEY",
                 timeout_s: float = 60.0, max_inflight: int = 8,
                 transport: Callable[..., tuple[int, dict]] | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(max_inflight=max_inflight)
        self.endpoints = dict(endpoints)
        self.api_key = os.environ.get(api_key_env, "")
        self.timeout_s = timeout_s
        self._transport = transport or self._http_post
        self._sleep = sleep

    def _http_post(self, url: str, headers: dict, body: dict,
                   timeout: float) -> tuple[int, dict]:
        try:
            resp = requests.post(url, headers=headers, json=body, timeout=timeout)
        except requests.Timeout as exc:
            raise BackendTimeout(f"request to {url} timed out") from exc
        except requests.RequestException as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc
        try:
            return resp.status_code, resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"non-JSON response from {url}") from exc

    def _call(self, request: BackendRequest, rendered: str) -> tuple[Any, int]:
        url = self.endpoints.get(request.capability)
        if not url:
            raise CapabilityMismatchError(
                f"no endpoint configured for capability {request.capability!r}")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = self._wire_body(request)

        attempt = 0
        while True:
            try:
                status, doc = self._transport(url, headers, body, self.timeout_s)
            except (TransportError, BackendTimeout) as exc:
                if attempt >= MAX_RETRIES:
                    raise
                self._sleep(BACKOFF_BASE_S * (2 ** attempt))
                attempt += 1
                continue
            if status in (401, 403):
                raise AuthError(f"authentication rejected by {url} ({status})")
            if status >= 500:
                if attempt >= MAX_RETRIES:
                    raise TransportError(f"{url} returned {status} after retries")
                self._sleep(BACKOFF_BASE_S * (2 ** attempt))
                attempt += 1
                continue
            if status >= 400:
                raise BackendError(f"{url} returned {status}")
            return self._parse_body(request.capability, doc), attempt

    @staticmethod
    def _wire_body(request: BackendRequest) -> dict:
        if request.capability == "chat":
            return {"messages": request.payload["messages"]}
        if request.capability == "caption":
            # Caption rides the chat wire shape with the image reference inline.
            content = f"[image: {request.payload['image']}]\n{request.payload['prompt']}"
            return {"messages": [{"role": "user", "content": content}]}
        return {"input": request.payload.get("text") or request.payload.get("image")}

    @staticmethod
    def _parse_body(capability: str, doc: dict) -> Any:
        try:
            if capability == "embed":
                vec = doc["data"][0]["embedding"]
                return [float(x) for x in vec]
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(
                f"unexpected {capability} response shape") from exc


# ---------------------------------------------------------------------------
# Response cache
# ---------------------------------------------------------------------------

class CachingBackend(Backend):
    """On-disk response cache. A hit never reaches the inner backend, so
    repeated runs log zero inner calls."""

    def __init__(self, inner: Backend, cache_dir: str | Path):
        super().__init__()
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _cache_path(self, request: BackendRequest) -> Path:
        return self.cache_dir / f"{payload_hash(request)}.json"

    def _call(self, request: BackendRequest, rendered: str) -> tuple[Any, int]:
        path = self._cache_path(request)
        if path.exists():
            doc = json.loads(path.read_text(encoding="utf-8"))
            self.hits += 1
            return doc["response"], 0
        response = self.inner.call(request)
        # unique tmp name: concurrent writers of one key must not interleave
        tmp = path.with_name(f"{path.stem}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps({"response": response}), encoding="utf-8")
        tmp.replace(path)
        self.misses += 1
        return response, 0


# ---------------------------------------------------------------------------
# Suite assembly
# ---------------------------------------------------------------------------

@dataclass
class BackendSuite:
    """The three capability slots used across the pipeline. Slots may share
    one backend object (the CLI's single mock serves all three)."""

    chat: Backend
    caption: Backend
    embed: Backend | None = None

    @classmethod
    def from_mock(cls, script: MockScript) -> "BackendSuite":
        mock = MockBackend(script)
        return cls(chat=mock, caption=mock, embed=mock)

    @classmethod
    def from_config(cls, cfg) -> "BackendSuite":
        endpoints = {}
        if cfg.chat_endpoint:
            endpoints["chat"] = cfg.chat_endpoint
        if cfg.caption_endpoint:
            endpoints["caption"] = cfg.caption_endpoint
        if cfg.embed_endpoint:
            endpoints["embed"] = cfg.embed_endpoint
        if not endpoints:
            raise ConfigError("no backend endpoints configured and no mock script given")
        remote = RemoteBackend(endpoints, api_key_env=cfg.api_key_env,
                               timeout_s=cfg.timeout_s,
                               max_inflight=cfg.max_inflight)
        return cls(chat=remote, caption=remote,
                   embed=remote if "embed" in endpoints else None)

    def cached(self, cache_dir: str | Path) -> "BackendSuite":
        wrapped: dict[int, CachingBackend] = {}

        def wrap(backend: Backend | None) -> Backend | None:
            if backend is None:
                return None
            if id(backend) not in wrapped:
                wrapped[id(backend)] = CachingBackend(backend, cache_dir)
            return wrapped[id(backend)]

        return BackendSuite(chat=wrap(self.chat), caption=wrap(self.caption),
                            embed=wrap(self.embed))
