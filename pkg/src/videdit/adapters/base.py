"""Endpoints, retry/backoff, rate limiting and the registry."""
from __future__ import annotations

import enum
import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import jsonschema

from .schemas import REQUESTS, RESPONSES


class Capability(str, enum.Enum):
    CAPTION = "caption"
    DETECT_SEGMENT = "detect_segment"
    LOCAL_DESCRIBE = "local_describe"
    DEPTH = "depth"
    IMAGE_EDIT = "image_edit"
    CONTROLLED_VIDEO = "controlled_video"
    I2V = "i2v"
    INPAINT = "inpaint"
    MULTI_SHOT_GENERATE = "multi_shot_generate"
    INSTRUCTION_GENERATE = "instruction_generate"
    JUDGE = "judge"
    EDIT_MODEL_UNDER_TEST = "edit_model_under_test"


class AdapterError(RuntimeError):
    """Base class; non-retryable unless it is a TransientError."""


class RequestError(AdapterError):
    pass


class ResponseError(AdapterError):
    pass


class TransientError(AdapterError):
    pass


class TransportError(AdapterError):
    """Retries exhausted."""

    def __init__(self, msg, attempts: int = 0, last: Optional[BaseException] = None):
        super().__init__(msg)
        self.attempts = attempts
        self.last = last


class PreconditionError(AdapterError):
    pass


@dataclass(frozen=True)
class AdapterEndpoint:
    capability: Capability
    transport: str = "in_process_mock"  # or "http"
    base_url: str = ""
    timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float = 0.0  # requests per second; 0 disables
    backoff: float = 0.05  # first retry delay in seconds, doubled per attempt
    options: dict = field(default_factory=dict)  # mock behavior: seed, script, faults, mode

    def __post_init__(self):
        object.__setattr__(self, "capability", Capability(self.capability))
        if self.transport not in ("in_process_mock", "http"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.transport == "http" and not self.base_url:
            raise ValueError("http endpoint needs base_url")

    @property
    def is_mock(self) -> bool:
        return self.transport == "in_process_mock"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["capability"] = self.capability.value
        return d


class RateLimiter:
    """Token bucket. Callers reserve slots under a lock, so a single caller's requests keep their order."""

    def __init__(self, rate: float, burst: int = 1, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rate
        self.burst = burst
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._next = None

    def acquire(self) -> float:
        if self.rate <= 0:
            return 0.0
        interval = 1.0 / self.rate
        with self._lock:
            now = self.clock()
            if self._next is None:
                self._next = now - (self.burst - 1) * interval
            slot = max(self._next, now - (self.burst - 1) * interval)
            self._next = slot + interval
        wait = slot - now
        if wait > 0:
            self.sleep(wait)
        return max(wait, 0.0)


def validate_request(capability: Capability, request: dict) -> None:
    try:
        jsonschema.validate(request, REQUESTS[Capability(capability).value])
    except jsonschema.ValidationError as exc:
        raise RequestError(f"{Capability(capability).value} request invalid: {exc.message}") from None


def validate_response(capability: Capability, response: dict) -> None:
    try:
        jsonschema.validate(response, RESPONSES[Capability(capability).value])
    except jsonschema.ValidationError as exc:
        raise ResponseError(f"{Capability(capability).value} response invalid: {exc.message}") from None


class Adapter:
    """An endpoint bound to a transport, with validation, rate limiting and retries."""

    def __init__(self, endpoint: AdapterEndpoint, transport, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.transport = transport
        self.sleep = sleep
        self.limiter = RateLimiter(endpoint.rate_limit, sleep=sleep)
        self.attempts_log: list[int] = []

    @property
    def capability(self) -> Capability:
        return self.endpoint.capability

    def call(self, request: dict) -> dict:
        validate_request(self.capability, request)
        ep = self.endpoint
        last = None
        for attempt in range(ep.max_retries + 1):
            self.limiter.acquire()
            try:
                response = self.transport.send(self.capability, request)
            except TransientError as exc:
                last = exc
                if attempt < ep.max_retries:
                    self.sleep(ep.backoff * (2**attempt))
                continue
            validate_response(self.capability, response)
            self.attempts_log.append(attempt + 1)
            return response
        raise TransportError(
            f"{self.capability.value}: gave up after {ep.max_retries + 1} attempts: {last}", ep.max_retries + 1, last
        )


def call(adapter: Adapter, request: dict) -> dict:
    return adapter.call(request)


def load_registry(path) -> dict[Capability, AdapterEndpoint]:
    """JSON object mapping capability name to an endpoint record (without the capability field)."""
    raw = json.loads(Path(path).read_text())
    out = {}
    for name, rec in raw.items():
        cap = Capability(name)
        rec = {k: v for k, v in rec.items() if k != "capability"}
        out[cap] = AdapterEndpoint(capability=cap, **rec)
    return out


def save_registry(registry: dict, path) -> Path:
    path = Path(path)
    data = {cap.value: {k: v for k, v in ep.to_dict().items() if k != "capability"} for cap, ep in registry.items()}
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path
