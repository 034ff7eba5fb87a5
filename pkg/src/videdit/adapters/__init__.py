"""Client layer for external model capabilities, with in-process mocks."""
from __future__ import annotations

import copy
import time

from .base import (
    Adapter,
    AdapterEndpoint,
    AdapterError,
    Capability,
    PreconditionError,
    RateLimiter,
    RequestError,
    ResponseError,
    TransientError,
    TransportError,
    call,
    load_registry,
    save_registry,
    validate_request,
    validate_response,
)
from .http import HttpTransport
from .mock import MockTransport, canonical_judge_text


def make_adapter(endpoint: AdapterEndpoint, store=None, sleep=time.sleep) -> Adapter:
    if endpoint.is_mock:
        if store is None:
            raise PreconditionError("mock adapters need an artifact store")
        return Adapter(endpoint, MockTransport(store, endpoint.options), sleep=sleep)
    return Adapter(endpoint, HttpTransport(endpoint.base_url, endpoint.timeout), sleep=sleep)


def default_mock_registry(seed: int = 0, **overrides) -> dict[Capability, AdapterEndpoint]:
    """One mock endpoint per capability; ``overrides`` maps capability name to endpoint fields."""
    reg = {}
    for cap in Capability:
        fields = {"options": {"seed": seed}, "backoff": 0.0}
        extra = copy.deepcopy(overrides.get(cap.value, {}))
        fields["options"].update(extra.pop("options", {}))
        fields.update(extra)
        reg[cap] = AdapterEndpoint(capability=cap, **fields)
    return reg


class AdapterSet:
    """Adapters for every capability bound to one store."""

    def __init__(self, registry: dict, store, sleep=time.sleep):
        self.registry = dict(registry)
        self.store = store
        self.adapters = {cap: make_adapter(ep, store, sleep=sleep) for cap, ep in self.registry.items()}

    def __getitem__(self, cap) -> Adapter:
        return self.adapters[Capability(cap)]

    def call(self, cap, request: dict) -> dict:
        return self[cap].call(request)

    @property
    def uses_http(self) -> bool:
        return any(not ep.is_mock for ep in self.registry.values())


def mock_determinism_check(endpoint: AdapterEndpoint, request: dict, n: int, store) -> bool:
    """True iff ``n`` calls to fresh instances of a mock endpoint give identical responses."""
    if not endpoint.is_mock:
        raise PreconditionError("determinism check applies to mock endpoints only")
    responses = [make_adapter(endpoint, store, sleep=lambda s: None).call(request) for _ in range(n)]
    return all(r == responses[0] for r in responses)


__all__ = [
    "Adapter",
    "AdapterEndpoint",
    "AdapterError",
    "AdapterSet",
    "Capability",
    "HttpTransport",
    "MockTransport",
    "PreconditionError",
    "RateLimiter",
    "RequestError",
    "ResponseError",
    "TransientError",
    "TransportError",
    "call",
    "canonical_judge_text",
    "default_mock_registry",
    "load_registry",
    "make_adapter",
    "mock_determinism_check",
    "save_registry",
    "validate_request",
    "validate_response",
]
