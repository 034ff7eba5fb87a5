"""JSON-over-HTTP transport: POST ``{base_url}/{capability}`` with the request body."""
from __future__ import annotations

import httpx

from .base import Capability, RequestError, ResponseError, TransientError


class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)

    def send(self, capability: Capability, request: dict) -> dict:
        url = f"{self.base_url}/{Capability(capability).value}"
        try:
            resp = self.client.post(url, json=request)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientError(f"{url}: {type(exc).__name__}: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientError(f"{url}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RequestError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise ResponseError(f"{url}: body is not JSON") from exc

    def close(self):
        self.client.close()
