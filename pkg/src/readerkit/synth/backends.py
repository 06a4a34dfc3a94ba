"""Generation backends: the interface, a mock wrapper, an HTTP client and retries."""

from __future__ import annotations

import json
import logging
import os
import socket
import time
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable
from urllib.error import HTTPError, URLError
from urllib.request import Request, urlopen

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationParams:
    max_output_tokens: int = 4096
    temperature: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@runtime_checkable
class GenerationBackend(Protocol):
    name: str
    deterministic: bool

    def generate(self, system_prompt: str, user_prompt: str, params: GenerationParams) -> str: ...


class BackendError(RuntimeError):
    """One failed generation call; retried by :func:`call_with_retry`."""


class BackendUnavailable(RuntimeError):
    """Too many documents in a row failed; the run is aborted."""


class BackendConfigError(ValueError):
    """The backend cannot be constructed (missing URL, missing credentials...)."""


Handler = Callable[[str, str, GenerationParams], str]


class MockBackend:
    """Backend backed by a Python callable. Useful for tests and offline runs."""

    def __init__(self, handler: Handler, name: str = "mock", deterministic: bool = True):
        self.handler = handler
        self.name = name
        self.deterministic = deterministic

    def generate(self, system_prompt: str, user_prompt: str, params: GenerationParams) -> str:
        out = self.handler(system_prompt, user_prompt, params)
        if not isinstance(out, str):
            raise BackendError(f"{self.name}: handler returned {type(out).__name__}")
        return out

    def __repr__(self) -> str:
        return f"MockBackend({self.name!r})"


class HttpBackend:
    """Chat-completion style endpoint with bearer-token auth.

    The token is read from the environment when the backend is built, so a
    missing credential fails before any request is made.
    """

    deterministic = False

    def __init__(self, url: str, model: str, token_env: str = "READERKIT_API_KEY",
                 timeout: float = 120.0, name: str | None = None):
        if not url:
            raise BackendConfigError("backend URL is not configured")
        token = os.environ.get(token_env)
        if not token:
            raise BackendConfigError(f"environment variable {token_env} is not set")
        self.url = url
        self.model = model
        self.timeout = timeout
        self.name = name or model
        self._token = token

    def request_body(self, system_prompt: str, user_prompt: str, params: GenerationParams) -> dict:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
            "max_tokens": params.max_output_tokens,
            "temperature": params.temperature,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        return body

    def generate(self, system_prompt: str, user_prompt: str, params: GenerationParams) -> str:
        data = json.dumps(self.request_body(system_prompt, user_prompt, params)).encode("utf-8")
        req = Request(self.url, data=data, method="POST", headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {self._token}",
        })
        try:
            with urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except HTTPError as exc:
            raise BackendError(f"HTTP {exc.code} from {self.url}") from exc
        except (URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
            raise BackendError(f"request to {self.url} failed: {exc}") from exc
        except ValueError as exc:
            raise BackendError(f"bad JSON from {self.url}") from exc
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("response has no choices[0].message.content") from exc
        if not isinstance(content, str):
            raise BackendError("response content is not a string")
        return content


@dataclass(frozen=True)
class RetryPolicy:
    """First try plus one retry per delay (seconds)."""

    delays: tuple[float, ...] = (1.0, 4.0, 16.0)
    sleep: Callable[[float], None] = time.sleep

    @property
    def max_calls(self) -> int:
        return len(self.delays) + 1


NO_WAIT = RetryPolicy(sleep=lambda _s: None)


def call_with_retry(backend: GenerationBackend, system_prompt: str, user_prompt: str,
                    params: GenerationParams, policy: RetryPolicy = RetryPolicy()) -> tuple[str, int]:
    """Return (output, retries). Empty output counts as a failure.

    Raises the last BackendError once every attempt has failed.
    """
    last: BackendError | None = None
    for attempt in range(policy.max_calls):
        if attempt:
            policy.sleep(policy.delays[attempt - 1])
        try:
            out = backend.generate(system_prompt, user_prompt, params)
        except BackendError as exc:
            last = exc
            log.info("%s: attempt %d failed: %s", backend.name, attempt + 1, exc)
            continue
        if out.strip():
            return out, attempt
        last = BackendError(f"{backend.name}: empty output")
    assert last is not None
    raise last
