"""Text generation backends: an offline template engine and a remote chat client."""

from __future__ import annotations

import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import httpx

__all__ = [
    "AuthError",
    "BackendError",
    "GenRequest",
    "MissingSlotError",
    "RemoteBackend",
    "TemplateBackend",
    "generate",
    "template_expand",
]

SlotValue = Union[str, Sequence[str]]

_PLACEHOLDER = re.compile(r"\{(\w+)\}")
_TRANSIENT = {408, 425, 429, 500, 502, 503, 504}


class BackendError(RuntimeError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class AuthError(BackendError):
    pass


class MissingSlotError(KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"no slot value for placeholder {{{self.name}}}"


@dataclass(frozen=True)
class GenRequest:
    system_prompt: str
    user_prompt: str
    max_tokens: int = 64
    temperature: float = 0.0
    seed: int = 0
    slots: Mapping[str, SlotValue] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.max_tokens <= 4096:
            raise ValueError(f"max_tokens must be in (0, 4096], got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def template_expand(template: str, slots: Mapping[str, SlotValue], seed: int = 0) -> str:
    """Substitute ``{name}`` placeholders from ``slots``.

    A slot given as a list of alternatives is resolved by a PRNG seeded with
    ``seed``; choices are drawn in placeholder order.
    """
    rng = random.Random(seed)

    def sub(m):
        name = m.group(1)
        if name not in slots:
            raise MissingSlotError(name)
        value = slots[name]
        if isinstance(value, str):
            return value
        if not value:
            raise MissingSlotError(name)
        return value[rng.randrange(len(value))]

    return _PLACEHOLDER.sub(sub, template)


class TemplateBackend:
    """Deterministic offline stand-in for an LLM.

    With ``templates`` set, each request picks one template with a PRNG seeded
    by ``request.seed`` and expands it with ``request.slots``. Without
    templates the request's user prompt itself is expanded.
    """

    kind = "template"
    max_in_flight = 1

    def __init__(self, templates: Sequence[str] | None = None):
        self.templates = tuple(templates) if templates is not None else None

    def generate(self, req: GenRequest) -> str:
        if not self.templates:
            return template_expand(req.user_prompt, req.slots, req.seed)
        rng = random.Random(req.seed)
        template = self.templates[rng.randrange(len(self.templates))]
        return template_expand(template, req.slots, rng.randrange(2**32))


class RemoteBackend:
    """OpenAI-compatible ``/v1/chat/completions`` client with bounded retries."""

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        api_key: str,
        model: str,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not endpoint:
            raise BackendError("remote backend needs an endpoint URL")
        if not api_key:
            raise AuthError("remote backend needs an API key")
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs):
        env = os.environ if env is None else env
        return cls(
            env.get("TECHEMBED_LLM_ENDPOINT", ""),
            env.get("TECHEMBED_LLM_KEY", ""),
            env.get("TECHEMBED_LLM_MODEL", "default"),
            **kwargs,
        )

    def _url(self):
        if self.endpoint.endswith("/v1/chat/completions"):
            return self.endpoint
        return self.endpoint + "/v1/chat/completions"

    def generate(self, req: GenRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": template_expand(req.user_prompt, req.slots, req.seed)},
            ],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        delay = self.backoff
        last = None
        with self._slots:
            for attempt in range(self.retries + 1):
                if attempt:
                    self._sleep(delay)
                    delay *= 2
                try:
                    resp = self._client.post(self._url(), json=payload)
                except httpx.TransportError as exc:
                    last = BackendError(f"request failed: {exc}")
                    continue
                if resp.status_code in (401, 403):
                    raise AuthError(f"authentication failed (HTTP {resp.status_code})", resp.status_code)
                if resp.status_code in _TRANSIENT:
                    last = BackendError(f"transient HTTP {resp.status_code}", resp.status_code)
                    continue
                if resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise BackendError(f"malformed completion response: {exc!r}", resp.status_code) from None
        raise last

    def close(self):
        self._client.close()


def generate(backend, req: GenRequest) -> str:
    return backend.generate(req)
