"""Chat-completion HTTP backbone with retry and exponential backoff."""

from __future__ import annotations

import logging
import os
import time
from typing import Optional

import httpx

from ..exceptions import BackendError
from .base import BackboneRequest

logger = logging.getLogger(__name__)

API_KEY_ENV = "COEVO_API_KEY"


class ChatCompletionBackbone:
    """POSTs requests to an OpenAI-compatible ``/chat/completions`` endpoint.

    The persona and injected experience form the system message; the prompt is
    the user message. Transport errors, 429 and 5xx responses are retried
    ``attempts`` times with delays ``backoff * 2**i``; other statuses fail at once.
    """

    def __init__(self, base_url: str, model: str, api_key: Optional[str] = None,
                 timeout: float = 120.0, attempts: int = 3, backoff: float = 1.0,
                 max_tokens: Optional[dict] = None, client: Optional[httpx.Client] = None,
                 sleep=time.sleep):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.attempts = attempts
        self.backoff = backoff
        self.max_tokens = dict(max_tokens or {})
        self._sleep = sleep
        # httpx.Client pools connections and is safe to share across threads
        self._client = client or httpx.Client(timeout=timeout)

    def payload(self, request: BackboneRequest) -> dict:
        system = request.persona
        if request.injected_experience:
            system += "\n\nRelevant experience:\n" + "\n".join(f"- {e}" for e in request.injected_experience)
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": request.prompt},
            ],
            "max_tokens": self.max_tokens.get(request.tag.value, request.max_tokens),
            "temperature": request.temperature,
        }

    def invoke(self, request: BackboneRequest) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = self.payload(request)
        last: Optional[BackendError] = None
        for attempt in range(self.attempts):
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last = BackendError(f"chat completion request failed: {exc}")
            else:
                if resp.status_code == 200:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendError(f"malformed chat completion response: {exc}", status=200) from exc
                    return content or ""
                last = BackendError(f"chat completion returned HTTP {resp.status_code}", status=resp.status_code)
                if resp.status_code != 429 and resp.status_code < 500:
                    raise last
            if attempt + 1 < self.attempts:
                delay = self.backoff * 2 ** attempt
                logger.info("retrying chat completion in %.1fs (%s)", delay, last)
                self._sleep(delay)
        raise last

    def close(self) -> None:
        self._client.close()
