from __future__ import annotations

import asyncio
import logging
import random
from typing import List, Optional

import httpx

from .client import AnnotatorClient

TRANSIENT_STATUS = frozenset({408, 429})


def is_transient(exc: Exception) -> bool:
    """Timeouts, connection problems, 429 and 5xx are worth retrying."""
    if isinstance(exc, httpx.HTTPStatusError):
        status = exc.response.status_code
        return status >= 500 or status in TRANSIENT_STATUS
    return isinstance(exc, (httpx.TimeoutException, httpx.TransportError))


class RequestDispatcher:
    """Send annotation requests with retry/back-off and basic metrics."""

    def __init__(
        self,
        client: AnnotatorClient,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        backoff_max: float = 8.0,
    ):
        self._client = client
        self._max_retries = max_retries
        self._backoff_base = backoff_base
        self._backoff_max = backoff_max

        # Metrics counters
        self.success_count: int = 0
        self.failure_count: int = 0
        self.retry_count: int = 0

        self._log = logging.getLogger(__name__ + ".RequestDispatcher")

    async def send(self, sample_id: str, prompt: str, images: List[str]) -> tuple[Optional[str], Optional[str]]:
        """Return ``(reply_text, None)`` or ``(None, error)``.

        Transient failures are retried with jittered exponential back-off up
        to ``max_retries`` times; anything else fails the sample at once.
        Failures never raise, so one bad sample cannot abort a batch.
        """

        delay = self._backoff_base
        attempts = self._max_retries + 1

        for attempt in range(1, attempts + 1):
            try:
                text = await self._client.ask(prompt, images)
                self.success_count += 1
                return text, None
            except httpx.HTTPError as exc:
                reason = _describe(exc)
                if not is_transient(exc):
                    self.failure_count += 1
                    self._log.error("Permanent failure for sample_id=%s: %s; not retrying.", sample_id, reason)
                    return None, reason

                if attempt >= attempts:
                    self.failure_count += 1
                    self._log.error(
                        "Giving up on sample_id=%s after %d attempts: %s", sample_id, attempts, reason
                    )
                    return None, reason

                self._log.warning(
                    "Transient failure (%s) on attempt %d/%d for sample_id=%s; retrying",
                    reason,
                    attempt,
                    attempts,
                    sample_id,
                )
                jitter_factor = random.uniform(0.8, 1.2)
                await asyncio.sleep(min(delay, self._backoff_max) * jitter_factor)
                self.retry_count += 1
                delay *= 2

        return None, "no attempts made"


def _describe(exc: Exception) -> str:
    if isinstance(exc, httpx.HTTPStatusError):
        return f"HTTP {exc.response.status_code}"
    return f"{type(exc).__name__}: {exc}" if str(exc) else type(exc).__name__
