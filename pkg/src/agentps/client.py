from __future__ import annotations

import base64
import io
from typing import Any, Callable, List

import httpx
import numpy as np
from PIL import Image

from .errors import ConfigError


def encode_frame_png(frame: np.ndarray) -> str:
    """8-bit grayscale PNG of one ``[S, S]`` frame in [0, 1], base64 encoded."""
    pixels = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


# ---------------------------------------------------------------------------
# Provider adapters: request body in, reply text out
# ---------------------------------------------------------------------------


def generic_request(prompt: str, images: List[str], model: str) -> dict[str, Any]:
    return {"model": model, "prompt": prompt, "images": images}


def generic_reply(body: Any) -> str:
    return str(body["text"])


def openai_request(prompt: str, images: List[str], model: str) -> dict[str, Any]:
    content: list[dict[str, Any]] = [{"type": "text", "text": prompt}]
    content.extend(
        {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image}"}} for image in images
    )
    return {"model": model, "messages": [{"role": "user", "content": content}], "temperature": 0}


def openai_reply(body: Any) -> str:
    return str(body["choices"][0]["message"]["content"])


ADAPTERS: dict[str, tuple[Callable[[str, List[str], str], dict[str, Any]], Callable[[Any], str]]] = {
    "generic": (generic_request, generic_reply),
    "openai": (openai_request, openai_reply),
}


class AnnotatorClient:
    """Thin wrapper around a shared ``httpx.AsyncClient`` pointed at one MLLM endpoint.

    The HTTP client is created by the caller and injected here so every
    request of a batch reuses one connection pool.
    """

    def __init__(
        self,
        http_client: httpx.AsyncClient,
        url: str,
        api_key: str,
        provider: str = "generic",
        model: str = "gpt-4o",
    ):
        if provider not in ADAPTERS:
            raise ConfigError(f"unknown annotator provider {provider!r}; choose from {sorted(ADAPTERS)}")
        self._client = http_client
        self._url = url
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._model = model
        self._build, self._extract = ADAPTERS[provider]

    # ---------------------------------------------------------------
    # Public API
    # ---------------------------------------------------------------

    async def ask(self, prompt: str, images: List[str]) -> str:
        """Send one session (prompt plus base64 PNG frames) and return the reply text."""

        resp = await self._client.post(
            self._url,
            json=self._build(prompt, images, self._model),
            headers=self._headers,
        )
        resp.raise_for_status()
        try:
            return self._extract(resp.json())
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise httpx.DecodingError(f"unexpected reply body: {exc}", request=resp.request) from exc
