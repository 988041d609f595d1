"""Local scripted annotator endpoint for offline development and tests.

Replies come from a scripted queue first (status codes, delays, texts), then
rotate through a canned reply pool. Both provider request schemas are served.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Any, List, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

logger = logging.getLogger(__name__)

DEFAULT_REPLIES: list[str] = [
    "1: 2 images carry a watermark\n2: 0 images are user generated\n3: No\n4: 2 images match\n5: Yes",
    "1: 0 images carry a watermark\n2: 2 images are user generated\n3: Yes, it is personal\n4: 2 images match\n5: No",
    "1: none\n2: 1 image is user generated\n3: No\n4: 1 image matches\n5: Yes",
    "1: I cannot tell\n2: 2\n3: No\n4: 2\n5: I am not sure",
]


class ScriptedReply(BaseModel):
    status: int = 200
    text: Optional[str] = None  # falls back to the rotating pool
    delay: float = 0.0  # seconds before answering


def create_app(replies: Optional[List[str]] = None, script: Optional[List[ScriptedReply]] = None) -> FastAPI:
    app = FastAPI(title="AgentPS mock annotator")
    pool = list(replies or DEFAULT_REPLIES)
    queue = list(script or [])
    lock = asyncio.Lock()
    app.state.requests = []  # request bodies, in arrival order
    counter = 0

    async def next_reply(body: dict[str, Any]) -> tuple[int, str]:
        nonlocal counter
        async with lock:
            app.state.requests.append(body)
            step = queue.pop(0) if queue else ScriptedReply()
            text = step.text
            if text is None:
                text = pool[counter % len(pool)]
                counter += 1
        if step.delay:
            await asyncio.sleep(step.delay)
        return step.status, text

    @app.post("/annotate")
    async def annotate(request: Request) -> JSONResponse:
        status, text = await next_reply(await request.json())
        if status != 200:
            return JSONResponse({"error": text}, status_code=status)
        return JSONResponse({"text": text})

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request) -> JSONResponse:
        status, text = await next_reply(await request.json())
        if status != 200:
            return JSONResponse({"error": {"message": text}}, status_code=status)
        return JSONResponse({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]})

    @app.get("/status")
    async def status() -> dict[str, int]:
        return {"requests": len(app.state.requests), "scripted_left": len(queue)}

    return app


def serve(host: str = "127.0.0.1", port: int = 8000, replies: Optional[List[str]] = None) -> None:
    import uvicorn

    logger.info("Serving mock annotator on http://%s:%d/annotate", host, port)
    uvicorn.run(create_app(replies), host=host, port=port, log_level="warning")
