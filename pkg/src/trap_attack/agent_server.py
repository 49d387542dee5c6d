"""HTTP service exposing the surrogate agent over the remote-agent JSON contract.

POST /choose {image: base64 PNG, instruction, temperature} -> {text}. The
number of slots and the description are read back from the instruction.
"""

from __future__ import annotations

import base64
import re

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .embedding import Embedder, ToyEmbedder, image_from_png_bytes
from .harness import SEPARATOR, SurrogateArgmaxAgent, split_composite


class AgentRequest(BaseModel):
    image: str = Field(description="base64-encoded PNG composite")
    instruction: str
    temperature: float = 0.0


class AgentResponse(BaseModel):
    text: str


_N = re.compile(r"numbered 1 to (\d+)")
_CAPTION = re.compile(r"description '(.+?)'(?:\.|\s|$)")


def parse_instruction(instruction: str) -> tuple[int, str]:
    """(number of slots, description) from a selection instruction."""
    n = _N.search(instruction)
    cap = _CAPTION.search(instruction)
    if not n or not cap:
        raise ValueError("instruction does not name the slot count and a quoted description")
    return int(n.group(1)), cap.group(1)


def create_app(embedder: Embedder | None = None, seed: int = 0, separator: int = SEPARATOR) -> FastAPI:
    embedder = embedder or ToyEmbedder()
    app = FastAPI(title="surrogate selection agent")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "embedder": embedder.space_id}

    @app.post("/choose", response_model=AgentResponse)
    def choose(req: AgentRequest) -> AgentResponse:
        try:
            n, prompt = parse_instruction(req.instruction)
            image = image_from_png_bytes(base64.b64decode(req.image, validate=True))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        agent = SurrogateArgmaxAgent(embedder, prompt, temperature=req.temperature, seed=seed)
        return AgentResponse(text=agent.choose(split_composite(image, n, separator), req.instruction))

    return app
