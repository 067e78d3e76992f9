"""
Mock LLM Router
Deterministic chat-completion endpoint for offline autointerp runs and tests

The explainer gets a fixed hypothesis. The scorer answers from the answer key registered
for its exact user prompt (keyed by sha256), so the whole label-and-score loop runs without a network.
"""
import hashlib
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Literal

from fastapi import APIRouter, FastAPI, Header, HTTPException
from pydantic import BaseModel

from schemas.autointerp import PromptDocument
from services.autointerp_prompts import SCORER_SYSTEM

ScorerMode = Literal["truth", "all_positive", "echo"]


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatRequest(BaseModel):
    model: str
    messages: list[ChatMessage]
    temperature: float = 0.0


def prompt_key(user_prompt: str) -> str:
    return hashlib.sha256(user_prompt.encode("utf-8")).hexdigest()


@dataclass
class MockLlmState:
    hypothesis: str = "Routed tokens share one surface pattern."
    scorer_mode: ScorerMode = "truth"
    token: str | None = None
    # HTTP statuses returned, in order, before any request succeeds
    failures: deque = field(default_factory=deque)
    # scorer replies without a usable verdict list, served before the normal replies
    malformed_replies: int = 0
    answer_keys: dict[str, list[int]] = field(default_factory=dict)
    requests: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def register(self, prompt: PromptDocument, key: list[int]) -> None:
        """Matches the `key_sink` hook of the labeling loop."""
        with self._lock:
            self.answer_keys[prompt_key(prompt.user)] = list(key)


def _completion(model: str, content: str) -> dict:
    return {
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    }


def _scorer_reply(state: MockLlmState, request: ChatRequest) -> str:
    user = next(m.content for m in request.messages if m.role == "user")
    key = state.answer_keys.get(prompt_key(user))
    if key is None:
        raise HTTPException(status_code=400, detail="no answer key registered for this scorer prompt")
    if state.scorer_mode == "all_positive":
        verdicts = [1] * len(key)
    else:
        verdicts = key
    return f"I compared each marked span against the hypothesis.\nExample 1 is listed first.\n{json.dumps(verdicts)}"


def create_mock_router(state: MockLlmState) -> APIRouter:
    router = APIRouter(prefix="/v1", tags=["mock-llm"])

    @router.post("/chat/completions")
    def chat_completions(request: ChatRequest, authorization: str | None = Header(default=None)):
        with state._lock:
            state.requests.append(request.model_dump())
            failure = state.failures.popleft() if state.failures else None
        if state.token is not None and authorization != f"Bearer {state.token}":
            raise HTTPException(status_code=401, detail="invalid token")
        if failure is not None:
            raise HTTPException(status_code=failure, detail="scripted failure")

        system = request.messages[0].content if request.messages and request.messages[0].role == "system" else ""
        if state.scorer_mode == "echo":
            return _completion(request.model, request.messages[-1].content)
        if system != SCORER_SYSTEM:
            return _completion(request.model, f"Most examples agree.\n<hypothesis>{state.hypothesis}</hypothesis>")
        with state._lock:
            malformed = state.malformed_replies > 0
            if malformed:
                state.malformed_replies -= 1
        if malformed:
            return _completion(request.model, "They mostly fit, though a few are unclear.")
        return _completion(request.model, _scorer_reply(state, request))

    return router


def create_mock_app(state: MockLlmState | None = None) -> FastAPI:
    app = FastAPI(title="mock-llm")
    app.include_router(create_mock_router(state or MockLlmState()))
    return app
