"""
LLM Client Service
Chat-completion calls with retry/backoff and an append-only transcript store

Wire format: POST {url} with {"model", "messages", "temperature"}; the reply text is choices[0].message.content.
"""
import json
import logging
import os
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

import httpx

from schemas.autointerp import LlmEndpoint
from .errors import ConfigurationError, EndpointError, ProtocolError

logger = logging.getLogger(__name__)

RETRY_STATUSES = {408, 429, 500, 502, 503, 504}


class TranscriptStore:
    """JSON-lines file; every request/response pair is one line. Safe for concurrent appends."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def auth_headers(endpoint: LlmEndpoint) -> dict[str, str]:
    if endpoint.auth_env is None:
        return {}
    token = os.getenv(endpoint.auth_env)
    if not token:
        raise ConfigurationError(f"environment variable {endpoint.auth_env} is not set")
    return {"Authorization": f"Bearer {token}"}


def request_body(endpoint: LlmEndpoint, messages: list[dict]) -> dict:
    return {"model": endpoint.model, "messages": messages, "temperature": endpoint.temperature}


def _reply_text(data) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise ProtocolError(f"response has no choices[0].message.content: {e!r}") from e
    if not isinstance(content, str):
        raise ProtocolError("message content is not a string")
    return content


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def call_llm(
    endpoint: LlmEndpoint,
    messages: list[dict],
    client: httpx.Client | None = None,
    transcripts: TranscriptStore | None = None,
    tag: str = "",
) -> str:
    """One chat completion. Transport errors and retryable statuses back off exponentially up to max_retries."""
    headers = auth_headers(endpoint)
    body = request_body(endpoint, messages)
    owned = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    last_status: int | None = None
    try:
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                delay = endpoint.backoff * 2 ** (attempt - 1)
                logger.warning(f"[llm] {tag} retry {attempt}/{endpoint.max_retries} after {last_status or 'transport error'}")
                time.sleep(delay)
            started = _now()
            try:
                resp = client.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except httpx.TransportError as e:
                last_status = None
                _record(transcripts, tag, attempt, body, started, status=None, response=None, error=type(e).__name__)
                continue
            last_status = resp.status_code
            if resp.status_code in RETRY_STATUSES:
                _record(transcripts, tag, attempt, body, started, status=resp.status_code, response=resp.text)
                continue
            if resp.status_code >= 400:
                _record(transcripts, tag, attempt, body, started, status=resp.status_code, response=resp.text)
                raise EndpointError(f"endpoint answered HTTP {resp.status_code}", status=resp.status_code)
            try:
                data = resp.json()
            except ValueError as e:
                _record(transcripts, tag, attempt, body, started, status=resp.status_code, response=resp.text)
                raise ProtocolError("endpoint response is not JSON") from e
            _record(transcripts, tag, attempt, body, started, status=resp.status_code, response=data)
            return _reply_text(data)
    finally:
        if owned:
            client.close()
    raise EndpointError(
        f"endpoint failed after {endpoint.max_retries + 1} attempts (last status {last_status})",
        status=last_status,
    )


def _record(transcripts, tag, attempt, body, started, status, response, error=None) -> None:
    if transcripts is None:
        return
    transcripts.append({
        "tag": tag,
        "attempt": attempt,
        "started_at": started,
        "finished_at": _now(),
        "request": body,
        "status": status,
        "response": response,
        "error": error,
    })
