"""Text-generation service clients: HTTP JSON and an offline fixture player."""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from ..errors import AcmoError, DataError

ENDPOINT_ENV = "ACMO_LLM_ENDPOINT"
TOKEN_ENV = "ACMO_LLM_TOKEN"


class PlannerError(AcmoError):
    exit_code = 1


class TransportError(PlannerError):
    pass


class EmptyResponseError(PlannerError):
    pass


class DeadlineExceeded(PlannerError):
    pass


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class TextClient(Protocol):
    def complete(self, prompt: str, timeout: float) -> str: ...


def extract_path(obj, path: str):
    """Follow a dotted path such as ``choices.0.text`` through nested JSON."""
    cur = obj
    for part in path.split(".") if path else []:
        try:
            cur = cur[int(part)] if isinstance(cur, list) else cur[part]
        except (KeyError, IndexError, ValueError, TypeError) as e:
            raise TransportError(f"response has no field at {path!r}") from e
    if not isinstance(cur, str):
        raise TransportError(f"field {path!r} is not text")
    return cur


@dataclass
class HTTPClient:
    """POSTs ``{model, prompt, max_tokens, temperature}`` and reads text at ``response_path``."""

    endpoint: str | None = None
    model: str = "default"
    max_tokens: int = 256
    temperature: float = 0.0
    response_path: str = "choices.0.text"
    token: str | None = None

    def __post_init__(self):
        self.endpoint = self.endpoint or os.environ.get(ENDPOINT_ENV)
        self.token = self.token or os.environ.get(TOKEN_ENV)
        if not self.endpoint:
            raise DataError(f"no service endpoint (set {ENDPOINT_ENV})")

    def request_body(self, prompt: str) -> bytes:
        body = {"model": self.model, "prompt": prompt, "max_tokens": self.max_tokens, "temperature": self.temperature}
        return json.dumps(body).encode("utf-8")

    def complete(self, prompt: str, timeout: float) -> str:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=self.request_body(prompt), headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as e:
            raise TransportError(str(e)) from e
        return extract_path(payload, self.response_path)


@dataclass
class FixtureRecord:
    prompt_digest: str
    response: str
    latency_ms: float


class FixturePlayer:
    """Replays recorded responses keyed by prompt digest.

    Records without a matching digest are served in file order when
    ``sequential`` is set; otherwise an unknown prompt raises.  The recorded
    latency is reported instead of sleeping.
    """

    def __init__(self, records: list[FixtureRecord], sequential: bool = False, default: str | None = None):
        self.records = list(records)
        self.by_digest = {r.prompt_digest: r for r in self.records}
        self.sequential = sequential
        self.default = default
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path, **kw) -> "FixturePlayer":
        records = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(FixtureRecord(d["prompt_digest"], d["response"], float(d["latency_ms"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{n}: bad fixture record") from e
        return cls(records, **kw)

    @classmethod
    def echo(cls, response: str, latency_ms: float = 0.0) -> "FixturePlayer":
        return cls([FixtureRecord("*", response, latency_ms)], sequential=True)

    def _lookup(self, prompt: str) -> FixtureRecord:
        rec = self.by_digest.get(prompt_digest(prompt))
        if rec is None and self.sequential and self.records:
            with self._lock:
                rec = self.records[self._cursor % len(self.records)]
                self._cursor += 1
        if rec is None:
            if self.default is None:
                raise TransportError("no fixture for prompt")
            rec = FixtureRecord("*", self.default, 0.0)
        return rec

    def complete(self, prompt: str, timeout: float) -> str:
        return self._lookup(prompt).response

    def complete_timed(self, prompt: str, timeout: float) -> tuple[str, float]:
        rec = self._lookup(prompt)
        return rec.response, rec.latency_ms / 1000.0


def timed_complete(client, prompt: str, timeout: float) -> tuple[str, float]:
    """(text, latency seconds); clients with recorded latencies report those instead."""
    if hasattr(client, "complete_timed"):
        return client.complete_timed(prompt, timeout)
    t0 = time.perf_counter()
    text = client.complete(prompt, timeout)
    return text, time.perf_counter() - t0
