"""Planning calls: instruction -> dataset-style caption."""
from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .client import DeadlineExceeded, EmptyResponseError, TransportError, timed_complete
from .prompts import render_prompt
from .wordbank import WordBank

log = logging.getLogger(__name__)

_THINK = re.compile(r"<think>.*?</think>", re.S)


@dataclass
class PlannerConfig:
    retries: int = 2
    deadline: float = 120.0  # seconds for the whole call including retries
    timeout: float = 60.0  # per attempt
    backoff: float = 0.5
    parallelism: int = 4


@dataclass
class PlannerExchange:
    instruction: str
    outputs: list[str] = field(default_factory=list)
    latencies: list[float] = field(default_factory=list)


def clean_response(text: str) -> str:
    """Drop reasoning traces and keep the first non-empty line, trimmed."""
    text = _THINK.sub("", text)
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    return ""


def plan(instruction: str, client, bank: WordBank | None = None, config: PlannerConfig | None = None) -> tuple[str, float]:
    """Returns (planned text, latency in seconds of the successful attempt)."""
    config = config or PlannerConfig()
    prompt = render_prompt("planner", bank, instruction=instruction)
    start = time.monotonic()
    last: Exception | None = None
    for attempt in range(config.retries + 1):
        remaining = config.deadline - (time.monotonic() - start)
        if remaining <= 0:
            raise DeadlineExceeded(f"deadline of {config.deadline}s exceeded after {attempt} attempt(s)")
        try:
            raw, latency = timed_complete(client, prompt, min(config.timeout, remaining))
        except TransportError as e:
            last = e
            log.warning("planner attempt %d failed: %s", attempt + 1, e)
            if config.backoff and attempt < config.retries:
                time.sleep(min(config.backoff * 2**attempt, max(0.0, config.deadline - (time.monotonic() - start))))
            continue
        text = clean_response(raw)
        if not text:
            raise EmptyResponseError("planner returned an empty response")
        return text, latency
    raise TransportError(f"planner failed after {config.retries + 1} attempts: {last}")


def plan_many(instructions, client, bank=None, config: PlannerConfig | None = None) -> list[PlannerExchange]:
    """Bounded-parallel planning; results keep input order."""
    config = config or PlannerConfig()
    with ThreadPoolExecutor(max_workers=max(1, config.parallelism)) as pool:
        results = list(pool.map(lambda ins: plan(ins, client, bank, config), instructions))
    return [PlannerExchange(ins, [text], [lat]) for ins, (text, lat) in zip(instructions, results)]
