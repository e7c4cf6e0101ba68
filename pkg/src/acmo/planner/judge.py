"""Judge verdict parsing and the RCS / PS / ART scoring protocol."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

from ..errors import AcmoError
from .prompts import LABELS, render_prompt
from .wordbank import WordBank

log = logging.getLogger(__name__)


class VerdictError(AcmoError):
    exit_code = 1


class NoJsonError(VerdictError):
    pass


class SchemaError(VerdictError):
    pass


@dataclass
class JudgeVerdict:
    final_result: bool | None = None
    final_explanation: str = ""
    sorted_list: list[str] | None = None
    explanation: dict[str, str] = field(default_factory=dict)


_COMMENT = re.compile(r'("(?:\\.|[^"\\])*")|//[^\n]*')


def _strip_comments(text: str) -> str:
    """Drop ``//`` line comments outside string literals."""
    return _COMMENT.sub(lambda m: m.group(1) or "", text)


def _first_object(raw: str) -> dict:
    text = _strip_comments(raw)
    dec = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = dec.raw_decode(text, pos)
            if isinstance(obj, dict):
                return obj
        except json.JSONDecodeError:
            pass
        pos = text.find("{", pos + 1)
    raise NoJsonError("no JSON object in judge output")


def parse_verdict(raw: str, labels=None) -> JudgeVerdict:
    """First JSON object in ``raw``: a rule envelope or a ranking."""
    obj = _first_object(raw)
    if "validation_result" in obj:
        env = obj["validation_result"]
        if not isinstance(env, dict):
            raise SchemaError("validation_result must be an object")
        fr = env.get("final_result")
        if fr not in ("True", "False"):
            raise SchemaError(f"final_result must be 'True' or 'False', got {fr!r}")
        return JudgeVerdict(final_result=fr == "True", final_explanation=str(env.get("final_explanation", "")))
    if "sorted_list" in obj:
        sl = obj["sorted_list"]
        expected = sorted(labels) if labels is not None else sorted(LABELS)
        if not isinstance(sl, list) or not all(isinstance(x, str) for x in sl) or sorted(sl) != expected:
            raise SchemaError(f"sorted_list is not a permutation of {expected}")
        expl = obj.get("explanation", {})
        return JudgeVerdict(sorted_list=sl, explanation=expl if isinstance(expl, dict) else {})
    raise SchemaError("neither validation_result nor sorted_list present")


def render_verdict(v: JudgeVerdict) -> str:
    if v.sorted_list is not None:
        return json.dumps({"sorted_list": v.sorted_list, "explanation": v.explanation}, indent=1)
    env = {"final_result": "True" if v.final_result else "False", "final_explanation": v.final_explanation}
    return json.dumps({"validation_result": env}, indent=1)


@dataclass
class PlannerScores:
    rcs: float | None = None
    ps: float | None = None
    art: float | None = None
    skipped: int = 0
    malformed: int = 0


def judge_rcs(outputs: list[str], client, bank: WordBank | None = None, timeout: float = 120.0) -> tuple[float, int]:
    """Rule-consistency rate; malformed verdicts count as failures. Returns (rcs, malformed)."""
    if not outputs:
        raise AcmoError("no outputs to judge")
    passed = malformed = 0
    for out in outputs:
        raw = client.complete(render_prompt("rule_judge", bank, output=out), timeout)
        try:
            v = parse_verdict(raw)
        except VerdictError as e:
            malformed += 1
            log.warning("malformed rule verdict counted as False: %s", e)
            continue
        if v.final_result is None:
            malformed += 1
            log.warning("rule judge returned a ranking; counted as False")
            continue
        passed += int(v.final_result)
    return passed / len(outputs), malformed


def rank_of(label: str, verdict: JudgeVerdict) -> int:
    return verdict.sorted_list.index(label) + 1


def judge_ps(
    items: list[tuple[str, dict[str, str]]],
    label: str,
    client,
    bank: WordBank | None = None,
    timeout: float = 120.0,
) -> tuple[float | None, int]:
    """Mean 1-based rank of ``label`` over ``(instruction, {label: output})`` items.

    Items whose ranking is not a permutation are skipped; returns (ps, skipped).
    """
    ranks = []
    skipped = 0
    for instruction, candidates in items:
        if len(candidates) != 5 or len(set(candidates)) != 5:
            raise AcmoError("ranking needs exactly five uniquely labelled candidates")
        raw = client.complete(render_prompt("rank_judge", bank, instruction=instruction, candidates=candidates), timeout)
        try:
            v = parse_verdict(raw, labels=list(candidates))
            if v.sorted_list is None:
                raise SchemaError("expected a ranking")
        except VerdictError as e:
            skipped += 1
            log.warning("ranking skipped: %s", e)
            continue
        ranks.append(rank_of(label, v))
    ps = sum(ranks) / len(ranks) if ranks else None
    return ps, skipped


def average_response_time(latencies: list[float]) -> float:
    if not latencies:
        raise AcmoError("no latencies")
    return sum(latencies) / len(latencies)
