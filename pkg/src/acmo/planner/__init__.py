"""LLM planner: word bank, prompts, service clients and judge protocol."""
from .client import (
    DeadlineExceeded,
    EmptyResponseError,
    FixturePlayer,
    FixtureRecord,
    HTTPClient,
    PlannerError,
    TransportError,
    prompt_digest,
)
from .judge import (
    JudgeVerdict,
    NoJsonError,
    PlannerScores,
    SchemaError,
    average_response_time,
    judge_ps,
    judge_rcs,
    parse_verdict,
    render_verdict,
)
from .plan import PlannerConfig, PlannerExchange, clean_response, plan, plan_many
from .prompts import render_prompt
from .wordbank import WordBank, build_word_bank, load_stop_words, tokenize

__all__ = [name for name in dir() if not name.startswith("_")]
