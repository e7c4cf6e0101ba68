"""Prompt templates for planning, judging and data generation."""
from __future__ import annotations

from importlib import resources

from ..errors import DataError
from .wordbank import WordBank

KINDS = {
    "planner": ("planner.txt", ("instruction",)),
    "rule_judge": ("rule_judge.txt", ("output",)),
    "rank_judge": ("rank_judge.txt", ("instruction", "candidates")),
    "datagen": ("datagen.txt", ()),
}
LABELS = ("A", "B", "C", "D", "E")


def template(kind: str) -> str:
    if kind not in KINDS:
        raise DataError(f"unknown prompt kind {kind!r}")
    return resources.files("acmo.planner").joinpath("data", KINDS[kind][0]).read_text(encoding="utf-8")


def format_candidates(candidates: dict[str, str] | list[str]) -> str:
    if not isinstance(candidates, dict):
        candidates = dict(zip(LABELS, candidates))
    return "\n".join(f"{label}: {text}" for label, text in candidates.items())


def render_prompt(kind: str, bank: WordBank | None = None, **fields) -> str:
    """Fill a template; the bank is serialized as space-separated words."""
    if kind not in KINDS:
        raise DataError(f"unknown prompt kind {kind!r}")
    required = KINDS[kind][1]
    missing = [f for f in required if fields.get(f) is None]
    if missing:
        raise DataError(f"prompt {kind!r} missing fields: {missing}")
    values = {f: fields[f] for f in required}
    if "candidates" in values:
        values["candidates"] = format_candidates(values["candidates"])
    text = template(kind)
    if kind == "datagen":
        return text
    return text.format(bank=bank.serialize() if bank is not None else "", **values)
