"""Bounded first-in-first-summarized memory of tool outputs."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .exceptions import NonMonotonicStep

DIGEST_ID = "<digest>"
ENTRY_TOKEN_BUDGET = 32
DIGEST_TOKEN_BUDGET = 64
CONTEXT_TOKEN_BUDGET = 256


def tokenize(text: str) -> list[str]:
    """Whitespace tokenizer. Swap via :func:`set_tokenizer` for other tokenizations."""
    return text.split()


_tokenizer: Callable[[str], list[str]] = tokenize


def set_tokenizer(fn: Callable[[str], list[str]] | None) -> None:
    global _tokenizer
    _tokenizer = fn or tokenize


def get_tokenizer() -> Callable[[str], list[str]]:
    return _tokenizer


def truncate(text: str, budget: int, *, keep: str = "head") -> str:
    tokens = _tokenizer(text)
    if len(tokens) <= budget:
        return " ".join(tokens)
    kept = tokens[:budget] if keep == "head" else tokens[len(tokens) - budget:]
    return " ".join(kept)


class TemplateSummarizer:
    """Deterministic paraphraser: ``"<Source>: v1 v2 (prob)"`` cut to a token budget."""

    def __init__(self, budget: int = ENTRY_TOKEN_BUDGET):
        self.budget = budget

    def __call__(self, output) -> str:
        fields = output.payload.fields
        values = [str(v) for k, v in fields.items() if k != "prob"]
        if not values:
            return ""
        text = f"{output.source}: " + " ".join(values)
        if "prob" in fields:
            text += f" ({float(fields['prob']):.2f})"
        return truncate(text, self.budget)


def summarize(output, summarizer=None) -> str:
    return (summarizer or TemplateSummarizer())(output)


@dataclass(frozen=True)
class MemoryEntry:
    container_id: str
    summary: str
    step: int
    image_ref: np.ndarray | None = None
    is_digest: bool = False


@dataclass(frozen=True)
class Memory:
    """Immutable value; :meth:`append` returns a new memory.

    Images are held by reference and do not count against the token budget.
    """

    entries: tuple[MemoryEntry, ...] = ()
    capacity: int = 16
    token_budget: int = CONTEXT_TOKEN_BUDGET
    entry_budget: int = ENTRY_TOKEN_BUDGET
    digest_budget: int = DIGEST_TOKEN_BUDGET

    def __post_init__(self):
        if self.capacity < 2:
            raise ValueError("memory capacity must be at least 2")

    def __len__(self):
        return len(self.entries)

    @property
    def last_step(self) -> int:
        return self.entries[-1].step if self.entries else 0

    def append(self, entry: MemoryEntry) -> "Memory":
        return append(self, entry)

    def records(self) -> list[tuple[str, str, int]]:
        return [(e.container_id, e.summary, e.step) for e in self.entries]


def append(memory: Memory, entry: MemoryEntry) -> Memory:
    """Append ``entry``; past capacity the two oldest entries fold into a rolling digest."""
    if memory.entries and entry.step <= memory.last_step:
        raise NonMonotonicStep(entry.step, memory.last_step)
    summary = truncate(entry.summary, memory.entry_budget)
    if summary != entry.summary:
        entry = replace(entry, summary=summary)
    entries = memory.entries + (entry,)
    while len(entries) > memory.capacity:
        old, evicted = entries[0], entries[1]
        text = " ".join(s for s in (old.summary, evicted.summary) if s)
        digest = MemoryEntry(DIGEST_ID, truncate(text, memory.digest_budget, keep="tail"),
                             evicted.step, is_digest=True)
        entries = (digest,) + entries[2:]
    return replace(memory, entries=entries)


def render_context(memory: Memory) -> list[str]:
    """Token sequence of all summaries, oldest first, cut from the front to the budget."""
    tokens: list[str] = []
    for e in memory.entries:
        tokens.extend(_tokenizer(e.summary))
    if len(tokens) > memory.token_budget:
        tokens = tokens[len(tokens) - memory.token_budget:]
    return tokens
