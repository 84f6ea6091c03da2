"""Shared fixtures: tiny conversations and scripted backends."""

from __future__ import annotations

import pytest

from nextquery.conversation import Conversation, Turn, synthesize_conversations
from nextquery.frames import frame_output
from nextquery.gateway import ScriptRule, scripted_client


@pytest.fixture
def small_conv() -> Conversation:
    return Conversation(
        id="c-1",
        turns=(
            Turn("how do i start a garden", "pick a sunny spot and loosen the soil"),
            Turn("which vegetables grow fastest", "radishes and lettuce mature quickly"),
            Turn("do radishes need fertilizer", "a light compost layer is enough"),
        ),
        target="when should i harvest radishes",
        source="synthetic",
    )


@pytest.fixture
def synthetic_batch() -> list[Conversation]:
    return synthesize_conversations(n=5, turns=6, seed=11)


def framed_backend(n_candidates: int = 3, memory_words: int = 40):
    """Scripted client that answers every prompt with a well-formed frame."""
    memory = " ".join(f"fact{i}" for i in range(memory_words))
    candidates = [f"predicted query {i}" for i in range(1, n_candidates + 1)]
    rules = [
        ScriptRule(match="Summarize the conversation", reply="a compact running summary"),
        ScriptRule(match="<memory>", reply=frame_output(memory, candidates)),
        ScriptRule(reply=frame_output(None, candidates)),
    ]
    return scripted_client(rules)


def judge_backend(reply: str = "4") -> object:
    return scripted_client([ScriptRule(reply=reply)])
