"""Delimiter frame for model outputs.

Rewards and parsers agree on one wire shape: an optional ``<memory>`` section
followed by numbered ``<prediction i>`` sections, nothing else. Strict
parsing backs the format reward; lenient extraction recovers best-effort
fields from malformed replies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence


@dataclass(frozen=True)
class FrameParse:
    memory: Optional[str]
    candidates: tuple[str, ...]
    ok: bool


def frame_output(memory: Optional[str], candidates: Sequence[str]) -> str:
    """Render a well-formed frame (used by mocks and fixtures)."""
    parts = []
    if memory is not None:
        parts.append(f"<memory>{memory}</memory>")
    for i, cand in enumerate(candidates, start=1):
        parts.append(f"<prediction {i}>{cand}</prediction {i}>")
    return "\n".join(parts)


def _strict_pattern(n: int, require_memory: bool) -> re.Pattern:
    memory_part = r"<memory>(.*?)</memory>\s*" if require_memory else ""
    preds = "".join(rf"<prediction {i}>(.*?)</prediction {i}>\s*" for i in range(1, n + 1))
    return re.compile(r"\s*" + memory_part + preds + r"$", re.DOTALL)


_MEMORY_LENIENT = re.compile(r"<memory>(.*?)</memory>", re.DOTALL)
_MEMORY_UNCLOSED = re.compile(r"<memory>(.*?)(?=<prediction \d+>|$)", re.DOTALL)
_PREDICTION_LENIENT = re.compile(r"<prediction (\d+)>(.*?)</prediction \1>", re.DOTALL)


def parse_frame(raw: str, n: int, require_memory: bool = True) -> FrameParse:
    """Parse a framed reply expecting exactly ``n`` prediction sections.

    ``ok`` is True only when the frame is exact: memory section present iff
    required, predictions numbered 1..n in order, and no trailing garbage.
    On failure the fields are filled best-effort from whatever parses.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    match = _strict_pattern(n, require_memory).fullmatch(raw)
    if match:
        groups = match.groups()
        if require_memory:
            memory: Optional[str] = groups[0].strip()
            bodies = groups[1:]
        else:
            memory = None
            bodies = groups
        return FrameParse(memory=memory, candidates=tuple(g.strip() for g in bodies), ok=True)

    mem_match = _MEMORY_LENIENT.search(raw)
    if mem_match:
        memory = mem_match.group(1).strip()
    else:
        unclosed = _MEMORY_UNCLOSED.search(raw)
        memory = unclosed.group(1).strip() if unclosed else None
    candidates = tuple(body.strip() for _num, body in _PREDICTION_LENIENT.findall(raw))
    return FrameParse(memory=memory, candidates=candidates, ok=False)
