"""Conversation data model: JSONL ingestion, target extraction, token counting.

A conversation is an ordered list of user/assistant turns plus a held-out
target query (the label a predictor is scored against). All types are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import random
import re
import unicodedata
from dataclasses import dataclass
from typing import IO, Iterable, Protocol, Sequence, Union

SOURCES = frozenset({"wild", "share", "priv", "synthetic"})

_WS_RUN = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Unicode NFC, then collapse whitespace runs to single spaces and strip."""
    return _WS_RUN.sub(" ", unicodedata.normalize("NFC", text)).strip()


@dataclass(frozen=True)
class Turn:
    """One user/assistant exchange. The response may be empty only when the
    turn is the trailing partial exchange of a live conversation."""

    query: str
    response: str = ""

    def __post_init__(self) -> None:
        if not normalize_text(self.query):
            raise ValueError("turn query must be non-empty")


@dataclass(frozen=True)
class Conversation:
    """A complete T-turn context plus the ground-truth next query."""

    id: str
    turns: tuple[Turn, ...]
    target: str
    source: str = "synthetic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError("conversation needs at least one turn")
        if not normalize_text(self.target):
            raise ValueError("conversation target must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}; expected one of {sorted(SOURCES)}")
        # Only the final turn may be a partial exchange.
        for i, turn in enumerate(self.turns[:-1]):
            if not normalize_text(turn.response):
                raise ValueError(f"turn {i + 1} has an empty response but is not the final turn")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "turns": [{"query": t.query, "response": t.response} for t in self.turns],
            "target": self.target,
            "source": self.source,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def split_context_target(
    session_id: str, turns: Sequence[Turn], source: str = "synthetic"
) -> Conversation:
    """Split a raw session that ends with a user query into context + target.

    The final turn's query becomes the prediction target; its response, if
    any, is discarded. Raises ValueError when no complete exchange would
    remain as context.
    """
    if len(turns) < 2:
        raise ValueError(f"insufficient context in session {session_id!r}: need a complete exchange before the trailing query")
    return Conversation(id=session_id, turns=tuple(turns[:-1]), target=turns[-1].query, source=source)


# --- tokenizers -------------------------------------------------------------


class Tokenizer(Protocol):
    """Deterministic token counter. count('') == 0 and counting is monotone
    under concatenation: count(a + b) >= max(count(a), count(b))."""

    name: str

    def count(self, text: str) -> int: ...


class WhitespaceTokenizer:
    """Counts whitespace-delimited words. Backend-free default used wherever
    a model tokenizer has not been plugged in."""

    name = "whitespace"

    def count(self, text: str) -> int:
        return len(text.split())


class BytesTokenizer:
    """Approximates subword counts as ceil(utf-8 bytes / 4)."""

    name = "bytes4"

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


DEFAULT_TOKENIZER = WhitespaceTokenizer()


def count_tokens(tokenizer: Tokenizer, text: str) -> int:
    return tokenizer.count(text)


def truncate_to_tokens(tokenizer: Tokenizer, text: str, limit: int) -> str:
    """Longest prefix of ``text`` whose token count is <= ``limit``.

    Works for any tokenizer whose count is nondecreasing in prefix length
    (guaranteed by the concatenation-monotonicity invariant). The suffix
    beyond the limit is discarded; trailing whitespace is stripped.
    """
    if limit < 0:
        raise ValueError("token limit must be >= 0")
    if tokenizer.count(text) <= limit:
        return text
    lo, hi = 0, len(text)  # invariant: count(text[:lo]) <= limit < count(text[:hi])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tokenizer.count(text[:mid]) <= limit:
            lo = mid
        else:
            hi = mid
    return text[:lo].rstrip()


# --- JSONL ingestion --------------------------------------------------------


@dataclass(frozen=True)
class ParseError:
    line: int
    error: str

    def to_dict(self) -> dict:
        return {"line": self.line, "error": self.error}


@dataclass
class ParseReport:
    """Valid records plus per-line errors; invalid lines are never silently
    dropped. Safe to merge across line-range shards."""

    conversations: list[Conversation]
    errors: list[ParseError]


def _record_to_conversation(obj: dict, allow_unsplit: bool) -> Conversation:
    for field in ("id", "turns"):
        if field not in obj:
            raise ValueError(f"missing required field: {field}")
    if "target" not in obj and not allow_unsplit:
        raise ValueError("missing required field: target")
    raw_turns = obj["turns"]
    if not isinstance(raw_turns, list):
        raise ValueError("field 'turns' must be a list")
    turns = []
    for i, entry in enumerate(raw_turns):
        if not isinstance(entry, dict) or "query" not in entry:
            raise ValueError(f"turn {i + 1}: missing required field: query")
        turns.append(Turn(query=str(entry["query"]), response=str(entry.get("response", ""))))
    source = str(obj.get("source", "synthetic"))
    if "target" in obj:
        return Conversation(id=str(obj["id"]), turns=tuple(turns), target=str(obj["target"]), source=source)
    return split_context_target(str(obj["id"]), turns, source=source)


def parse_conversations(
    stream: Union[IO, Iterable[Union[str, bytes]]],
    allow_unsplit: bool = False,
) -> ParseReport:
    """Parse a JSONL stream of conversation records.

    Each line must be an object with fields id, turns[{query,response}],
    target, and source. With ``allow_unsplit`` a record may omit ``target``,
    in which case the trailing turn's query is split off as the target.
    """
    conversations: list[Conversation] = []
    errors: list[ParseError] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(ParseError(lineno, f"malformed JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            errors.append(ParseError(lineno, "record must be a JSON object"))
            continue
        try:
            conversations.append(_record_to_conversation(obj, allow_unsplit))
        except ValueError as exc:
            errors.append(ParseError(lineno, str(exc)))
    return ParseReport(conversations, errors)


def write_error_report(errors: Sequence[ParseError], fh: IO) -> None:
    for err in errors:
        fh.write(json.dumps(err.to_dict()) + "\n")


# --- synthetic fixtures -----------------------------------------------------

_FILLER = [
    "nutrition", "protein", "recipe", "dataset", "compile", "service", "invoice",
    "garden", "piano", "orbit", "syntax", "lattice", "harbor", "quartz", "meadow", "violet",
]


def synthesize_conversations(
    n: int,
    turns: int,
    query_words: int = 8,
    response_words: int = 24,
    seed: int = 0,
    source: str = "synthetic",
) -> list[Conversation]:
    """Deterministic fixed-shape conversations for benchmarks and tests.

    Every query has exactly ``query_words`` whitespace tokens and every
    response exactly ``response_words``, so ledger expectations have closed
    forms. Each turn starts with a unique ``c<i>t<t>`` marker usable as a
    causality sentinel.
    """
    if query_words < 2 or response_words < 1:
        raise ValueError("need query_words >= 2 and response_words >= 1 to fit turn markers")
    rng = random.Random(seed)
    out = []
    for c in range(n):
        convo_turns = []
        for t in range(1, turns + 1):
            q = [f"c{c}t{t}"] + [rng.choice(_FILLER) for _ in range(query_words - 1)]
            r = [rng.choice(_FILLER) for _ in range(response_words)]
            convo_turns.append(Turn(query=" ".join(q), response=" ".join(r)))
        target = " ".join([f"c{c}target"] + [rng.choice(_FILLER) for _ in range(query_words - 1)])
        out.append(Conversation(id=f"syn-{seed}-{c}", turns=tuple(convo_turns), target=target, source=source))
    return out
