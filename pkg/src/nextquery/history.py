"""History interfaces for next-query prediction.

Five ways to expose a conversation to the predictor: the current turn
alone, the full history, a sliding window, summarize-then-predict, and the
recursive bounded memory. The memory interface carries state between turns
in a single text block truncated to a hard token budget; the raw earlier
turns are never re-read.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .analytics import LedgerRow, TokenLedger
from .assets import load_template
from .conversation import (
    DEFAULT_TOKENIZER,
    Conversation,
    Tokenizer,
    Turn,
    truncate_to_tokens,
)
from .errors import ConfigError
from .frames import parse_frame
from .gateway import ChatExchange, GatewayError, LlmClient

INTERFACE_KINDS = (
    "current_turn",
    "full_history",
    "sliding_window",
    "summarize_then_predict",
    "recursive_memory",
)

DEFAULT_MEMORY_TOKENS = 500
DEFAULT_CANDIDATES = 3
DEFAULT_WINDOW = 3


@dataclass(frozen=True)
class InterfaceSpec:
    kind: str
    w: int = DEFAULT_WINDOW
    k: int = DEFAULT_MEMORY_TOKENS
    n_candidates: int = DEFAULT_CANDIDATES

    def __post_init__(self) -> None:
        if self.kind not in INTERFACE_KINDS:
            raise ConfigError(f"unknown interface kind: {self.kind!r}")
        if self.w < 1:
            raise ConfigError("window size w must be >= 1")
        if self.k < 1:
            raise ConfigError("memory budget k must be >= 1")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")

    @property
    def requires_memory(self) -> bool:
        return self.kind == "recursive_memory"

    @property
    def calls_per_turn(self) -> int:
        return 2 if self.kind == "summarize_then_predict" else 1


@dataclass(frozen=True)
class MemoryState:
    text: str
    token_count: int
    turn_index: int

    def __post_init__(self) -> None:
        if self.turn_index < 0:
            raise ValueError("turn_index must be >= 0")
        if self.turn_index == 0 and self.text != "":
            raise ValueError("memory before any turn must be empty")
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")

    @classmethod
    def initial(cls) -> "MemoryState":
        return cls(text="", token_count=0, turn_index=0)


@dataclass(frozen=True)
class PredictionSet:
    candidates: tuple[str, ...]
    memory: MemoryState
    format_ok: bool


@dataclass(frozen=True)
class PromptPayload:
    system: str
    user: str

    def messages(self) -> list[dict]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user},
        ]


class EpisodeError(RuntimeError):
    """A turn's backend call failed; carries where."""

    def __init__(self, conversation_id: str, turn: int, cause: Exception) -> None:
        super().__init__(f"conversation {conversation_id!r} turn {turn}: {cause}")
        self.conversation_id = conversation_id
        self.turn = turn
        self.cause = cause


def render_turn(turn: Turn) -> str:
    return f"User: {turn.query}\nAssistant: {turn.response}".rstrip()


def render_history(turns: Sequence[Turn]) -> str:
    return "\n\n".join(render_turn(t) for t in turns)


def _system_text(spec: InterfaceSpec, prompt_dir: Optional[Path]) -> str:
    if spec.kind == "recursive_memory":
        return load_template("memory_system", prompt_dir).format(k=spec.k, n=spec.n_candidates)
    if spec.kind == "summarize_then_predict":
        return load_template("summary_system", prompt_dir)
    return load_template("predict_system", prompt_dir).format(n=spec.n_candidates)


def _memory_user_text(memory_text: str, turn: Turn, prompt_dir: Optional[Path]) -> str:
    return load_template("user_memory", prompt_dir).format(
        memory=memory_text, exchange=render_turn(turn)
    )


def build_prompt(
    spec: InterfaceSpec,
    conv: Conversation,
    mem: MemoryState,
    t: int,
    prompt_dir: Optional[Path] = None,
) -> PromptPayload:
    """Assemble the turn-t prompt for an interface. Turns are 1-indexed.

    For summarize_then_predict this is the first of its two calls (the
    summarization pass); the prediction pass comes from
    ``build_summary_prediction_prompt``. The target query never appears.
    """
    if not 1 <= t <= len(conv.turns):
        raise ValueError(f"turn {t} out of range for {len(conv.turns)} turns")
    system = _system_text(spec, prompt_dir)
    turns = conv.turns
    if spec.kind == "current_turn":
        user = load_template("user_current", prompt_dir).format(exchange=render_turn(turns[t - 1]))
    elif spec.kind in ("full_history", "summarize_then_predict"):
        user = load_template("user_history", prompt_dir).format(history=render_history(turns[:t]))
    elif spec.kind == "sliding_window":
        window = turns[max(0, t - spec.w) : t]
        user = load_template("user_history", prompt_dir).format(history=render_history(window))
    else:
        if mem.turn_index != t - 1:
            raise ValueError(f"memory is for turn {mem.turn_index}, prompt wants turn {t}")
        user = _memory_user_text(mem.text, turns[t - 1], prompt_dir)
    return PromptPayload(system=system, user=user)


def build_summary_prediction_prompt(
    spec: InterfaceSpec, summary: str, prompt_dir: Optional[Path] = None
) -> PromptPayload:
    """Second call of summarize_then_predict: predict from the summary verbatim."""
    system = load_template("predict_system", prompt_dir).format(n=spec.n_candidates)
    user = load_template("user_summary_predict", prompt_dir).format(summary=summary)
    return PromptPayload(system=system, user=user)


def prompt_overhead(
    spec: InterfaceSpec,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    prompt_dir: Optional[Path] = None,
) -> int:
    """Token cost of the prompt frame with every content slot left empty.

    Slots sit at whitespace boundaries in the templates, so a filled prompt
    costs at most overhead plus the tokens of what went into the slots.
    """
    system = _system_text(spec, prompt_dir)
    if spec.kind == "recursive_memory":
        user = load_template("user_memory", prompt_dir).format(memory="", exchange="")
    elif spec.kind == "current_turn":
        user = load_template("user_current", prompt_dir).format(exchange="")
    else:
        user = load_template("user_history", prompt_dir).format(history="")
    return tokenizer.count(system) + tokenizer.count(user)


def _memory_step(
    backend: LlmClient,
    spec: InterfaceSpec,
    mem: MemoryState,
    turn: Turn,
    tokenizer: Tokenizer,
    prompt_dir: Optional[Path],
) -> tuple[PredictionSet, ChatExchange]:
    system = _system_text(spec, prompt_dir)
    payload = PromptPayload(system=system, user=_memory_user_text(mem.text, turn, prompt_dir))
    exchange = backend.chat(payload.messages())
    parsed = parse_frame(exchange.text, spec.n_candidates, require_memory=True)
    raw_memory = parsed.memory if parsed.memory is not None else ""
    bounded = truncate_to_tokens(tokenizer, raw_memory, spec.k)
    new_mem = MemoryState(
        text=bounded, token_count=tokenizer.count(bounded), turn_index=mem.turn_index + 1
    )
    return PredictionSet(parsed.candidates, new_mem, parsed.ok), exchange


def step_memory(
    backend: LlmClient,
    spec: InterfaceSpec,
    mem: MemoryState,
    turn: Turn,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    prompt_dir: Optional[Path] = None,
) -> PredictionSet:
    """One recursive-memory step: (m_{t-1}, o_t) -> (m_t, candidates).

    The returned memory is hard-truncated to the k-token budget whatever the
    model produced. A malformed reply still advances the state with
    best-effort fields and format_ok False.
    """
    if spec.kind != "recursive_memory":
        raise ConfigError("step_memory requires a recursive_memory interface")
    prediction, _exchange = _memory_step(backend, spec, mem, turn, tokenizer, prompt_dir)
    return prediction


def summarize_then_predict_step(
    backend: LlmClient,
    spec: InterfaceSpec,
    conv: Conversation,
    t: int,
    prompt_dir: Optional[Path] = None,
) -> PredictionSet:
    """Two calls: summarize turns 1..t, then predict from that summary."""
    prediction, _exchanges = _summary_step(backend, spec, conv, t, prompt_dir)
    return prediction


def _summary_step(
    backend: LlmClient,
    spec: InterfaceSpec,
    conv: Conversation,
    t: int,
    prompt_dir: Optional[Path],
) -> tuple[PredictionSet, list[ChatExchange]]:
    if spec.kind != "summarize_then_predict":
        raise ConfigError("summarize_then_predict_step requires a summarize_then_predict interface")
    summary_payload = build_prompt(spec, conv, MemoryState.initial(), t, prompt_dir)
    summary_exchange = backend.chat(summary_payload.messages())
    predict_payload = build_summary_prediction_prompt(spec, summary_exchange.text, prompt_dir)
    predict_exchange = backend.chat(predict_payload.messages())
    parsed = parse_frame(predict_exchange.text, spec.n_candidates, require_memory=False)
    prediction = PredictionSet(
        parsed.candidates, MemoryState("", 0, 0), parsed.ok
    )
    return prediction, [summary_exchange, predict_exchange]


@dataclass(frozen=True)
class EpisodeStep:
    turn: int
    prediction: PredictionSet
    input_tokens: int
    output_tokens: int
    estimated: bool


@dataclass
class EpisodeResult:
    conversation_id: str
    interface: str
    steps: list[EpisodeStep]

    @property
    def final(self) -> EpisodeStep:
        return self.steps[-1]


def run_episode(
    backend: LlmClient,
    spec: InterfaceSpec,
    conv: Conversation,
    tokenizer: Tokenizer = DEFAULT_TOKENIZER,
    ledger: Optional[TokenLedger] = None,
    prompt_dir: Optional[Path] = None,
) -> tuple[EpisodeResult, TokenLedger]:
    """Predict after every turn of one conversation under one interface.

    Makes exactly T calls (2T for summarize_then_predict) and logs one
    ledger row per call. Backend failures surface as EpisodeError naming
    the turn.
    """
    if ledger is None:
        ledger = TokenLedger()
    steps: list[EpisodeStep] = []
    mem = MemoryState.initial()
    for t in range(1, len(conv.turns) + 1):
        try:
            if spec.kind == "recursive_memory":
                prediction, exchange = _memory_step(
                    backend, spec, mem, conv.turns[t - 1], tokenizer, prompt_dir
                )
                mem = prediction.memory
                exchanges = [exchange]
            elif spec.kind == "summarize_then_predict":
                prediction, exchanges = _summary_step(backend, spec, conv, t, prompt_dir)
            else:
                payload = build_prompt(spec, conv, mem, t, prompt_dir)
                exchange = backend.chat(payload.messages())
                parsed = parse_frame(exchange.text, spec.n_candidates, require_memory=False)
                prediction = PredictionSet(parsed.candidates, MemoryState("", 0, 0), parsed.ok)
                exchanges = [exchange]
        except GatewayError as exc:
            raise EpisodeError(conv.id, t, exc) from exc
        input_total = 0
        output_total = 0
        estimated = False
        for exchange in exchanges:
            ledger.add(
                LedgerRow(
                    conversation_id=conv.id,
                    turn=t,
                    interface=spec.kind,
                    input_tokens=exchange.usage.input_tokens,
                    output_tokens=exchange.usage.output_tokens,
                    estimated=exchange.usage.estimated,
                )
            )
            input_total += exchange.usage.input_tokens
            output_total += exchange.usage.output_tokens
            estimated = estimated or exchange.usage.estimated
        steps.append(EpisodeStep(t, prediction, input_total, output_total, estimated))
    return EpisodeResult(conv.id, spec.kind, steps), ledger
