"""Rubric scoring and reward composition.

A judge grades one (candidate, ground truth) pair on a 1..5 intent-alignment
rubric. An odd ensemble of judges votes per candidate; the judge reward for
a prediction set is the best-of-N maximum of the mapped levels; the total
reward blends that with a binary format reward.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional, Sequence

from .assets import load_template
from .errors import ConfigError
from .frames import parse_frame
from .gateway import LlmClient

RUBRIC_LEVELS = (1, 2, 3, 4, 5)
DEFAULT_LAMBDA = 0.9


class JudgeParseError(RuntimeError):
    """Judge reply held no readable level even after one re-ask."""


class RewardError(RuntimeError):
    """No candidate in the set could be scored."""


@dataclass(frozen=True)
class JudgeVerdict:
    """Ensemble outcome for one candidate."""

    per_judge: tuple[tuple[str, int], ...]
    final_level: int
    score_0_100: float
    tie_broken: bool

    def __post_init__(self) -> None:
        if self.final_level not in RUBRIC_LEVELS:
            raise ValueError(f"final_level must be 1..5, got {self.final_level}")
        if abs(self.score_0_100 - map_score(self.final_level)) > 1e-12:
            raise ValueError("score_0_100 must be the mapped final level")


@dataclass(frozen=True)
class Reward:
    r_judge: float
    r_format: float
    lam: float
    total: float = -1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.r_judge <= 1.0:
            raise ValueError(f"r_judge must lie in [0, 1], got {self.r_judge}")
        if not 0.0 <= self.r_format <= 1.0:
            raise ValueError(f"r_format must lie in [0, 1], got {self.r_format}")
        blended = self.lam * self.r_judge + (1.0 - self.lam) * self.r_format
        if self.total == -1.0:
            object.__setattr__(self, "total", blended)
        elif self.total != blended:
            raise ValueError("total must equal the lambda blend exactly")


def map_score(level: int) -> float:
    """Rubric level 1..5 to the 0..100 anchor scale."""
    if level not in RUBRIC_LEVELS:
        raise ValueError(f"rubric level must be 1..5, got {level}")
    return (level - 1) / 4 * 100.0


_LEVEL_RE = re.compile(r"\b([1-5])\b")


def extract_level(text: str) -> Optional[int]:
    """First standalone digit 1..5 in a judge reply, None when absent."""
    match = _LEVEL_RE.search(text)
    return int(match.group(1)) if match else None


def _judge_messages(
    candidate: str, ground_truth: str, prompt_dir: Optional[Path]
) -> list[dict]:
    system = load_template("judge_system", prompt_dir)
    user = f"Predicted query: {candidate}\nActual next query: {ground_truth}"
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]


def score_pair(
    backend: LlmClient,
    candidate: str,
    ground_truth: str,
    prompt_dir: Optional[Path] = None,
) -> int:
    """Grade one candidate against the actual next query; one re-ask on garble."""
    if not candidate.strip() or not ground_truth.strip():
        raise ValueError("candidate and ground truth must be non-empty")
    messages = _judge_messages(candidate, ground_truth, prompt_dir)
    exchange = backend.chat(messages)
    level = extract_level(exchange.text)
    if level is not None:
        return level
    reask = messages + [
        {"role": "assistant", "content": exchange.text},
        {"role": "user", "content": load_template("judge_reask", prompt_dir)},
    ]
    retry = backend.chat(reask)
    level = extract_level(retry.text)
    if level is not None:
        return level
    raise JudgeParseError(f"no level in judge reply: {retry.text[:120]!r}")


def majority_vote(levels: Sequence[int]) -> tuple[int, bool]:
    """Strict-majority level for one candidate, median on a full tie.

    Requires an odd ensemble of at least 3. The flag reports whether the
    median fallback decided.
    """
    if not levels or len(levels) < 3 or len(levels) % 2 == 0:
        raise ConfigError(f"ensemble must be odd and >= 3, got {len(levels)} votes")
    for level in levels:
        if level not in RUBRIC_LEVELS:
            raise ValueError(f"rubric level must be 1..5, got {level}")
    counts: dict[int, int] = {}
    for level in levels:
        counts[level] = counts.get(level, 0) + 1
    top_level, top_count = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    if top_count > len(levels) / 2:
        return top_level, False
    median = sorted(levels)[len(levels) // 2]
    return median, True


JudgeEnsemble = Sequence[tuple[str, LlmClient]]


def score_candidates(
    judges: JudgeEnsemble,
    candidates: Sequence[str],
    ground_truth: str,
    prompt_dir: Optional[Path] = None,
) -> list[Optional[JudgeVerdict]]:
    """Ensemble verdict per candidate; None marks an unscorable candidate.

    A candidate is unscorable when it is empty or any judge fails to parse
    after its re-ask. Exclusion, never a default level.
    """
    if not judges or len(judges) < 3 or len(judges) % 2 == 0:
        raise ConfigError(f"ensemble must be odd and >= 3, got {len(judges)} judges")
    verdicts: list[Optional[JudgeVerdict]] = []
    for candidate in candidates:
        if not candidate.strip():
            verdicts.append(None)
            continue
        per_judge: list[tuple[str, int]] = []
        try:
            for name, backend in judges:
                per_judge.append((name, score_pair(backend, candidate, ground_truth, prompt_dir)))
        except JudgeParseError:
            verdicts.append(None)
            continue
        final, tie_broken = majority_vote([level for _name, level in per_judge])
        verdicts.append(
            JudgeVerdict(tuple(per_judge), final, map_score(final), tie_broken)
        )
    return verdicts


def judge_reward_best_of_n(
    judges: JudgeEnsemble,
    candidates: Sequence[str],
    ground_truth: str,
    prompt_dir: Optional[Path] = None,
) -> float:
    """Best-of-N judge reward in [0, 1]: max mapped level over candidates."""
    verdicts = score_candidates(judges, candidates, ground_truth, prompt_dir)
    scored = [v for v in verdicts if v is not None]
    if not scored:
        raise RewardError("no candidate could be scored")
    return max((v.final_level - 1) / 4 for v in scored)


def format_reward(raw_output: str, n: int, require_memory: bool = True) -> int:
    """1 when the reply is an exact frame, else 0."""
    return 1 if parse_frame(raw_output, n, require_memory).ok else 0


def total_reward(r_judge: float, r_format: float, lam: float = DEFAULT_LAMBDA) -> Reward:
    return Reward(r_judge=r_judge, r_format=r_format, lam=lam)


def trajectory_reward(
    r_judge_terminal: float,
    per_turn_format: Sequence[int],
    lam: float = DEFAULT_LAMBDA,
) -> Reward:
    """Episode-level reward: terminal judge score, format averaged over turns."""
    if not per_turn_format:
        raise ValueError("per_turn_format must be non-empty")
    mean_format = sum(per_turn_format) / len(per_turn_format)
    return Reward(r_judge=r_judge_terminal, r_format=mean_format, lam=lam)


def write_judge_audit(
    fh: IO[str],
    conversation_id: str,
    verdicts: Sequence[Optional[JudgeVerdict]],
) -> None:
    """One audit row per candidate; unscored candidates keep null fields."""
    for idx, verdict in enumerate(verdicts):
        if verdict is None:
            row = {
                "id": conversation_id,
                "candidate_idx": idx,
                "per_judge": None,
                "final_level": None,
                "score": None,
                "tie_broken": None,
                "excluded": True,
            }
        else:
            row = {
                "id": conversation_id,
                "candidate_idx": idx,
                "per_judge": [[name, level] for name, level in verdict.per_judge],
                "final_level": verdict.final_level,
                "score": verdict.score_0_100,
                "tie_broken": verdict.tie_broken,
                "excluded": False,
            }
        fh.write(json.dumps(row, sort_keys=True) + "\n")
