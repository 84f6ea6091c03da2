"""Dataset curation cascade.

Stage I applies cheap structural checks and global deduplication. Stage II
screens each survivor with a model call. Stage III reviews every screened
sample, iterating on uncertain ones a bounded number of rounds before a
conservative drop. Truncation mining probes dropped long sessions for a
predictable prefix. Annotation and the difficulty gate label what is kept.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Optional, Sequence

from .assets import load_taxonomy, load_template, taxonomy_text
from .conversation import Conversation, normalize_text
from .errors import ConfigError
from .gateway import LlmClient
from .history import render_history

DECISIONS = ("KEEP", "UNCERTAIN", "DROP")
TRANSFERS = ("deepening", "application", "associated_shift", "challenge")

DEFAULT_BLOCKED_PHRASES = (
    "ignore previous instructions",
    "ignore all previous instructions",
    "disregard your instructions",
    "you are now dan",
    "jailbreak",
    "pretend you have no restrictions",
)


@dataclass(frozen=True)
class CurationRules:
    min_turns: int = 2
    max_turns: int = 40
    min_query_chars: int = 1
    max_query_chars: int = 8000
    blocked_phrases: tuple[str, ...] = DEFAULT_BLOCKED_PHRASES
    shingle_size: int = 5
    jaccard_threshold: float = 0.9
    max_refine_rounds: int = 3
    mining_min_turns: int = 4

    def __post_init__(self) -> None:
        if self.min_turns < 1 or self.max_turns < self.min_turns:
            raise ConfigError("turn bounds must satisfy 1 <= min <= max")
        if self.min_query_chars < 1 or self.max_query_chars < self.min_query_chars:
            raise ConfigError("query length bounds must satisfy 1 <= min <= max")
        if not 0.0 < self.jaccard_threshold <= 1.0:
            raise ConfigError("jaccard_threshold must lie in (0, 1]")
        if self.shingle_size < 1:
            raise ConfigError("shingle_size must be >= 1")
        if self.max_refine_rounds < 1:
            raise ConfigError("max_refine_rounds must be >= 1")
        if self.mining_min_turns < self.min_turns + 1:
            raise ConfigError("mining needs at least min_turns + 1 turns")


@dataclass(frozen=True)
class CurationVerdict:
    decision: str
    justification: str
    stage: str
    overturned: bool = False
    refinement_rounds: int = 0

    def __post_init__(self) -> None:
        if self.decision not in DECISIONS:
            raise ValueError(f"decision must be one of {DECISIONS}")
        if self.stage not in ("II", "III"):
            raise ValueError("stage must be 'II' or 'III'")
        if self.stage == "III" and self.decision == "UNCERTAIN":
            raise ValueError("stage III must commit to KEEP or DROP")
        if self.refinement_rounds < 0:
            raise ValueError("refinement_rounds must be >= 0")


def stage1_filter(conv: Conversation, rules: CurationRules) -> tuple[bool, Optional[str]]:
    """Structural bounds and degenerate-pattern checks. (keep, drop_reason)."""
    n_turns = len(conv.turns)
    if not rules.min_turns <= n_turns <= rules.max_turns:
        return False, f"turn_count:{n_turns}"
    queries = [t.query for t in conv.turns] + [conv.target]
    for q in queries:
        if not rules.min_query_chars <= len(q) <= rules.max_query_chars:
            return False, f"query_length:{len(q)}"
    haystack = " ".join(
        [t.query for t in conv.turns] + [t.response for t in conv.turns] + [conv.target]
    ).casefold()
    for phrase in rules.blocked_phrases:
        if phrase in haystack:
            return False, f"degenerate_pattern:{phrase}"
    return True, None


def _canonical_text(conv: Conversation) -> str:
    parts = []
    for turn in conv.turns:
        parts.append(normalize_text(turn.query).casefold())
        parts.append(normalize_text(turn.response).casefold())
    parts.append(normalize_text(conv.target).casefold())
    return " ".join(p for p in parts if p)


def _shingles(text: str, size: int) -> frozenset[str]:
    words = text.split()
    if len(words) < size:
        return frozenset({" ".join(words)}) if words else frozenset()
    return frozenset(" ".join(words[i : i + size]) for i in range(len(words) - size + 1))


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def dedup(
    convs: Sequence[Conversation], rules: CurationRules
) -> tuple[list[Conversation], list[tuple[Conversation, str]]]:
    """Exact plus near-duplicate removal, first occurrence wins.

    Exact: sha256 of the normalized casefolded text. Near: word-shingle
    Jaccard at or above the threshold against any kept sample. Idempotent:
    rerunning on the kept list removes nothing.
    """
    kept: list[Conversation] = []
    kept_shingles: list[frozenset[str]] = []
    dropped: list[tuple[Conversation, str]] = []
    seen_exact: dict[str, str] = {}
    for conv in convs:
        text = _canonical_text(conv)
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        if digest in seen_exact:
            dropped.append((conv, f"exact_duplicate_of:{seen_exact[digest]}"))
            continue
        shingles = _shingles(text, rules.shingle_size)
        near_of = None
        for other, other_sh in zip(kept, kept_shingles):
            small, large = sorted((len(shingles), len(other_sh)))
            if large and small / large < rules.jaccard_threshold:
                continue
            if _jaccard(shingles, other_sh) >= rules.jaccard_threshold:
                near_of = other.id
                break
        if near_of is not None:
            dropped.append((conv, f"near_duplicate_of:{near_of}"))
            continue
        seen_exact[digest] = conv.id
        kept.append(conv)
        kept_shingles.append(shingles)
    return kept, dropped


_VERDICT_RE = re.compile(r"VERDICT:\s*(KEEP|UNCERTAIN|DROP)\b", re.IGNORECASE)
_REASON_RE = re.compile(r"REASON:\s*(.+)", re.IGNORECASE | re.DOTALL)
_ANSWER_RE = re.compile(r"ANSWER:\s*(YES|NO)\b", re.IGNORECASE)


def _parse_verdict(text: str) -> tuple[Optional[str], str]:
    verdict_match = _VERDICT_RE.search(text)
    reason_match = _REASON_RE.search(text)
    reason = reason_match.group(1).strip() if reason_match else text.strip()
    return (verdict_match.group(1).upper() if verdict_match else None), reason


def _sample_text(conv: Conversation) -> str:
    return render_history(conv.turns) + f"\n\nCandidate target query: {conv.target}"


def stage2_screen(
    backend: LlmClient, conv: Conversation, prompt_dir: Optional[Path] = None
) -> CurationVerdict:
    """One screening call; an unreadable reply lands in UNCERTAIN, audited."""
    messages = [
        {"role": "system", "content": load_template("screen_system", prompt_dir)},
        {"role": "user", "content": _sample_text(conv)},
    ]
    exchange = backend.chat(messages)
    decision, reason = _parse_verdict(exchange.text)
    if decision is None:
        retry = backend.chat(
            messages
            + [
                {"role": "assistant", "content": exchange.text},
                {"role": "user", "content": load_template("review_commit", prompt_dir)},
            ]
        )
        decision, reason = _parse_verdict(retry.text)
    if decision is None:
        return CurationVerdict(
            decision="UNCERTAIN",
            justification="screener reply unreadable after re-ask",
            stage="II",
        )
    return CurationVerdict(decision=decision, justification=reason, stage="II")


def stage3_review(
    backend: LlmClient,
    conv: Conversation,
    screened: CurationVerdict,
    rules: CurationRules,
    prompt_dir: Optional[Path] = None,
) -> CurationVerdict:
    """Expert review of a screened sample; always commits to KEEP or DROP.

    KEEP inputs get one confirm-or-overturn pass (with one commit re-ask).
    UNCERTAIN inputs iterate up to max_refine_rounds, then drop
    conservatively. The overturned flag marks disagreement with a stage-II
    KEEP.
    """
    if screened.stage != "II" or screened.decision == "DROP":
        raise ValueError("stage III reviews only stage-II KEEP or UNCERTAIN samples")
    system = load_template("review_system", prompt_dir)
    base_user = (
        _sample_text(conv)
        + f"\n\nScreener verdict: {screened.decision}"
        + f"\nScreener justification: {screened.justification}"
    )

    if screened.decision == "KEEP":
        messages = [
            {"role": "system", "content": system},
            {"role": "user", "content": base_user},
        ]
        exchange = backend.chat(messages)
        decision, reason = _parse_verdict(exchange.text)
        if decision not in ("KEEP", "DROP"):
            retry = backend.chat(
                messages
                + [
                    {"role": "assistant", "content": exchange.text},
                    {"role": "user", "content": load_template("review_commit", prompt_dir)},
                ]
            )
            decision, reason = _parse_verdict(retry.text)
        if decision not in ("KEEP", "DROP"):
            return CurationVerdict(
                decision="DROP",
                justification="reviewer would not commit; dropped conservatively",
                stage="III",
                overturned=True,
            )
        return CurationVerdict(
            decision=decision,
            justification=reason,
            stage="III",
            overturned=(decision == "DROP"),
        )

    notes = screened.justification
    for round_no in range(1, rules.max_refine_rounds + 1):
        user = base_user + f"\n\nRefinement round {round_no}. Prior notes: {notes}"
        exchange = backend.chat(
            [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ]
        )
        decision, reason = _parse_verdict(exchange.text)
        if decision in ("KEEP", "DROP"):
            return CurationVerdict(
                decision=decision,
                justification=reason,
                stage="III",
                refinement_rounds=round_no,
            )
        notes = reason
    return CurationVerdict(
        decision="DROP",
        justification=f"unresolved after {rules.max_refine_rounds} rounds; dropped conservatively",
        stage="III",
        refinement_rounds=rules.max_refine_rounds,
    )


def truncation_mine(
    backend: LlmClient,
    conv: Conversation,
    rules: CurationRules,
    prompt_dir: Optional[Path] = None,
) -> Optional[Conversation]:
    """Probe a dropped session for its longest predictable prefix.

    Boundaries run from the latest possible split toward the front, one
    probe call each; the first YES wins. The recovered prefix keeps turns
    1..t with turn t+1's query as target and must itself pass stage I.
    """
    n_turns = len(conv.turns)
    if n_turns < rules.mining_min_turns:
        return None
    system = load_template("probe_system", prompt_dir)
    for boundary in range(n_turns - 1, rules.min_turns - 1, -1):
        prefix_turns = conv.turns[:boundary]
        candidate_target = conv.turns[boundary].query
        user = (
            render_history(prefix_turns)
            + f"\n\nCandidate target query: {candidate_target}"
        )
        exchange = backend.chat(
            [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ]
        )
        answer = _ANSWER_RE.search(exchange.text)
        if answer is None or answer.group(1).upper() != "YES":
            continue
        mined = Conversation(
            id=f"{conv.id}:trunc@{boundary}",
            turns=prefix_turns,
            target=candidate_target,
            source=conv.source,
        )
        keep, _reason = stage1_filter(mined, rules)
        return mined if keep else None
    return None


@dataclass(frozen=True)
class GateFeatures:
    context_distance_turns: int
    entropy_directions: int
    reasoning_gap: bool

    def __post_init__(self) -> None:
        if self.context_distance_turns < 0:
            raise ValueError("context_distance_turns must be >= 0")
        if self.entropy_directions < 0:
            raise ValueError("entropy_directions must be >= 0")


def difficulty_gate(features: GateFeatures, transfer: str) -> str:
    """'hard' when distance, entropy, or a reasoning gap triggers.

    The distance trigger is far context (>= 2 turns back), except for
    associated_shift where proximity is what makes the shift hard, so the
    polarity flips to distance < 2.
    """
    if transfer not in TRANSFERS:
        raise ValueError(f"transfer must be one of {TRANSFERS}")
    if transfer == "associated_shift":
        distance_trigger = features.context_distance_turns < 2
    else:
        distance_trigger = features.context_distance_turns >= 2
    entropy_trigger = features.entropy_directions >= 5
    if distance_trigger or entropy_trigger or features.reasoning_gap:
        return "hard"
    return "easy"


@dataclass(frozen=True)
class SampleAnnotation:
    intent_primary: str
    intent_secondary: str
    transfer: str
    difficulty: str
    gate_features: GateFeatures

    def __post_init__(self) -> None:
        if self.transfer not in TRANSFERS:
            raise ValueError(f"transfer must be one of {TRANSFERS}")
        expected = difficulty_gate(self.gate_features, self.transfer)
        if self.difficulty != expected:
            raise ValueError(
                f"difficulty {self.difficulty!r} contradicts the gate ({expected!r})"
            )

    @classmethod
    def from_features(
        cls,
        intent_primary: str,
        intent_secondary: str,
        transfer: str,
        gate_features: GateFeatures,
    ) -> "SampleAnnotation":
        return cls(
            intent_primary=intent_primary,
            intent_secondary=intent_secondary,
            transfer=transfer,
            difficulty=difficulty_gate(gate_features, transfer),
            gate_features=gate_features,
        )


_ANNOTATION_FIELDS = {
    "primary": re.compile(r"PRIMARY:\s*(\S+)", re.IGNORECASE),
    "secondary": re.compile(r"SECONDARY:\s*(\S+)", re.IGNORECASE),
    "transfer": re.compile(r"TRANSFER:\s*(\S+)", re.IGNORECASE),
    "distance": re.compile(r"DISTANCE:\s*(-?\d+)", re.IGNORECASE),
    "entropy": re.compile(r"ENTROPY:\s*(-?\d+)", re.IGNORECASE),
    "gap": re.compile(r"GAP:\s*(yes|no)\b", re.IGNORECASE),
}


def annotate_sample(
    backend: LlmClient, conv: Conversation, prompt_dir: Optional[Path] = None
) -> SampleAnnotation:
    """Label a kept sample: intents, transfer paradigm, gate features.

    Difficulty is always derived through the gate, never taken from the
    reply.
    """
    taxonomy = load_taxonomy(prompt_dir)
    system = load_template("annotate_system", prompt_dir).format(
        taxonomy=taxonomy_text(taxonomy)
    )
    exchange = backend.chat(
        [
            {"role": "system", "content": system},
            {"role": "user", "content": _sample_text(conv)},
        ]
    )
    fields: dict[str, str] = {}
    for key, pattern in _ANNOTATION_FIELDS.items():
        match = pattern.search(exchange.text)
        if match is None:
            raise ValueError(f"annotation reply is missing {key.upper()}: {exchange.text[:120]!r}")
        fields[key] = match.group(1)
    transfer = fields["transfer"].lower()
    features = GateFeatures(
        context_distance_turns=max(0, int(fields["distance"])),
        entropy_directions=max(0, int(fields["entropy"])),
        reasoning_gap=fields["gap"].lower() == "yes",
    )
    return SampleAnnotation.from_features(
        intent_primary=fields["primary"],
        intent_secondary=fields["secondary"],
        transfer=transfer,
        gate_features=features,
    )


@dataclass(frozen=True)
class StageCount:
    name: str
    count: int
    retention_pct: Optional[float]


@dataclass
class AttritionReport:
    stages: list[StageCount]
    mined: int
    final: int

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"name": s.name, "count": s.count, "retention_pct": s.retention_pct}
                for s in self.stages
            ],
            "mined": self.mined,
            "final": self.final,
        }

    def to_text(self) -> str:
        lines = [f"{'Stage':<28}{'#Samples':>10}{'Ret.%':>8}"]
        for s in self.stages:
            pct = f"{s.retention_pct:.1f}" if s.retention_pct is not None else "--"
            lines.append(f"{s.name:<28}{s.count:>10}{pct:>8}")
        lines.append(f"{'+ truncation mining':<28}{'+' + str(self.mined):>10}{'--':>8}")
        lines.append(f"{'final':<28}{self.final:>10}{'--':>8}")
        return "\n".join(lines)


def attrition_report(raw: int, after1: int, after2: int, after3: int, mined: int) -> AttritionReport:
    """Stage counts with retention relative to the previous stage.

    The stage-II count covers KEEP plus UNCERTAIN (everything forwarded to
    review); final adds mined recoveries to the stage-III keeps.
    """

    def pct(count: int, prev: int) -> Optional[float]:
        return 100.0 * count / prev if prev > 0 else None

    stages = [
        StageCount("raw", raw, None),
        StageCount("stage I (heuristics+dedup)", after1, pct(after1, raw)),
        StageCount("stage II (screen)", after2, pct(after2, after1)),
        StageCount("stage III (review)", after3, pct(after3, after2)),
    ]
    return AttritionReport(stages=stages, mined=mined, final=after3 + mined)


@dataclass(frozen=True)
class AuditRecord:
    conversation_id: str
    stage: str
    decision: str
    justification: str
    overturned: bool = False
    rounds: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.conversation_id,
            "stage": self.stage,
            "decision": self.decision,
            "justification": self.justification,
            "overturned": self.overturned,
            "rounds": self.rounds,
        }


@dataclass
class PipelineResult:
    kept: list[Conversation]
    mined: list[Conversation]
    audits: list[AuditRecord]
    report: AttritionReport


def run_pipeline(
    convs: Sequence[Conversation],
    backend: LlmClient,
    rules: CurationRules = CurationRules(),
    prompt_dir: Optional[Path] = None,
    mine_truncations: bool = True,
) -> PipelineResult:
    """Full cascade over a corpus, auditing every decision.

    Mining runs over the stage-II DROP pool only; recovered prefixes join
    the final set without re-screening.
    """
    audits: list[AuditRecord] = []
    raw_n = len(convs)

    survivors: list[Conversation] = []
    for conv in convs:
        keep, reason = stage1_filter(conv, rules)
        if keep:
            survivors.append(conv)
        else:
            audits.append(AuditRecord(conv.id, "I", "DROP", reason or ""))
    deduped, duplicates = dedup(survivors, rules)
    for conv, reason in duplicates:
        audits.append(AuditRecord(conv.id, "I", "DROP", reason))
    after1 = len(deduped)

    forwarded: list[tuple[Conversation, CurationVerdict]] = []
    stage2_drops: list[Conversation] = []
    for conv in deduped:
        verdict = stage2_screen(backend, conv, prompt_dir)
        audits.append(
            AuditRecord(conv.id, "II", verdict.decision, verdict.justification)
        )
        if verdict.decision == "DROP":
            stage2_drops.append(conv)
        else:
            forwarded.append((conv, verdict))
    after2 = len(forwarded)

    kept: list[Conversation] = []
    for conv, screened in forwarded:
        final = stage3_review(backend, conv, screened, rules, prompt_dir)
        audits.append(
            AuditRecord(
                conv.id,
                "III",
                final.decision,
                final.justification,
                overturned=final.overturned,
                rounds=final.refinement_rounds,
            )
        )
        if final.decision == "KEEP":
            kept.append(conv)
    after3 = len(kept)

    mined: list[Conversation] = []
    if mine_truncations:
        for conv in stage2_drops:
            recovered = truncation_mine(backend, conv, rules, prompt_dir)
            if recovered is not None:
                mined.append(recovered)
                audits.append(
                    AuditRecord(recovered.id, "mining", "KEEP", "predictable prefix")
                )

    report = attrition_report(raw_n, after1, after2, after3, len(mined))
    return PipelineResult(kept=kept, mined=mined, audits=audits, report=report)


def write_audit_jsonl(fh: IO[str], audits: Sequence[AuditRecord]) -> None:
    for record in audits:
        fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
