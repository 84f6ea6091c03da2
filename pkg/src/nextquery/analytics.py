"""Token accounting and evaluation statistics.

Holds the per-call token ledger, the turn-wise efficiency curve, bootstrap
confidence machinery, agreement and correlation coefficients, and the
stratified score report. Everything seeded here reproduces bitwise.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class LedgerRow:
    conversation_id: str
    turn: int
    interface: str
    input_tokens: int
    output_tokens: int
    estimated: bool = False

    def __post_init__(self) -> None:
        if self.turn < 1:
            raise ValueError("turn must be >= 1")
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "turn": self.turn,
            "interface": self.interface,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "estimated": self.estimated,
        }


class TokenLedger:
    """Append-only record of backend calls, one row per call."""

    def __init__(self, rows: Optional[Iterable[LedgerRow]] = None) -> None:
        self.rows: list[LedgerRow] = list(rows) if rows is not None else []

    def add(self, row: LedgerRow) -> None:
        self.rows.append(row)

    def extend(self, rows: Iterable[LedgerRow]) -> None:
        self.rows.extend(rows)

    def __iter__(self) -> Iterator[LedgerRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def filtered(self, interface: Optional[str] = None) -> "TokenLedger":
        if interface is None:
            return TokenLedger(self.rows)
        return TokenLedger(r for r in self.rows if r.interface == interface)

    def write_jsonl(self, fh: IO[str]) -> None:
        for row in self.rows:
            fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, fh: IO[str]) -> "TokenLedger":
        ledger = cls()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            ledger.add(
                LedgerRow(
                    conversation_id=d["conversation_id"],
                    turn=int(d["turn"]),
                    interface=d["interface"],
                    input_tokens=int(d["input_tokens"]),
                    output_tokens=int(d["output_tokens"]),
                    estimated=bool(d.get("estimated", False)),
                )
            )
        return ledger


def efficiency_curve(ledger: TokenLedger, interface: str) -> list[tuple[int, float]]:
    """Mean input tokens per turn index for one interface, sorted by turn.

    A turn with several calls (summarize-then-predict makes two) contributes
    the per-conversation sum at that turn, then the mean runs across
    conversations.
    """
    per_conv_turn: dict[tuple[str, int], int] = defaultdict(int)
    for row in ledger:
        if row.interface != interface:
            continue
        per_conv_turn[(row.conversation_id, row.turn)] += row.input_tokens
    by_turn: dict[int, list[int]] = defaultdict(list)
    for (_cid, turn), total in per_conv_turn.items():
        by_turn[turn].append(total)
    return [(turn, sum(vals) / len(vals)) for turn, vals in sorted(by_turn.items())]


def write_curves_csv(curves: dict[str, list[tuple[int, float]]], fh: IO[str]) -> None:
    writer = csv.writer(fh)
    writer.writerow(["interface", "turn", "mean_input_tokens"])
    for interface in sorted(curves):
        for turn, mean_tokens in curves[interface]:
            writer.writerow([interface, turn, f"{mean_tokens:.3f}"])


def bootstrap_ci(
    scores: Sequence[float],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    chunk_size: int = 250,
) -> tuple[float, float, float]:
    """Percentile bootstrap CI for the mean: (mean, lo, hi).

    Resampling is chunked through ``SeedSequence.spawn`` so the result is
    identical for any worker split at a fixed seed.
    """
    data = np.asarray(scores, dtype=float)
    if data.size < 2:
        raise ValueError("bootstrap_ci needs at least 2 scores")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    n_chunks = math.ceil(resamples / chunk_size)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    means = np.empty(resamples, dtype=float)
    pos = 0
    for i, child in enumerate(children):
        count = min(chunk_size, resamples - pos)
        rng = np.random.Generator(np.random.Philox(child))
        idx = rng.integers(0, data.size, size=(count, data.size))
        means[pos : pos + count] = data[idx].mean(axis=1)
        pos += count
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [alpha * 100.0, (1.0 - alpha) * 100.0])
    return float(data.mean()), float(lo), float(hi)


def paired_bootstrap_p(
    a: Sequence[float],
    b: Sequence[float],
    resamples: int = 1000,
    seed: int = 0,
    chunk_size: int = 250,
) -> float:
    """Fraction of joint resamples where mean(a) strictly exceeds mean(b).

    Pairs resample together, so per-sample correlation is preserved.
    Identical inputs give exactly 0.0 under the strict inequality.
    """
    xs = np.asarray(a, dtype=float)
    ys = np.asarray(b, dtype=float)
    if xs.shape != ys.shape:
        raise ValueError("paired scores must align one-to-one")
    if xs.size < 1:
        raise ValueError("paired_bootstrap_p needs at least 1 pair")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    n_chunks = math.ceil(resamples / chunk_size)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    wins = 0
    pos = 0
    for child in children:
        count = min(chunk_size, resamples - pos)
        rng = np.random.Generator(np.random.Philox(child))
        idx = rng.integers(0, xs.size, size=(count, xs.size))
        wins += int(np.sum(xs[idx].mean(axis=1) > ys[idx].mean(axis=1)))
        pos += count
    return wins / resamples


def fleiss_kappa(ratings: Sequence[Sequence[object]]) -> float:
    """Fleiss' kappa over an items x raters matrix of category labels.

    The matrix must be complete and every item rated by the same r >= 2
    raters. With perfect agreement the value is 1 even when chance
    agreement saturates.
    """
    if not ratings:
        raise ValueError("fleiss_kappa needs at least one item")
    r = len(ratings[0])
    if r < 2:
        raise ValueError("fleiss_kappa needs at least 2 raters")
    for row in ratings:
        if len(row) != r:
            raise ValueError("all items must have the same rater count")
        if any(label is None for label in row):
            raise ValueError("rating matrix must be complete")
    categories = sorted({label for row in ratings for label in row}, key=repr)
    cat_index = {c: i for i, c in enumerate(categories)}
    n_items = len(ratings)
    counts = np.zeros((n_items, len(categories)), dtype=float)
    for i, row in enumerate(ratings):
        for label in row:
            counts[i, cat_index[label]] += 1
    p_i = (np.sum(counts**2, axis=1) - r) / (r * (r - 1))
    p_bar = float(p_i.mean())
    p_j = counts.sum(axis=0) / (n_items * r)
    p_e = float(np.sum(p_j**2))
    if abs(1.0 - p_e) < 1e-15:
        if p_bar > 1.0 - 1e-12:
            return 1.0
        raise ValueError("kappa undefined: chance agreement saturates without consensus")
    return (p_bar - p_e) / (1.0 - p_e)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=float)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        # ties share the average of the rank positions they straddle
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d sequences")
    if xs.size < 2:
        raise ValueError("spearman_rho needs at least 2 points")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ValueError("spearman_rho undefined for a constant vector")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


RUBRIC_SCORES = (0.0, 25.0, 50.0, 75.0, 100.0)


@dataclass(frozen=True)
class ScoreSample:
    """One evaluated conversation: per-method scores plus strata labels."""

    conversation_id: str
    scores: dict[str, float]
    turns: int
    difficulty: Optional[str] = None
    transfer: Optional[str] = None

    def __post_init__(self) -> None:
        if self.turns < 1:
            raise ValueError("turns must be >= 1")
        for method, score in self.scores.items():
            if not 0.0 <= score <= 100.0:
                raise ValueError(f"score out of range for {method!r}: {score}")


LENGTH_BUCKETS: tuple[tuple[int, Optional[int]], ...] = ((2, 5), (6, 9), (10, None))


def _bucket_label(lo: int, hi: Optional[int]) -> str:
    return f"{lo}-{hi}" if hi is not None else f"{lo}+"


def _bucket_for(turns: int, buckets: Sequence[tuple[int, Optional[int]]]) -> Optional[str]:
    for lo, hi in buckets:
        if turns >= lo and (hi is None or turns <= hi):
            return _bucket_label(lo, hi)
    return None


def rubric_level(score: float) -> int:
    """Map a 0..100 score back to its 1..5 rubric level (nearest anchor)."""
    return min(range(5), key=lambda i: abs(score - RUBRIC_SCORES[i])) + 1


@dataclass
class StratifiedReport:
    by_length: dict[str, dict[str, float]]
    rubric_histogram: dict[str, dict[int, float]]
    by_difficulty_transfer: dict[str, dict[str, float]]
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "by_length": self.by_length,
            "rubric_histogram": {
                m: {str(level): pct for level, pct in hist.items()}
                for m, hist in self.rubric_histogram.items()
            },
            "by_difficulty_transfer": self.by_difficulty_transfer,
        }


def stratified_report(
    samples: Sequence[ScoreSample],
    buckets: Sequence[tuple[int, Optional[int]]] = LENGTH_BUCKETS,
) -> StratifiedReport:
    """Break scores down by length bucket, rubric level, and strata labels.

    Histogram percentages always cover levels 1..5 and sum to 100 per
    method. Samples whose turn count falls outside every bucket skip the
    length table only.
    """
    if not samples:
        raise ValueError("stratified_report needs at least one sample")
    length_acc: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    level_counts: dict[str, Counter] = defaultdict(Counter)
    strata_acc: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for sample in samples:
        label = _bucket_for(sample.turns, buckets)
        for method, score in sample.scores.items():
            if label is not None:
                length_acc[method][label].append(score)
            level_counts[method][rubric_level(score)] += 1
            if sample.difficulty is not None and sample.transfer is not None:
                key = f"{sample.difficulty}/{sample.transfer}"
                strata_acc[method][key].append(score)

    by_length = {
        method: {label: sum(v) / len(v) for label, v in sorted(acc.items())}
        for method, acc in sorted(length_acc.items())
    }
    histogram: dict[str, dict[int, float]] = {}
    for method, counts in sorted(level_counts.items()):
        total = sum(counts.values())
        histogram[method] = {level: 100.0 * counts.get(level, 0) / total for level in range(1, 6)}
    by_strata = {
        method: {key: sum(v) / len(v) for key, v in sorted(acc.items())}
        for method, acc in sorted(strata_acc.items())
    }
    return StratifiedReport(
        by_length=by_length,
        rubric_histogram=histogram,
        by_difficulty_transfer=by_strata,
        n_samples=len(samples),
    )


def write_strata_csv(report: StratifiedReport, fh: IO[str]) -> None:
    writer = csv.writer(fh)
    writer.writerow(["method", "stratum", "mean_score"])
    for method, table in report.by_length.items():
        for label, mean in table.items():
            writer.writerow([method, f"turns:{label}", f"{mean:.3f}"])
    for method, table in report.by_difficulty_transfer.items():
        for label, mean in table.items():
            writer.writerow([method, label, f"{mean:.3f}"])
