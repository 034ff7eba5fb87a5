"""Judge-response parsing, compliance cap, threshold retention, judge accuracy and dataset statistics.

Response grammar (case-insensitive; one item per line, any order, blank lines ignored)::

    Brief reasoning: <text>
    Instruction Compliance: <1-5>
    Consistency & Detail Fidelity: <1-5>
    Visual Quality & Stability: <1-5>

Labels may be wrapped in markdown bold (``**Label:**`` or ``**Label**:``) and
lines may start with list markers. A score may be followed by a period or by
"/5". Labels are matched by name because the rubric prompts do not all list the
scores in the same order.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import TABLE_ORDER, Category, ScoreTriple, word_count

REASONING = "Brief reasoning"
COMPLIANCE = "Instruction Compliance"
CONSISTENCY = "Consistency & Detail Fidelity"
QUALITY = "Visual Quality & Stability"
LABELS = (REASONING, COMPLIANCE, CONSISTENCY, QUALITY)
_FIELDS = {COMPLIANCE: "compliance", CONSISTENCY: "consistency", QUALITY: "quality"}


class JudgeParseError(ValueError):
    """A required line is missing or unreadable; ``line`` names it."""

    def __init__(self, msg, line: str):
        super().__init__(msg)
        self.line = line


class ScoreRangeError(JudgeParseError):
    pass


class DataError(ValueError):
    pass


def _label_pattern(label: str) -> re.Pattern:
    parts = [r"\s+".join(map(re.escape, part.split())) for part in label.split("&")]
    words = r"\s*(?:&|and)\s*".join(parts)
    return re.compile(r"^\s*(?:[-*>]\s+|\d+[.)]\s+)?\**\s*" + words + r"\s*\**\s*:\s*\**\s*(?P<value>.*?)\s*$", re.I)


_PATTERNS = {label: _label_pattern(label) for label in LABELS}
_SCORE = re.compile(r"^\**\s*(?P<n>[+-]?\d+(?:\.\d+)?)\s*(?:/\s*5)?\s*\**\s*\.?\s*\**$")


@dataclass(frozen=True)
class JudgeResponse:
    raw: str
    parsed: Optional[ScoreTriple] = None
    error: str = ""

    @classmethod
    def from_raw(cls, raw: str) -> "JudgeResponse":
        try:
            return cls(raw, parse_judge_response(raw))
        except JudgeParseError as exc:
            return cls(raw, None, f"{type(exc).__name__}: {exc}")


def parse_judge_response(raw: str) -> ScoreTriple:
    found: dict[str, str] = {}
    for line in raw.splitlines():
        for label, pat in _PATTERNS.items():
            m = pat.match(line)
            if m and label not in found:
                found[label] = m.group("value")
                break
    for label in LABELS:
        if label not in found:
            raise JudgeParseError(f"missing line {label!r}", label)
    scores = {}
    for label, name in _FIELDS.items():
        m = _SCORE.match(found[label])
        if not m:
            raise JudgeParseError(f"{label}: not a number: {found[label]!r}", label)
        text = m.group("n")
        if "." in text and float(text) != int(float(text)):
            raise ScoreRangeError(f"{label}: score {text} is not an integer", label)
        value = int(float(text))
        if not 1 <= value <= 5:
            raise ScoreRangeError(f"{label}: score {value} outside 1..5", label)
        scores[name] = value
    return ScoreTriple(reasoning=found[REASONING].strip().strip("*").strip(), **scores)


def serialize_judge_response(t: ScoreTriple) -> str:
    reasoning = t.reasoning or "-"
    return (
        f"{REASONING}: {reasoning}\n{COMPLIANCE}: {t.compliance}\n"
        f"{CONSISTENCY}: {t.consistency}\n{QUALITY}: {t.quality}"
    )


def enforce_compliance_cap(t: ScoreTriple) -> ScoreTriple:
    """Clamp consistency and quality to at most compliance; flag if anything moved."""
    c = min(t.consistency, t.compliance)
    q = min(t.quality, t.compliance)
    clamped = (c, q) != (t.consistency, t.quality)
    return t.replace(consistency=c, quality=q, cap_violated=t.cap_violated or clamped)


def pair_mean_score(t: ScoreTriple) -> float:
    return (t.compliance + t.consistency + t.quality) / 3.0


def pair_min_score(t: ScoreTriple) -> int:
    return min(t.scores())


@dataclass
class RetentionReport:
    threshold: float
    mode: str
    kept: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    exempt: dict = field(default_factory=dict)
    cap_violations: int = 0

    @property
    def total_kept(self) -> int:
        return sum(self.kept.values()) + sum(self.exempt.values())

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "mode": self.mode,
            "kept": dict(sorted(self.kept.items())),
            "dropped": dict(sorted(self.dropped.items())),
            "exempt": dict(sorted(self.exempt.items())),
            "cap_violations": self.cap_violations,
            "total_kept": self.total_kept,
        }


def _category_name(pair) -> str:
    cat = getattr(pair, "category", None)
    if cat is None and isinstance(pair, Mapping):
        cat = pair.get("category")
    return cat.value if isinstance(cat, Category) else str(cat)


def retain(scored: Iterable, threshold: float = 3.0, mode: str = "mean", exempt: Sequence = ()) -> tuple[list, RetentionReport]:
    """Keep ``(pair, triple)`` items whose score reaches ``threshold`` (inclusive).

    ``mode`` is "mean" (mean of the three capped scores) or "min" (lowest
    dimension). Items whose category is in ``exempt`` bypass scoring and are
    kept; pass them with a None triple.
    """
    if mode not in ("mean", "min"):
        raise ValueError("mode must be 'mean' or 'min'")
    score = pair_mean_score if mode == "mean" else pair_min_score
    exempt = {c.value if isinstance(c, Category) else str(c) for c in exempt}
    report = RetentionReport(threshold, mode)
    kept = []
    for pair, triple in scored:
        cat = _category_name(pair)
        if cat in exempt:
            report.exempt[cat] = report.exempt.get(cat, 0) + 1
            kept.append((pair, triple))
            continue
        if triple.cap_violated:
            report.cap_violations += 1
        if score(triple) >= threshold:
            report.kept[cat] = report.kept.get(cat, 0) + 1
            kept.append((pair, triple))
        else:
            report.dropped[cat] = report.dropped.get(cat, 0) + 1
    return kept, report


@dataclass(frozen=True)
class LabeledPair:
    pair_id: str
    human_positive: bool

    @classmethod
    def from_human_scores(cls, pair_id: str, scores: Sequence[float]) -> "LabeledPair":
        return cls(pair_id, float(np.mean(scores)) > 3)


def judge_accuracy(labels: Sequence[LabeledPair], judged: Mapping[str, ScoreTriple]) -> float:
    """Fraction of labeled pairs where (mean judge score > 3) agrees with the human label."""
    if not labels:
        raise DataError("no labeled pairs")
    hits = 0
    for lab in labels:
        if lab.pair_id not in judged:
            raise DataError(f"no judgment for pair {lab.pair_id!r}")
        hits += (pair_mean_score(judged[lab.pair_id]) > 3) == lab.human_positive
    return hits / len(labels)


def scored_record(pair_id: str, category, t: ScoreTriple) -> dict:
    return {
        "pair_id": pair_id,
        "category": category.value if isinstance(category, Category) else str(category),
        "scores": {"compliance": t.compliance, "consistency": t.consistency, "quality": t.quality},
        "reasoning": t.reasoning,
        "cap_violated": t.cap_violated,
        "mean": pair_mean_score(t),
    }


# --- dataset statistics -----------------------------------------------------


@dataclass
class DatasetStats:
    counts: dict
    ratios: dict
    mean_instruction_words: float
    frame_histogram: dict
    instruction_lengths: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "ratios": self.ratios,
            "mean_instruction_words": self.mean_instruction_words,
            "frame_histogram": {str(k): v for k, v in sorted(self.frame_histogram.items())},
            "total": sum(self.counts.values()),
        }


def ratios_from_counts(counts: Mapping) -> dict:
    total = sum(counts.values())
    if total <= 0:
        raise DataError("counts sum to zero")
    return {k: v / total for k, v in counts.items()}


def compute_dataset_stats(pairs: Sequence) -> DatasetStats:
    """Per-category counts and ratios, mean instruction word count, source frame-count histogram.

    ``pairs`` holds EditPair objects or manifest records (dicts with
    ``category``, ``instruction`` and optionally ``frames``).
    """
    if not pairs:
        raise DataError("empty manifest")
    counts: Counter = Counter()
    lengths = []
    frames: Counter = Counter()
    for p in pairs:
        if isinstance(p, Mapping):
            cat, text, n = p["category"], p["instruction"], p.get("frames")
        else:
            cat, text, n = p.category.value, p.instruction, p.source.num_frames
        counts[Category.parse(cat).value if not isinstance(cat, Category) else cat.value] += 1
        lengths.append(word_count(text))
        if n is not None:
            frames[int(n)] += 1
    ordered = {c.value: counts[c.value] for c in TABLE_ORDER if counts[c.value]}
    return DatasetStats(ordered, ratios_from_counts(ordered), float(np.mean(lengths)), dict(frames), lengths)


def stats_from_counts(counts: Mapping) -> DatasetStats:
    """Statistics for a corpus known only by its category counts."""
    counts = {Category.parse(k).value if not isinstance(k, Category) else k.value: int(v) for k, v in counts.items()}
    return DatasetStats(counts, ratios_from_counts(counts), float("nan"), {})


def write_scored_manifest(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
