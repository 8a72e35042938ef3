"""Record-level curation of two-shot training clips.

Scores (similarities, aesthetics, VLM verdicts) are produced upstream by
feature extractors and arrive here as numbers on each :class:`ClipRecord`.
This module decides keep/drop, validates hierarchical captions, summarizes
kept clips, and draws the seeded real/synthetic training mix.

All threshold comparisons are inclusive on the keep side: a value exactly at
a minimum or maximum is kept.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .errors import DomainError, LoadError

TRANSITION_TYPES = ("shot_reverse_shot", "cut_in", "cut_out", "multi_angle")
SOURCE_TAGS = ("real", "synthetic")

_SIMILARITY_FIELDS = ("first_last_frame_similarity", "stitch_similarity", "clip_pair_similarity")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    duration_seconds: float
    fps: float
    width: int
    height: int
    shot_count: int
    aesthetic_score: float
    boundary_aesthetic_score: float
    first_last_frame_similarity: float
    stitch_similarity: float
    clip_pair_similarity: float
    vlm_coherence_pass: bool
    source_tag: str = "real"

    def __post_init__(self):
        for name in _SIMILARITY_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise LoadError(f"clip {self.clip_id}: {name}={v} outside [0, 1]")
        if not self.duration_seconds > 0:
            raise LoadError(f"clip {self.clip_id}: duration must be positive")
        if self.shot_count < 1:
            raise LoadError(f"clip {self.clip_id}: shot_count must be at least 1")
        if self.source_tag not in SOURCE_TAGS:
            raise LoadError(f"clip {self.clip_id}: source_tag must be one of {SOURCE_TAGS}")
        for name in ("aesthetic_score", "boundary_aesthetic_score", "fps"):
            if not math.isfinite(getattr(self, name)):
                raise LoadError(f"clip {self.clip_id}: {name} is not finite")

    @classmethod
    def from_dict(cls, d: dict) -> "ClipRecord":
        if not isinstance(d, dict):
            raise LoadError("record must be a JSON object")
        kinds = {"clip_id": str, "width": int, "height": int, "shot_count": int,
                 "vlm_coherence_pass": bool, "source_tag": str}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                if f.name == "source_tag":
                    continue
                raise LoadError(f"record {d.get('clip_id', '?')}: missing field {f.name}")
            v = d[f.name]
            want = kinds.get(f.name, float)
            if want is float:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
                v = float(v) if ok else v
            elif want is int:
                ok = isinstance(v, int) and not isinstance(v, bool)
            else:
                ok = isinstance(v, want)
            if not ok:
                raise LoadError(f"record {d.get('clip_id', '?')}: field {f.name} has bad value {v!r}")
            kwargs[f.name] = v
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ShotCaption:
    content: str
    cinematography: str


@dataclass(frozen=True)
class HierarchicalCaption:
    subject: str
    overall: str
    shots: tuple[ShotCaption, ...]
    transition_type: str
    transition_description: str

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchicalCaption":
        try:
            shots = tuple(ShotCaption(str(s["content"]), str(s["cinematography"])) for s in d["shots"])
            return cls(str(d["subject"]), str(d["overall"]), shots,
                       str(d["transition_type"]), str(d["transition_description"]))
        except (KeyError, TypeError) as exc:
            raise LoadError(f"bad caption: {exc!r}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def validate_caption(caption: HierarchicalCaption, shot_count: int) -> list[str]:
    problems = []
    for name in ("subject", "overall", "transition_description"):
        if not getattr(caption, name).strip():
            problems.append(f"{name}: empty")
    if len(caption.shots) != shot_count:
        problems.append(f"shots: expected {shot_count} entries, got {len(caption.shots)}")
    for i, s in enumerate(caption.shots):
        if not s.content.strip():
            problems.append(f"shots[{i}].content: empty")
        if not s.cinematography.strip():
            problems.append(f"shots[{i}].cinematography: empty")
    if caption.transition_type not in TRANSITION_TYPES:
        problems.append(
            f"transition_type: {caption.transition_type!r} not one of {', '.join(TRANSITION_TYPES)}"
        )
    return problems


@dataclass(frozen=True)
class CurationThresholds:
    # applied by the upstream shot detector; kept for provenance only
    segmentation: float = 0.45
    first_last_similarity_min: float = 0.90
    stitching: float = 0.65
    pair_similarity_max: float = 0.95
    duration_min: float = 5.0
    duration_max: float = 12.0
    required_shot_count: int = 2
    # on a 0-10 aesthetic scale; the cutoff itself is a local choice
    aesthetic_min: float = 5.0
    boundary_aesthetic_min: float = 5.0
    aesthetic_scale_max: float = 10.0
    # optional coarse checks; None disables the rule
    fps_min: float | None = None
    min_short_side: int | None = None

    def __post_init__(self):
        if not self.duration_min < self.duration_max:
            raise DomainError("duration_min must be below duration_max")
        for name in ("segmentation", "first_last_similarity_min", "stitching", "pair_similarity_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")
        if self.required_shot_count < 1:
            raise DomainError("required_shot_count must be at least 1")

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "CurationThresholds":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise DomainError(f"unknown threshold {key!r}")
            if raw is None or (isinstance(raw, str) and raw.lower() == "none"):
                kwargs[key] = None
            elif key in ("required_shot_count", "min_short_side"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FailedRule:
    rule: str
    value: Any
    threshold: Any


@dataclass(frozen=True)
class FilterReport:
    clip_id: str
    failed_rules: tuple[FailedRule, ...] = ()

    @property
    def verdict(self) -> str:
        return "drop" if self.failed_rules else "keep"

    @property
    def kept(self) -> bool:
        return not self.failed_rules

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "verdict": self.verdict,
            "failed_rules": [asdict(r) for r in self.failed_rules],
        }


def rule_table(thresholds: CurationThresholds):
    """Ordered ``(rule_id, field, predicate, threshold)`` entries."""
    t = thresholds
    rules = [
        ("first_last_similarity_min", "first_last_frame_similarity", lambda v: v >= t.first_last_similarity_min, t.first_last_similarity_min),
        ("stitching", "stitch_similarity", lambda v: v >= t.stitching, t.stitching),
        ("duration_min", "duration_seconds", lambda v: v >= t.duration_min, t.duration_min),
        ("duration_max", "duration_seconds", lambda v: v <= t.duration_max, t.duration_max),
    ]
    if t.fps_min is not None:
        rules.append(("fps_min", "fps", lambda v: v >= t.fps_min, t.fps_min))
    if t.min_short_side is not None:
        rules.append(("min_short_side", "short_side", lambda v: v >= t.min_short_side, t.min_short_side))
    rules += [
        ("required_shot_count", "shot_count", lambda v: v == t.required_shot_count, t.required_shot_count),
        ("aesthetic_min", "aesthetic_score", lambda v: v >= t.aesthetic_min, t.aesthetic_min),
        ("boundary_aesthetic_min", "boundary_aesthetic_score", lambda v: v >= t.boundary_aesthetic_min, t.boundary_aesthetic_min),
        ("pair_similarity_max", "clip_pair_similarity", lambda v: v <= t.pair_similarity_max, t.pair_similarity_max),
        ("vlm_coherence", "vlm_coherence_pass", lambda v: v is True, True),
    ]
    return rules


def apply_filters(
    record: ClipRecord,
    caption: HierarchicalCaption | None,
    thresholds: CurationThresholds,
) -> FilterReport:
    """Evaluate every rule (no short-circuit) and collect the failures."""
    failed = []
    for rule, name, ok, threshold in rule_table(thresholds):
        value = min(record.width, record.height) if name == "short_side" else getattr(record, name)
        if not ok(value):
            failed.append(FailedRule(rule, value, threshold))
    if caption is not None:
        problems = validate_caption(caption, record.shot_count)
        if problems:
            failed.append(FailedRule("caption_schema", problems, None))
    return FilterReport(record.clip_id, tuple(failed))


def curate(records: Sequence[ClipRecord], captions: dict[str, HierarchicalCaption] | None,
           thresholds: CurationThresholds) -> tuple[list[FilterReport], dict]:
    """Filter a batch; returns per-clip reports and a summary document."""
    captions = captions or {}
    reports = [apply_filters(r, captions.get(r.clip_id), thresholds) for r in records]
    by_rule: dict[str, int] = {}
    for rep in reports:
        for f in rep.failed_rules:
            by_rule[f.rule] = by_rule.get(f.rule, 0) + 1
    kept = [r for r, rep in zip(records, reports) if rep.kept]
    summary = {
        "total": len(reports),
        "kept": len(kept),
        "dropped": len(reports) - len(kept),
        "failures_by_rule": dict(sorted(by_rule.items())),
        "thresholds": thresholds.to_dict(),
    }
    if kept:
        kept_caps = [captions[r.clip_id] for r in kept if r.clip_id in captions]
        summary["stats"] = dataset_stats(kept, kept_caps or None)
    return reports, summary


# -- statistics -------------------------------------------------------------------

@dataclass(frozen=True)
class StatsBins:
    duration: tuple[float, ...] = tuple(float(x) for x in range(5, 13))
    aesthetic: tuple[float, ...] = tuple(0.5 * i for i in range(21))
    similarity: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(21))


def _summary(values: list[float], edges: Sequence[float]) -> dict:
    counts, _ = np.histogram(values, bins=np.asarray(edges, dtype=float))
    return {
        # fsum is correctly rounded, so the mean does not depend on input order
        "mean": math.fsum(values) / len(values),
        "min": min(values),
        "max": max(values),
        "histogram": {"edges": list(edges), "counts": [int(c) for c in counts]},
    }


def dataset_stats(
    records: Sequence[ClipRecord],
    captions: Sequence[HierarchicalCaption] | None = None,
    bins: StatsBins = StatsBins(),
) -> dict:
    if not records:
        raise DomainError("dataset_stats needs at least one record")
    report = {
        "count": len(records),
        "duration_seconds": _summary([r.duration_seconds for r in records], bins.duration),
        "aesthetic_score": _summary([r.aesthetic_score for r in records], bins.aesthetic),
        "clip_pair_similarity": _summary([r.clip_pair_similarity for r in records], bins.similarity),
    }
    if captions:
        hist = {t: 0 for t in TRANSITION_TYPES}
        for c in captions:
            hist[c.transition_type] = hist.get(c.transition_type, 0) + 1
        report["transition_types"] = hist
    return report


# -- mixing -----------------------------------------------------------------------

def mixing_sampler(
    real: Sequence[Any],
    synthetic: Sequence[Any],
    ratio: tuple[int, int] = (7, 3),
    seed: int = 0,
) -> Iterator[tuple[str, Any]]:
    """Endless seeded stream of ``(source, item)`` draws.

    Each draw picks the real pool with probability ``ratio[0] / sum(ratio)``,
    then an item uniformly with replacement from that pool.
    """
    w_real, w_syn = (int(r) for r in ratio)
    if w_real < 0 or w_syn < 0 or w_real + w_syn == 0:
        raise DomainError(f"ratio must be two nonnegative integers with a positive sum, got {ratio}")
    if (w_real and not real) or (w_syn and not synthetic):
        raise DomainError("cannot sample from an empty pool")
    rng = np.random.default_rng(seed)
    total = w_real + w_syn
    while True:
        if rng.integers(total) < w_real:
            yield "real", real[int(rng.integers(len(real)))]
        else:
            yield "synthetic", synthetic[int(rng.integers(len(synthetic)))]


# -- files ------------------------------------------------------------------------

def _iter_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, Any]]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from None


def read_records(path: str | os.PathLike) -> list[ClipRecord]:
    out = []
    for lineno, doc in _iter_jsonl(path):
        try:
            out.append(ClipRecord.from_dict(doc))
        except LoadError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from None
    return out


def read_captions(path: str | os.PathLike) -> dict[str, HierarchicalCaption]:
    out = {}
    for lineno, doc in _iter_jsonl(path):
        try:
            out[str(doc["clip_id"])] = HierarchicalCaption.from_dict(doc)
        except (LoadError, KeyError, TypeError) as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from None
    return out
