"""Weighted score-sum fusion of per-model top-K lists."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .evaluation import TopKList, Truth, evaluate, read_topk, write_topk

NORMALIZATIONS = ("none", "softmax-prob", "min-max")


@dataclass
class EnsembleConfig:
    members: list[tuple[str, float]] = field(default_factory=list)
    k: int = 100
    norm: str = "softmax-prob"

    def __post_init__(self):
        self.members = [(str(p), float(w)) for p, w in self.members]
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if any(w < 0 or not math.isfinite(w) for _, w in self.members):
            raise ValueError("member weights must be finite and >= 0")
        if all(w == 0 for _, w in self.members):
            raise ValueError("member weights are all zero")
        if self.norm not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.norm!r}; choose from {NORMALIZATIONS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def parse_member(spec: str) -> tuple[str, float]:
    """``path:weight`` (weight defaults to 1)."""
    path, sep, weight = spec.rpartition(":")
    if not sep:
        return spec, 1.0
    try:
        return path, float(weight)
    except ValueError:
        return spec, 1.0


def normalize(scores: Sequence[float], how: str) -> list[float]:
    """Rescale one list's scores before summation."""
    if how == "none" or not scores:
        return list(scores)
    if how == "softmax-prob":
        # truncated probabilities no longer sum to one; renormalize over what was kept
        total = sum(scores)
        return [s / total for s in scores] if total > 0 else [0.0] * len(scores)
    if how == "min-max":
        lo, hi = min(scores), max(scores)
        return [(s - lo) / (hi - lo) for s in scores] if hi > lo else [1.0] * len(scores)
    raise ValueError(f"unknown normalization {how!r}")


def merge(members: Sequence[tuple[Sequence[TopKList], float]], k: int = 100,
          norm: str = "softmax-prob") -> list[TopKList]:
    """Per session, score(item) = sum of weight * normalized member score.

    Items absent from a member's list contribute 0 for that member. Every
    member must cover the same sessions. Ties go to the smaller item key.
    """
    if not members:
        raise ValueError("an ensemble needs at least one member")
    by_member = [{t.session_id: t for t in lists} for lists, _ in members]
    all_ids = set().union(*by_member)
    problems = []
    for i, m in enumerate(by_member):
        missing = sorted(all_ids - set(m))
        if missing:
            problems.append(f"member {i} lacks {len(missing)} sessions: {missing[:10]}")
    if problems:
        raise ValueError("members cover different sessions; " + "; ".join(problems))
    if not all_ids and any(lists for lists, _ in members):
        raise ValueError("no common sessions")
    out = []
    for sid in sorted(all_ids):
        total: dict[str, float] = defaultdict(float)
        for m, (_, weight) in zip(by_member, members):
            t = m[sid]
            for item, s in zip(t.items, normalize(t.scores, norm)):
                total[item] += weight * s
        ranked = sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
        out.append(TopKList(sid, [i for i, _ in ranked], [s for _, s in ranked]))
    return out


def merge_files(config: EnsembleConfig) -> list[TopKList]:
    members = [(read_topk(path), w) for path, w in config.members]
    return merge(members, config.k, config.norm)


def write_submission(lists: Sequence[TopKList], path, k: int | None = None) -> str:
    """Stable JSON-lines output sorted by session id; returns the file digest."""
    return write_topk(lists, path, k=k, meta={"kind": "submission"})


def member_metrics(members: Sequence[tuple[str, Sequence[TopKList]]], merged: Sequence[TopKList],
                   truths: Mapping[str, Truth], cutoff: int = 20, k: int = 20) -> list[dict]:
    """MRR and F1 of each member and of the merged lists."""
    rows = []
    for name, lists in list(members) + [("ensemble", merged)]:
        s = evaluate(lists, truths, cutoff, k).summary()
        rows.append({"member": name, "mrr": s["mrr"], "f1": s["f1"], "sessions": s["sessions"]})
    return rows
