"""Breakdowns of evaluation results: by session length, item popularity,
price bucket, prediction/truth frequency correlation, and intra-session
content similarity."""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .evaluation import EvalReport, SessionRecord, TopKList, Truth
from .ingest import PAGEVIEW, SessionEventLog, product_interactions

LENGTH_EDGES = (1, 2, 3, 5, 9, 17)
POPULARITY_BUCKETS = (("new", 0, 0), ("1-4", 1, 4), ("5-49", 5, 49), ("50+", 50, None))
SIMILARITY_LENGTH_EDGES = (2, 3, 5, 9)


def bucket_label(value: int, edges: Sequence[int]) -> str | None:
    """Label of the half-open bucket ``[edges[i], edges[i+1])`` holding ``value``.

    The last bucket is open-ended; values below ``edges[0]`` get ``None``.
    """
    if value < edges[0]:
        return None
    for lo, hi in zip(edges, edges[1:]):
        if value < hi:
            return str(lo) if hi - lo == 1 else f"{lo}-{hi - 1}"
    return f"{edges[-1]}+"


def _bucket_order(edges: Sequence[int]) -> list[str]:
    return [bucket_label(e, edges) for e in edges]


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _group_rows(groups: Mapping[str, list[SessionRecord]], order: Sequence[str],
                extra: Callable[[list[SessionRecord]], dict] | None = None) -> list[dict]:
    rows = []
    for label in order:
        recs = groups.get(label)
        if not recs:
            continue
        rr = [r.rr for r in recs if r.rr is not None]
        f1 = [r.f1 for r in recs if r.f1 is not None]
        row = {"bucket": label, "sessions": len(recs), "mrr_sessions": len(rr), "mrr": _mean(rr),
               "f1_sessions": len(f1), "f1": _mean(f1)}
        if extra is not None:
            row.update(extra(recs))
        rows.append(row)
    return rows


def analyze_by_session_length(report: EvalReport, lengths: Mapping[str, int],
                              popularity: Mapping[str, int] | None = None,
                              edges: Sequence[int] = LENGTH_EDGES) -> list[dict]:
    """MRR, F1 and mean next-item popularity per input-length bucket.

    ``lengths`` maps session id to the number of input events. Empty buckets
    are left out rather than zero-filled.
    """
    groups: dict[str, list[SessionRecord]] = defaultdict(list)
    for r in report.records:
        label = bucket_label(lengths[r.session_id], edges)
        if label is not None:
            groups[label].append(r)

    def pop(recs):
        if popularity is None:
            return {}
        vals = [popularity.get(r.next_item, 0) for r in recs if r.next_item is not None]
        return {"mean_next_item_popularity": _mean(vals)}

    return _group_rows(groups, _bucket_order(edges), pop)


def frequency_bucket(count: int) -> str:
    for label, lo, hi in POPULARITY_BUCKETS:
        if count >= lo and (hi is None or count <= hi):
            return label
    raise ValueError(f"negative count {count}")


def mrr_by_popularity_bucket(report: EvalReport, frequency: Mapping[str, int]) -> list[dict]:
    """MRR per next-item frequency bucket {new, 1-4, 5-49, 50+}.

    ``frequency`` counts each item's interactions in everything the model was
    trained on; an absent item is 'new'.
    """
    groups: dict[str, list[SessionRecord]] = defaultdict(list)
    for r in report.records:
        if r.next_item is not None:
            groups[frequency_bucket(frequency.get(r.next_item, 0))].append(r)
    return _group_rows(groups, [b[0] for b in POPULARITY_BUCKETS])


def mrr_by_price_bucket(report: EvalReport, price_of: Mapping[str, int]) -> list[dict]:
    """MRR per price bucket of the true next item (0 means no price known)."""
    groups: dict[str, list[SessionRecord]] = defaultdict(list)
    for r in report.records:
        if r.next_item is not None:
            groups[str(price_of.get(r.next_item, 0))].append(r)
    order = sorted(groups, key=int)
    return _group_rows(groups, order)


def weighted_mrr(rows: Sequence[dict]) -> float:
    """Recombine bucket rows into the overall MRR."""
    n = sum(r["mrr_sessions"] for r in rows)
    return sum(r["mrr"] * r["mrr_sessions"] for r in rows if r["mrr_sessions"]) / n if n else 0.0


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        warnings.warn("zero variance in frequency counts; correlation undefined", RuntimeWarning, stacklevel=3)
        return float("nan")
    return float(a @ b) / den


def frequency_correlation(predictions: Sequence[TopKList], truths: Mapping[str, Truth],
                          top_n: int = 50) -> tuple[float, float]:
    """Pearson correlation between how often each item is the true next item
    and how often it is the rank-1 prediction.

    Returns (over the ``top_n`` most frequent true next items, over all items).
    Zero variance gives NaN with a warning.
    """
    truth_counts: Counter = Counter()
    pred_counts: Counter = Counter()
    for p in predictions:
        t = truths.get(p.session_id)
        if t is None or t.next_item is None:
            continue
        truth_counts[t.next_item] += 1
        if p.items:
            pred_counts[p.items[0]] += 1
    items = sorted(set(truth_counts) | set(pred_counts))
    if len(items) < 2:
        raise ValueError("need at least 2 distinct items for a correlation")
    truth_v = np.array([truth_counts[i] for i in items], dtype=np.float64)
    pred_v = np.array([pred_counts[i] for i in items], dtype=np.float64)
    order = sorted(range(len(items)), key=lambda i: (-truth_v[i], items[i]))[:top_n]
    return _pearson(truth_v[order], pred_v[order]), _pearson(truth_v, pred_v)


# --------------------------------------------------------------------------
# content similarity within sessions


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def mean_pairwise_cosine(vectors: Sequence[np.ndarray]) -> float:
    if len(vectors) < 2:
        raise ValueError("need at least 2 vectors")
    return float(np.mean([cosine(a, b) for a, b in combinations(vectors, 2)]))


@dataclass
class SimilarityReport:
    per_session: list[dict]
    skipped: int
    histograms: dict[str, dict]
    per_length: list[dict]
    counted: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def intra_session_similarity(log: SessionEventLog, bins: int = 20,
                             length_edges: Sequence[int] = SIMILARITY_LENGTH_EDGES) -> SimilarityReport:
    """Mean pairwise cosine of description and image vectors within each session.

    Session length is the number of distinct products carrying both vectors;
    sessions with fewer than two are skipped and counted.
    """
    products: dict[str, list[str]] = defaultdict(list)
    for sid, _, sku in sorted(product_interactions(log), key=lambda r: (r[0], r[1])):
        products[sid].append(sku)
    per_session = []
    skipped = 0
    for sid in sorted(products):
        recs = [log.skus.get(s) for s in dict.fromkeys(products[sid])]
        recs = [r for r in recs if r is not None and r.description_vector and r.image_vector]
        if len(recs) < 2:
            skipped += 1
            continue
        per_session.append({
            "session_id": sid,
            "length": len(recs),
            "description": mean_pairwise_cosine([np.asarray(r.description_vector) for r in recs]),
            "image": mean_pairwise_cosine([np.asarray(r.image_vector) for r in recs]),
        })
    hist = {}
    for key in ("description", "image"):
        counts, edges = np.histogram([r[key] for r in per_session], bins=bins, range=(-1.0, 1.0))
        hist[key] = {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}
    groups: dict[str, list[dict]] = defaultdict(list)
    for r in per_session:
        groups[bucket_label(r["length"], length_edges)].append(r)
    per_length = [
        {"bucket": label, "sessions": len(groups[label]),
         "description": _mean([r["description"] for r in groups[label]]),
         "image": _mean([r["image"] for r in groups[label]])}
        for label in _bucket_order(length_edges) if groups.get(label)
    ]
    return SimilarityReport(per_session, skipped, hist, per_length,
                            {"sessions": len(per_session), "skipped": skipped})


def strictly_decreasing(values: Sequence[float]) -> bool:
    return all(a > b for a, b in zip(values, values[1:]))


# --------------------------------------------------------------------------
# persistence


def write_csv(rows: Sequence[dict], path) -> None:
    """One table per file; columns follow the first row's keys."""
    path = Path(path)
    with path.open("w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n")


def sku_price_buckets(log: SessionEventLog) -> dict[str, int]:
    return {k: int(r.price_bucket or 0) for k, r in log.skus.items()}


def session_lengths(sessions) -> dict[str, int]:
    return {s.session_id: len(s.events) for s in sessions}


def pageview_share(log: SessionEventLog) -> float:
    n = len(log.browsing)
    return sum(e.event_kind == PAGEVIEW for e in log.browsing) / n if n else 0.0
