"""Top-K prediction under inference conventions, and MRR / F1 metrics."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import softmax
from .checkpoint import Checkpoint
from .model import SessionTransformer, collate, inference_rows, reserved_ids, session_arrays
from .preprocess import EncodedSession, Vocab

F1_HORIZON = 20


@dataclass
class TopKList:
    session_id: str
    items: list[str]
    scores: list[float]

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise ValueError("items and scores differ in length")
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"duplicate items in list for session {self.session_id}")

    def trimmed(self, k: int) -> "TopKList":
        return TopKList(self.session_id, self.items[:k], self.scores[:k])


def item_index(vocab: Vocab) -> dict:
    """Checkpoint metadata mapping item ids back to external keys."""
    keys = [None] * vocab.size
    for k, i in vocab.item_to_id.items():
        if i > 1:
            keys[i] = k
    return {"item_keys": keys, "item_is_virtual": list(vocab.item_is_virtual)}


def eligible_mask(model: SessionTransformer, is_virtual: Sequence[bool]) -> np.ndarray:
    """Ids that may be recommended: real, non-virtual items."""
    ok = np.zeros(model.config.vocab_size, dtype=bool)
    ok[: len(is_virtual)] = ~np.asarray(is_virtual, dtype=bool)
    ok[reserved_ids(model.config)] = False
    return ok


def rank_scores(scores: np.ndarray, eligible: np.ndarray, k: int) -> np.ndarray:
    """Ids of the top-``k`` eligible scores; ties by ascending id."""
    ids = np.nonzero(eligible)[0]
    s = scores[ids]
    order = np.lexsort((ids, -s))
    return ids[order[:k]]


def predict_topk(model: SessionTransformer | Checkpoint, sessions: Sequence[EncodedSession],
                 k: int = 100, meta: Mapping | None = None, batch_size: int = 256) -> list[TopKList]:
    """Rank items for the continuation of each (first-half) session.

    Event-kind context is set to a product event and the infrequent flag to
    'frequent'. Reserved ids and virtual items are filtered out. Scores are
    softmax probabilities over the full vocabulary.
    """
    if isinstance(model, Checkpoint):
        meta = model.meta if meta is None else meta
        model = model.build_model()
    if meta is None or "item_keys" not in meta:
        raise ValueError("item index metadata required to map ids to items")
    keys = meta["item_keys"]
    eligible = eligible_mask(model, meta["item_is_virtual"])
    out: list[TopKList] = []
    for start in range(0, len(sessions), batch_size):
        chunk = sessions[start : start + batch_size]
        for s in chunk:
            if not s.events:
                raise ValueError(f"empty input session {s.session_id!r}")
        rows, pos = inference_rows([session_arrays(s, model.config) for s in chunk], model.config)
        logits = model.next_item_logits(collate(rows), pos)
        probs = softmax(logits.astype(np.float64), axis=-1)
        for s, p in zip(chunk, probs):
            top = rank_scores(p, eligible, k)
            out.append(TopKList(s.session_id, [keys[i] for i in top], [float(p[i]) for i in top]))
    return out


def popularity_topk(counts: Mapping[str, int], session_ids: Iterable[str], k: int = 100,
                    exclude: Iterable[str] = ()) -> list[TopKList]:
    """Same most-popular list for every session (baseline)."""
    skip = set(exclude)
    ranked = sorted(((c, key) for key, c in counts.items() if key not in skip and c > 0),
                    key=lambda t: (-t[0], t[1]))[:k]
    total = sum(c for c, _ in ranked) or 1
    items = [key for _, key in ranked]
    scores = [c / total for c, _ in ranked]
    return [TopKList(sid, list(items), list(scores)) for sid in session_ids]


# --------------------------------------------------------------------------
# ground truth and metrics


@dataclass
class Truth:
    next_item: str | None
    items: list[str]


def ground_truth(hidden: EncodedSession, horizon: int = F1_HORIZON) -> Truth:
    """Next product and the distinct products within ``horizon`` events of the hidden half."""
    products = [e.item_key for e in hidden.events if not e.is_virtual]
    window = [e.item_key for e in hidden.events[:horizon] if not e.is_virtual]
    return Truth(products[0] if products else None, list(dict.fromkeys(window)))


def reciprocal_rank(ranked: Sequence[str], truth: str, cutoff: int = 20) -> float:
    top = list(ranked[:cutoff])
    return 1.0 / (top.index(truth) + 1) if truth in top else 0.0


def mrr(predictions: Sequence[Sequence[str]], truths: Sequence[str | None], cutoff: int = 20) -> float:
    """Mean reciprocal rank; sessions without a next item are excluded."""
    rr = [reciprocal_rank(p, t, cutoff) for p, t in zip(predictions, truths, strict=True) if t is not None]
    if not rr:
        raise ValueError("no session has a ground-truth next item")
    return float(np.mean(rr))


def f1_components(ranked: Sequence[str], truth: Iterable[str], k: int = F1_HORIZON) -> tuple[float, float, float]:
    predicted = set(list(dict.fromkeys(ranked))[:k])
    truth = set(truth)
    hit = len(predicted & truth)
    precision = hit / len(predicted) if predicted else 0.0
    recall = hit / len(truth) if truth else 0.0
    f1 = 0.0 if hit == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def f1_at_k(predictions: Sequence[Sequence[str]], truths: Sequence[Iterable[str]], k: int = F1_HORIZON) -> float:
    """Macro (per-session) F1 between top-k and the truth set; empty truth sets excluded."""
    vals = []
    for p, t in zip(predictions, truths, strict=True):
        t = list(t)
        if t:
            vals.append(f1_components(p, t, k)[2])
    if not vals:
        raise ValueError("no session has a non-empty truth set")
    return float(np.mean(vals))


@dataclass
class SessionRecord:
    session_id: str
    next_item: str | None
    rank: int | None
    rr: float | None
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class EvalReport:
    mrr: float
    f1: float
    records: list[SessionRecord] = field(default_factory=list)
    excluded_mrr: int = 0
    excluded_f1: int = 0
    missing_predictions: int = 0
    mrr_cutoff: int = 20
    f1_k: int = F1_HORIZON

    def summary(self) -> dict:
        return {
            "mrr": self.mrr, "f1": self.f1, "sessions": len(self.records),
            "excluded_mrr": self.excluded_mrr, "excluded_f1": self.excluded_f1,
            "missing_predictions": self.missing_predictions,
            "mrr_cutoff": self.mrr_cutoff, "f1_k": self.f1_k,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["records"] = [asdict(r) for r in self.records]
        return d


def evaluate(predictions: Sequence[TopKList], truths: Mapping[str, Truth],
             cutoff: int = 20, k: int = F1_HORIZON) -> EvalReport:
    by_id = {p.session_id: p for p in predictions}
    records = []
    ex_mrr = ex_f1 = missing = 0
    for sid in sorted(truths):
        t = truths[sid]
        pred = by_id.get(sid)
        if pred is None:
            missing += 1
            continue
        rank = rr = prec = rec = f1 = None
        if t.next_item is None:
            ex_mrr += 1
        else:
            top = pred.items[:cutoff]
            rank = top.index(t.next_item) + 1 if t.next_item in top else None
            rr = 1.0 / rank if rank else 0.0
        if not t.items:
            ex_f1 += 1
        else:
            prec, rec, f1 = f1_components(pred.items, t.items, k)
        records.append(SessionRecord(sid, t.next_item, rank, rr, prec, rec, f1))
    rrs = [r.rr for r in records if r.rr is not None]
    f1s = [r.f1 for r in records if r.f1 is not None]
    return EvalReport(
        mrr=float(np.mean(rrs)) if rrs else 0.0,
        f1=float(np.mean(f1s)) if f1s else 0.0,
        records=records, excluded_mrr=ex_mrr, excluded_f1=ex_f1, missing_predictions=missing,
        mrr_cutoff=cutoff, f1_k=k,
    )


def next_item_accuracy(model: SessionTransformer, sessions: Sequence[EncodedSession], meta: Mapping) -> float:
    """Fraction of prefixes (length 1..n-1) whose top-1 recommendation is the next item."""
    prefixes, targets = [], []
    for s in sessions:
        for t in range(1, len(s.events)):
            prefixes.append(EncodedSession(s.session_id, s.events[:t], s.split_tag, s.fold, s.search_mean))
            targets.append(s.events[t].item_key)
    if not prefixes:
        raise ValueError("no prefixes to score")
    top = predict_topk(model, prefixes, k=1, meta=meta)
    return float(np.mean([bool(p.items) and p.items[0] == t for p, t in zip(top, targets)]))


# --------------------------------------------------------------------------
# persistence

HEADER_KEY = "header"


def write_topk(lists: Iterable[TopKList], path, k: int | None = None, meta: Mapping | None = None) -> str:
    """JSON-lines, one header line then one list per session sorted by id.

    Returns the SHA-256 of the file bytes.
    """
    rows = sorted(lists, key=lambda t: t.session_id)
    header = {HEADER_KEY: {"format": "topk", "version": 1, "k": k, **(meta or {})}}
    lines = [json.dumps(header, sort_keys=True)]
    for t in rows:
        t = t.trimmed(k) if k else t
        lines.append(json.dumps({"session_id": t.session_id, "items": t.items, "scores": t.scores}))
    blob = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_topk(path) -> list[TopKList]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing predictions file: {p}")
    out = []
    with p.open() as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{p}:{n}: malformed JSON") from e
            if HEADER_KEY in obj:
                continue
            try:
                out.append(TopKList(str(obj["session_id"]), [str(i) for i in obj["items"]],
                                    [float(s) for s in obj["scores"]]))
            except (KeyError, TypeError) as e:
                raise ValueError(f"{p}:{n}: malformed top-k record") from e
    return out


def truths_from_sessions(hidden: Iterable[EncodedSession], horizon: int = F1_HORIZON) -> dict[str, Truth]:
    return {s.session_id: ground_truth(s, horizon) for s in hidden}


def item_counts(sessions: Iterable[EncodedSession], products_only: bool = True) -> Counter:
    c: Counter = Counter()
    for s in sessions:
        for e in s.events:
            if not (products_only and e.is_virtual):
                c[e.item_key] += e.num_interactions
    return c


def safe_float(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
