"""Raw event logs to model-ready encoded sessions."""

from __future__ import annotations

import datetime as dt
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import PAGEVIEW, PRODUCT_KINDS, SessionEventLog

PAD_ID = 0
INFREQUENT_ID = 1
SEARCH_CLICK = "search_click"
MAX_LEN = 30
WEEK_MS = 7 * 86_400_000
DAY_MS = 86_400_000

EVENT_KIND_IDS = {k: i + 1 for i, k in enumerate(PRODUCT_KINDS + (PAGEVIEW, SEARCH_CLICK))}
# coarse event type used as the prediction context
CONTEXT_KIND_IDS = {"product": 1, "search": 2, "pageview": 3}
NUM_CONTEXT_KINDS = 4

NUMERIC_FEATURES = ("relative_price", "num_interactions", "recency", "has_detail", "added_to_cart")
SPLIT_TAGS = ("train", "valid_first_half", "valid_second_half", "test_first_half", "test_second_half")


def context_kind(event_kind: str) -> int:
    if event_kind == PAGEVIEW:
        return CONTEXT_KIND_IDS["pageview"]
    if event_kind == SEARCH_CLICK:
        return CONTEXT_KIND_IDS["search"]
    return CONTEXT_KIND_IDS["product"]


@dataclass(frozen=True, slots=True)
class RawEvent:
    session_id: str
    timestamp_ms: int
    event_kind: str
    item_key: str
    is_virtual: bool
    order: int = 0
    num_interactions: int = 1
    has_detail: int = 0
    added_to_cart: int = 0


def augment_sessions(log: SessionEventLog) -> dict[str, list[RawEvent]]:
    """Merge product events, page views (as virtual items) and search clicks per session.

    Sorted by timestamp; ties keep input order (browsing rows first, then
    search clicks). Sessions without events are absent from the result.
    """
    out: dict[str, list[RawEvent]] = defaultdict(list)
    order = 0
    for e in log.browsing:
        virtual = e.event_kind == PAGEVIEW
        key = e.page_url_id if virtual else e.sku
        out[e.session_id].append(RawEvent(e.session_id, e.timestamp_ms, e.event_kind, key, virtual, order))
        order += 1
    for s in log.search:
        for sku in s.clicked_skus:
            out[s.session_id].append(RawEvent(s.session_id, s.timestamp_ms, SEARCH_CLICK, sku, False, order))
            order += 1
    return {sid: sorted(evs, key=lambda r: (r.timestamp_ms, r.order)) for sid, evs in out.items() if evs}


def deduplicate_with_interest(sequence: Sequence[RawEvent]) -> list[RawEvent]:
    """Keep the first event per item and summarise the rest as interest features."""
    first: dict[str, int] = {}
    counts: Counter = Counter()
    detail: set[str] = set()
    cart: set[str] = set()
    for i, e in enumerate(sequence):
        first.setdefault(e.item_key, i)
        counts[e.item_key] += e.num_interactions
        if e.event_kind == "product_detail" or e.has_detail:
            detail.add(e.item_key)
        if e.event_kind == "add_to_cart" or e.added_to_cart:
            cart.add(e.item_key)
    return [
        replace(
            sequence[i],
            num_interactions=counts[key],
            has_detail=int(key in detail),
            added_to_cart=int(key in cart),
        )
        for key, i in sorted(first.items(), key=lambda kv: kv[1])
    ]


# --------------------------------------------------------------------------
# splitting and folds


@dataclass
class SplitPiece:
    session_id: str
    tag: str
    events: list[RawEvent]
    end_ms: int


def split_sessions(
    sessions: dict[str, list[RawEvent]],
    valid_weeks: float = 3,
    test_weeks: float = 0,
) -> tuple[list[SplitPiece], Counter]:
    """Tag sessions by start time and halve valid/test sessions.

    The last ``test_weeks`` of the timeline are test, the ``valid_weeks``
    before that are validation, the rest is training. Held-out sessions are
    cut by event count: the first ``floor(n/2)`` events are the inference
    input, the remainder the hidden ground truth. Held-out sessions with
    fewer than 2 events cannot be halved and are dropped (counted).
    """
    if not sessions:
        raise ValueError("no sessions to split")
    starts = {sid: evs[0].timestamp_ms for sid, evs in sessions.items()}
    t_min = min(starts.values())
    t_max = max(evs[-1].timestamp_ms for evs in sessions.values())
    held_ms = (valid_weeks + test_weeks) * WEEK_MS
    if t_max - t_min <= held_ms:
        raise ValueError(
            f"timeline spans {(t_max - t_min) / WEEK_MS:.2f} weeks, "
            f"need more than {valid_weeks + test_weeks}"
        )
    test_start = t_max - test_weeks * WEEK_MS if test_weeks > 0 else math.inf
    valid_start = t_max - held_ms
    pieces: list[SplitPiece] = []
    dropped: Counter = Counter()
    for sid in sorted(sessions, key=lambda s: (starts[s], s)):
        evs = sessions[sid]
        start = starts[sid]
        if start < valid_start:
            pieces.append(SplitPiece(sid, "train", list(evs), evs[-1].timestamp_ms))
            continue
        kind = "test" if start >= test_start else "valid"
        if len(evs) < 2:
            dropped[kind] += 1
            continue
        half = len(evs) // 2
        pieces.append(SplitPiece(sid, f"{kind}_first_half", evs[:half], evs[half - 1].timestamp_ms))
        pieces.append(SplitPiece(sid, f"{kind}_second_half", evs[half:], evs[-1].timestamp_ms))
    return pieces, dropped


@dataclass
class FoldPlan:
    folds: dict[str, int]
    k: int = 5

    def sessions_in(self, fold: int) -> list[str]:
        return [s for s, f in self.folds.items() if f == fold]

    def sizes(self) -> list[int]:
        c = Counter(self.folds.values())
        return [c.get(i, 0) for i in range(self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "folds": dict(sorted(self.folds.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(folds={str(k): int(v) for k, v in d["folds"].items()}, k=int(d["k"]))


def assign_folds(session_ids: Iterable[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Balanced, seeded assignment of sessions to ``k`` folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    ids = sorted(set(session_ids))
    if len(ids) < k:
        raise ValueError(f"{len(ids)} sessions cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan({ids[j]: i % k for i, j in enumerate(perm)}, k)


# --------------------------------------------------------------------------
# vocab and feature statistics


@dataclass
class Vocab:
    item_to_id: dict[str, int]
    item_is_virtual: list[bool]
    category_to_id: dict[str, int]
    subcategory_to_id: dict[str, int]
    event_kind_to_id: dict[str, int] = field(default_factory=lambda: dict(EVENT_KIND_IDS))
    num_price_buckets: int = 1

    @property
    def size(self) -> int:
        """Number of item ids including the reserved 0 and 1."""
        return len(self.item_is_virtual)

    @property
    def mask_token_id(self) -> int:
        return self.size

    def item_id(self, key: str) -> int:
        return self.item_to_id.get(key, INFREQUENT_ID)

    def id_to_item(self) -> dict[int, str]:
        return {i: k for k, i in self.item_to_id.items() if i > INFREQUENT_ID}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(**d)


@dataclass
class FeatureStats:
    means: dict[str, float]
    stds: dict[str, float]
    dropped: list[str]
    price_means: dict[str, float]
    first_seen: dict[str, int]

    @property
    def numeric_features(self) -> list[str]:
        return [f for f in NUMERIC_FEATURES if f in self.means]

    def standardize(self, name: str, value: float) -> float:
        return (value - self.means[name]) / self.stds[name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(**d)


def _price_key(category, subcategory) -> str:
    return f"{category}|{subcategory}"


def _id_map(values: Iterable[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for v in values:
        if v is not None and v not in out:
            out[v] = len(out) + 2
    return out


def fit_vocab_and_stats(
    train: Sequence[Sequence[RawEvent]],
    log: SessionEventLog,
    known_items: Iterable[RawEvent] = (),
) -> tuple[Vocab, FeatureStats]:
    """Fit item/categorical vocabularies and numeric statistics on training data.

    Items are numbered in first-seen order over the training sequences,
    then over ``known_items`` (non-training inputs, e.g. first halves used
    for fine-tuning).
    """
    train = [s for s in train if s]
    if not train:
        raise ValueError("empty training split")
    item_to_id: dict[str, int] = {}
    virtual = [False, False]
    for ev in (e for s in train for e in s):
        if ev.item_key not in item_to_id:
            item_to_id[ev.item_key] = len(virtual)
            virtual.append(ev.is_virtual)
    for ev in known_items:
        if ev.item_key not in item_to_id:
            item_to_id[ev.item_key] = len(virtual)
            virtual.append(ev.is_virtual)

    train_skus = sorted({e.item_key for s in train for e in s if not e.is_virtual})
    recs = [log.sku_record(k) for k in train_skus]
    cats = _id_map(sorted({r.category for r in recs if r.category is not None}))
    subs = _id_map(sorted({r.subcategory for r in recs if r.subcategory is not None}))
    max_price = max([r.price_bucket or 0 for r in log.skus.values()] + [0])

    price_sum: dict[str, list[float]] = defaultdict(list)
    for r in recs:
        if r.price_bucket and r.category is not None and r.subcategory is not None:
            price_sum[_price_key(r.category, r.subcategory)].append(r.price_bucket)
    price_means = {k: float(np.mean(v)) for k, v in sorted(price_sum.items())}

    first_seen: dict[str, int] = {}
    for ev in (e for s in train for e in s):
        if ev.item_key not in first_seen or ev.timestamp_ms < first_seen[ev.item_key]:
            first_seen[ev.item_key] = ev.timestamp_ms

    partial = FeatureStats({}, {}, [], price_means, first_seen)
    columns = np.array([_raw_numeric(e, log, partial) for s in train for e in s], dtype=np.float64)
    means, stds, dropped = {}, {}, []
    for j, name in enumerate(NUMERIC_FEATURES):
        col = columns[:, j]
        sd = float(col.std())
        if sd < 1e-12:
            dropped.append(name)
            continue
        means[name] = float(col.mean())
        stds[name] = sd
    vocab = Vocab(item_to_id, virtual, cats, subs, dict(EVENT_KIND_IDS), max_price + 1)
    return vocab, FeatureStats(means, stds, dropped, price_means, first_seen)


def relative_price(price_bucket, category, subcategory, price_means: dict[str, float]) -> float:
    if not price_bucket or category is None or subcategory is None:
        return 1.0
    mean = price_means.get(_price_key(category, subcategory))
    if not mean:
        return 1.0
    return price_bucket / mean


def recency(timestamp_ms: int, first_seen_ms: int | None) -> float:
    """log(1 + days since the item was first seen); 0 when unseen or first appearance."""
    if first_seen_ms is None:
        return 0.0
    return math.log1p(max(0.0, (timestamp_ms - first_seen_ms) / DAY_MS))


def _raw_numeric(ev: RawEvent, log: SessionEventLog, stats: FeatureStats) -> list[float]:
    if ev.is_virtual:
        rel = 1.0
    else:
        r = log.sku_record(ev.item_key)
        rel = relative_price(r.price_bucket, r.category, r.subcategory, stats.price_means)
    return [
        rel,
        float(ev.num_interactions),
        recency(ev.timestamp_ms, stats.first_seen.get(ev.item_key)),
        float(ev.has_detail),
        float(ev.added_to_cart),
    ]


def cyclic(value: float, period: float) -> tuple[float, float]:
    angle = 2.0 * math.pi * value / period
    return math.sin(angle), math.cos(angle)


# --------------------------------------------------------------------------
# encoded records


@dataclass
class EncodedEvent:
    item_id: int
    item_key: str
    is_virtual: bool
    event_kind: str
    event_kind_id: int
    category_id: int
    subcategory_id: int
    price_bucket: int
    relative_price: float
    num_interactions: int
    has_detail: int
    added_to_cart: int
    recency: float
    hour_sin: float
    hour_cos: float
    dow_sin: float
    dow_cos: float
    scaled: list[float]
    description_vector: list[float] | None
    image_vector: list[float] | None
    timestamp_ms: int


@dataclass
class EncodedSession:
    session_id: str
    events: list[EncodedEvent]
    split_tag: str
    fold: int = -1
    search_mean: list[float] | None = None

    def __len__(self) -> int:
        return len(self.events)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncodedSession":
        d = dict(d)
        d["events"] = [EncodedEvent(**e) for e in d["events"]]
        return cls(**d)


def engineer_numeric(ev: RawEvent, vocab: Vocab, stats: FeatureStats, log: SessionEventLog) -> EncodedEvent:
    """Categorical ids, derived numerics, cyclic time features and vectors for one event."""
    rec = None if ev.is_virtual else log.sku_record(ev.item_key)
    raw = _raw_numeric(ev, log, stats)
    scaled = [stats.standardize(n, raw[NUMERIC_FEATURES.index(n)]) for n in stats.numeric_features]
    when = dt.datetime.fromtimestamp(ev.timestamp_ms / 1000, tz=dt.timezone.utc)
    hs, hc = cyclic(when.hour, 24)
    ds, dc = cyclic(when.weekday(), 7)
    price = 0 if rec is None else min(rec.price_bucket or 0, vocab.num_price_buckets - 1)
    return EncodedEvent(
        item_id=vocab.item_id(ev.item_key),
        item_key=ev.item_key,
        is_virtual=ev.is_virtual,
        event_kind=ev.event_kind,
        event_kind_id=vocab.event_kind_to_id[ev.event_kind],
        category_id=_cat_id(vocab.category_to_id, rec.category if rec else None),
        subcategory_id=_cat_id(vocab.subcategory_to_id, rec.subcategory if rec else None),
        price_bucket=price,
        relative_price=raw[0],
        num_interactions=ev.num_interactions,
        has_detail=ev.has_detail,
        added_to_cart=ev.added_to_cart,
        recency=raw[2],
        hour_sin=hs,
        hour_cos=hc,
        dow_sin=ds,
        dow_cos=dc,
        scaled=scaled,
        description_vector=list(rec.description_vector) if rec and rec.description_vector else None,
        image_vector=list(rec.image_vector) if rec and rec.image_vector else None,
        timestamp_ms=ev.timestamp_ms,
    )


def _cat_id(table: dict[str, int], value) -> int:
    if value is None:
        return 0
    return table.get(value, 1)


def truncate(events: list, max_len: int = MAX_LEN, keep: str = "last") -> list:
    if len(events) <= max_len:
        return list(events)
    return list(events[-max_len:]) if keep == "last" else list(events[:max_len])


def frequency_cap(
    sessions: Sequence[EncodedSession],
    vocab: Vocab,
    threshold: int = 5,
    counts: dict[str, int] | None = None,
) -> tuple[list[EncodedSession], Vocab]:
    """Map product SKUs with fewer than ``threshold`` training interactions to id 1.

    ``counts`` defaults to summed ``num_interactions`` over the ``train``
    sessions. Virtual items are never capped. Surviving items are
    renumbered contiguously in their old id order; nothing but ``item_id``
    changes on any event.
    """
    if counts is None:
        counts = training_counts(sessions)
    id_to_key = {i: k for k, i in vocab.item_to_id.items()}
    new_ids: dict[str, int] = {}
    virtual = [False, False]
    for old in range(2, vocab.size):
        key = id_to_key[old]
        if not vocab.item_is_virtual[old] and counts.get(key, 0) < threshold:
            continue
        new_ids[key] = len(virtual)
        virtual.append(vocab.item_is_virtual[old])
    item_to_id = {k: new_ids.get(k, INFREQUENT_ID) for k in vocab.item_to_id}
    capped = replace(vocab, item_to_id=item_to_id, item_is_virtual=virtual)
    out = []
    for s in sessions:
        events = [replace(e, item_id=item_to_id.get(e.item_key, INFREQUENT_ID)) for e in s.events]
        out.append(replace(s, events=events))
    return out, capped


def training_counts(sessions: Iterable[EncodedSession]) -> dict[str, int]:
    c: Counter = Counter()
    for s in sessions:
        if s.split_tag == "train":
            for e in s.events:
                c[e.item_key] += e.num_interactions
    return dict(c)


# --------------------------------------------------------------------------
# end-to-end


@dataclass
class PreprocessSettings:
    max_len: int = MAX_LEN
    valid_weeks: float = 3
    test_weeks: float = 0
    cap_threshold: int = 0
    folds: int = 5
    seed: int = 0


@dataclass
class EncodedCorpus:
    sessions: list[EncodedSession]
    vocab: Vocab
    stats: FeatureStats
    fold_plan: FoldPlan | None
    report: dict

    def by_tag(self, *tags: str) -> list[EncodedSession]:
        return [s for s in self.sessions if s.split_tag in tags]


def _search_means(log: SessionEventLog) -> dict[str, list[tuple[int, np.ndarray]]]:
    out: dict[str, list] = defaultdict(list)
    for s in log.search:
        out[s.session_id].append((s.timestamp_ms, np.asarray(s.query_vector, dtype=np.float64)))
    return out


def preprocess(log: SessionEventLog, settings: PreprocessSettings = PreprocessSettings()) -> EncodedCorpus:
    """augment -> split/halve -> dedup -> fit on train -> encode -> (cap) -> folds."""
    raw = augment_sessions(log)
    pieces, dropped = split_sessions(raw, settings.valid_weeks, settings.test_weeks)
    for p in pieces:
        p.events = deduplicate_with_interest(p.events)
    train_seqs = [p.events for p in pieces if p.tag == "train"]
    known = [e for p in pieces if p.tag.endswith("first_half") for e in p.events]
    vocab, stats = fit_vocab_and_stats(train_seqs, log, known)

    searches = _search_means(log)
    sessions = []
    for p in pieces:
        keep = "first" if p.tag.endswith("second_half") else "last"
        events = truncate(p.events, settings.max_len, keep)
        qs = [v for ts, v in searches.get(p.session_id, []) if ts <= p.end_ms]
        mean = [float(x) for x in np.mean(qs, axis=0)] if qs else None
        sessions.append(EncodedSession(
            session_id=p.session_id,
            events=[engineer_numeric(e, vocab, stats, log) for e in events],
            split_tag=p.tag,
            search_mean=mean,
        ))

    if settings.cap_threshold > 0:
        sessions, vocab = frequency_cap(sessions, vocab, settings.cap_threshold)

    plan = None
    if settings.folds >= 2:
        plan = assign_folds({s.session_id for s in sessions}, settings.folds, settings.seed)
        for s in sessions:
            s.fold = plan.folds[s.session_id]
    report = {
        "sessions": dict(Counter(s.split_tag for s in sessions)),
        "dropped_unsplittable": dict(dropped),
        "vocab_size": vocab.size,
        "dropped_features": list(stats.dropped),
        "cap_threshold": settings.cap_threshold,
        "vector_dims": {"description": log.description_dim or 0, "image": log.image_dim or 0,
                        "query": log.query_dim or 0},
    }
    return EncodedCorpus(sessions, vocab, stats, plan, report)


# --------------------------------------------------------------------------
# persistence


def save_corpus(corpus: EncodedCorpus, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "sessions": d / "sessions.jsonl",
        "vocab": d / "vocab.json",
        "stats": d / "feature_stats.json",
        "report": d / "preprocess_report.json",
    }
    with paths["sessions"].open("w") as f:
        for s in corpus.sessions:
            f.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")
    paths["vocab"].write_text(json.dumps(corpus.vocab.to_dict(), sort_keys=True))
    paths["stats"].write_text(json.dumps(corpus.stats.to_dict(), sort_keys=True))
    paths["report"].write_text(json.dumps(corpus.report, sort_keys=True, indent=1))
    if corpus.fold_plan is not None:
        paths["folds"] = d / "folds.json"
        paths["folds"].write_text(json.dumps(corpus.fold_plan.to_dict(), sort_keys=True))
    return paths


def load_sessions(path) -> list[EncodedSession]:
    with open(path) as f:
        return [EncodedSession.from_dict(json.loads(line)) for line in f if line.strip()]


def load_corpus(directory) -> EncodedCorpus:
    d = Path(directory)
    for name in ("sessions.jsonl", "vocab.json", "feature_stats.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing encoded artifact: {d / name}")
    plan = None
    if (d / "folds.json").exists():
        plan = FoldPlan.from_dict(json.loads((d / "folds.json").read_text()))
    report = json.loads((d / "preprocess_report.json").read_text()) if (d / "preprocess_report.json").exists() else {}
    return EncodedCorpus(
        load_sessions(d / "sessions.jsonl"),
        Vocab.from_dict(json.loads((d / "vocab.json").read_text())),
        FeatureStats.from_dict(json.loads((d / "feature_stats.json").read_text())),
        plan,
        report,
    )
