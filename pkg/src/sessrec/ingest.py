"""Three-table session event logs: schema, loaders, synthetic generator, stats."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

PRODUCT_KINDS = ("product_view", "product_detail", "add_to_cart", "remove_from_cart", "purchase")
PAGEVIEW = "pageview"
EVENT_KINDS = PRODUCT_KINDS + (PAGEVIEW,)

BROWSING_COLUMNS = ("session_id", "timestamp_ms", "event_kind", "sku", "page_url_id")
SKU_COLUMNS = ("sku", "price_bucket", "category", "subcategory", "description_vector", "image_vector")
SEARCH_FIELDS = ("session_id", "timestamp_ms", "query_vector", "impressions", "clicked_skus")

COVEO_GINI = 0.8849


class SchemaError(ValueError):
    """A data file does not have the expected layout."""


class RowError(ValueError):
    """One row violates a type invariant; the loader rejects and counts it."""


@dataclass(frozen=True, slots=True)
class BrowsingEvent:
    session_id: str
    timestamp_ms: int
    event_kind: str
    sku: str | None = None
    page_url_id: str | None = None

    def validate(self) -> None:
        if self.event_kind not in EVENT_KINDS:
            raise RowError(f"unknown event_kind {self.event_kind!r}")
        if self.timestamp_ms <= 0:
            raise RowError("timestamp_ms must be positive")
        if self.event_kind == PAGEVIEW:
            if self.page_url_id is None or self.sku is not None:
                raise RowError("pageview needs page_url_id and no sku")
        elif self.sku is None or self.page_url_id is not None:
            raise RowError("product event needs sku and no page_url_id")


@dataclass(frozen=True, slots=True)
class SearchEvent:
    session_id: str
    timestamp_ms: int
    query_vector: tuple[float, ...]
    impressions: tuple[str, ...] = ()
    clicked_skus: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.timestamp_ms <= 0:
            raise RowError("timestamp_ms must be positive")
        if not set(self.clicked_skus) <= set(self.impressions):
            raise RowError("clicked_skus must be a subset of impressions")


@dataclass(frozen=True, slots=True)
class SkuRecord:
    sku: str
    price_bucket: int | None = None
    category: str | None = None
    subcategory: str | None = None
    description_vector: tuple[float, ...] | None = None
    image_vector: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.price_bucket is not None and self.price_bucket < 0:
            raise RowError("price_bucket must be >= 0")

    @property
    def has_metadata(self) -> bool:
        return bool(self.price_bucket)


@dataclass
class SessionEventLog:
    browsing: list[BrowsingEvent]
    search: list[SearchEvent]
    skus: dict[str, SkuRecord]
    rejects: Counter = field(default_factory=Counter)
    query_dim: int | None = None
    description_dim: int | None = None
    image_dim: int | None = None

    @property
    def reject_count(self) -> int:
        return sum(self.rejects.values())

    def sku_record(self, sku: str) -> SkuRecord:
        """Metadata for ``sku``; unknown SKUs count as 'no metadata'."""
        rec = self.skus.get(sku)
        return rec if rec is not None else SkuRecord(sku=sku, price_bucket=0)

    def session_ids(self) -> list[str]:
        seen = dict.fromkeys(e.session_id for e in self.browsing)
        seen.update(dict.fromkeys(e.session_id for e in self.search))
        return list(seen)


# --------------------------------------------------------------------------
# loading


def _opt(s: str | None) -> str | None:
    return s if s not in (None, "") else None


def _parse_vector(cell: str | None) -> tuple[float, ...] | None:
    if cell in (None, ""):
        return None
    vals = json.loads(cell)
    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) for v in vals):
        raise RowError("vector cell must be a JSON list of numbers")
    return tuple(float(v) for v in vals)


def _read_csv(path: Path, columns: tuple[str, ...]) -> Iterable[dict]:
    if not path.exists():
        raise FileNotFoundError(f"missing data file: {path}")
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        missing = set(columns) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        yield from reader


def _check_dim(vec, dim: int | None, what: str) -> int | None:
    if vec is None:
        return dim
    if dim is None:
        return len(vec)
    if len(vec) != dim:
        raise RowError(f"{what} has dimension {len(vec)}, expected {dim}")
    return dim


def load_dataset(browsing_path, search_path, sku_path) -> SessionEventLog:
    """Read the browsing CSV, search JSONL and SKU CSV, rejecting bad rows."""
    rejects: Counter = Counter()
    browsing: list[BrowsingEvent] = []
    for row in _read_csv(Path(browsing_path), BROWSING_COLUMNS):
        try:
            ev = BrowsingEvent(
                session_id=row["session_id"],
                timestamp_ms=int(row["timestamp_ms"]),
                event_kind=row["event_kind"],
                sku=_opt(row["sku"]),
                page_url_id=_opt(row["page_url_id"]),
            )
            ev.validate()
        except (RowError, ValueError, TypeError):
            rejects["browsing"] += 1
            continue
        browsing.append(ev)

    skus: dict[str, SkuRecord] = {}
    d_t = d_i = None
    for row in _read_csv(Path(sku_path), SKU_COLUMNS):
        try:
            price = _opt(row["price_bucket"])
            rec = SkuRecord(
                sku=row["sku"],
                price_bucket=int(price) if price is not None else None,
                category=_opt(row["category"]),
                subcategory=_opt(row["subcategory"]),
                description_vector=_parse_vector(row["description_vector"]),
                image_vector=_parse_vector(row["image_vector"]),
            )
            rec.validate()
            new_t = _check_dim(rec.description_vector, d_t, "description_vector")
            new_i = _check_dim(rec.image_vector, d_i, "image_vector")
        except (RowError, ValueError, TypeError):
            rejects["sku"] += 1
            continue
        d_t, d_i = new_t, new_i
        skus[rec.sku] = rec

    search: list[SearchEvent] = []
    d_q = None
    path = Path(search_path)
    if not path.exists():
        raise FileNotFoundError(f"missing data file: {path}")
    with path.open() as f:
        for line in f:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict) or set(SEARCH_FIELDS) - set(obj):
                    raise RowError("search row lacks required fields")
                ev = SearchEvent(
                    session_id=str(obj["session_id"]),
                    timestamp_ms=int(obj["timestamp_ms"]),
                    query_vector=tuple(float(v) for v in obj["query_vector"]),
                    impressions=tuple(str(s) for s in obj["impressions"]),
                    clicked_skus=tuple(str(s) for s in obj["clicked_skus"]),
                )
                ev.validate()
                new_q = _check_dim(ev.query_vector, d_q, "query_vector")
            except (RowError, ValueError, TypeError):
                rejects["search"] += 1
                continue
            d_q = new_q
            search.append(ev)

    return SessionEventLog(browsing, search, skus, rejects, d_q, d_t, d_i)


def _vec_cell(v) -> str:
    return "" if v is None else json.dumps([float(x) for x in v])


def save_dataset(log: SessionEventLog, browsing_path, search_path, sku_path) -> None:
    """Write the three tables in the loader's formats (deterministic bytes)."""
    with open(browsing_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BROWSING_COLUMNS)
        for e in log.browsing:
            w.writerow([e.session_id, e.timestamp_ms, e.event_kind, e.sku or "", e.page_url_id or ""])
    with open(sku_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SKU_COLUMNS)
        for r in log.skus.values():
            w.writerow([
                r.sku,
                "" if r.price_bucket is None else r.price_bucket,
                r.category or "",
                r.subcategory or "",
                _vec_cell(r.description_vector),
                _vec_cell(r.image_vector),
            ])
    with open(search_path, "w") as f:
        for e in log.search:
            f.write(json.dumps({
                "session_id": e.session_id,
                "timestamp_ms": e.timestamp_ms,
                "query_vector": list(e.query_vector),
                "impressions": list(e.impressions),
                "clicked_skus": list(e.clicked_skus),
            }) + "\n")


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic corpus.

    ``topic_noise`` scales the per-SKU Gaussian perturbation of its topic's
    centre vectors. ``length_drift`` is the per-extra-product probability
    that a product is drawn off-topic, so longer sessions are less focused.
    ``early_popularity`` sharpens popularity for the first products of a
    session (decaying with position). ``topical_pageview_prob`` is the share
    of page views landing on the session topic's own pages.
    """

    num_sessions: int = 5000
    num_skus: int = 500
    num_page_urls: int = 50
    zipf_exponent: float = 1.2
    mean_session_length: float = 10.0
    event_mix: tuple[float, float, float] = (0.70, 0.28, 0.02)
    vector_dims: tuple[int, int, int] = (16, 24, 24)
    topic_noise: float = 0.3
    seed: int = 0
    num_topics: int = 20
    length_drift: float = 0.03
    transition_prob: float = 0.5
    repeat_prob: float = 0.13
    early_popularity: float = 1.0
    topical_pageview_prob: float = 0.5
    missing_metadata_frac: float = 0.05
    max_session_length: int = 60
    span_weeks: float = 12.0
    num_price_buckets: int = 10

    def validate(self) -> None:
        if self.num_sessions <= 0 or self.num_skus <= 1 or self.num_page_urls <= 0:
            raise ValueError("num_sessions, num_skus and num_page_urls must be positive")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be > 0")
        if len(self.event_mix) != 3 or min(self.event_mix) < 0 or abs(sum(self.event_mix) - 1.0) > 1e-9:
            raise ValueError("event_mix must be three probabilities summing to 1")
        if not 0.0 <= self.topic_noise <= 1.0:
            raise ValueError("topic_noise must lie in [0, 1]")
        for name in ("transition_prob", "repeat_prob", "topical_pageview_prob", "missing_metadata_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mean_session_length < 1:
            raise ValueError("mean_session_length must be >= 1")
        if self.num_topics < 1 or self.num_topics > self.num_skus:
            raise ValueError("num_topics must be in [1, num_skus]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for k in ("event_mix", "vector_dims"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


_SECOND_MS = 1000
_DAY_MS = 86_400_000
_START_MS = 1_600_000_000_000


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _round_vec(v) -> tuple[float, ...]:
    return tuple(round(float(x), 6) for x in v)


def generate_synthetic(config: SyntheticConfig) -> SessionEventLog:
    """Deterministic synthetic corpus with long-tail popularity and topical sessions.

    Each SKU belongs to a topic; its description/image vectors are the
    topic centre plus ``topic_noise``-scaled noise. A session picks one topic,
    and its products mostly come from that topic: either the fixed successor
    of the previous product (learnable sequential signal) or a Zipf draw
    within the topic.
    """
    config.validate()
    c = config
    rng = np.random.default_rng(c.seed)
    d_q, d_t, d_i = c.vector_dims
    n = c.num_skus

    rank = rng.permutation(n)
    weight = 1.0 / (rank + 1.0) ** c.zipf_exponent
    topic = rng.integers(0, c.num_topics, size=n)
    topic[rng.permutation(n)[: c.num_topics]] = np.arange(c.num_topics)
    members = [np.nonzero(topic == t)[0] for t in range(c.num_topics)]
    topic_mass = np.array([weight[m].sum() for m in members])
    topic_p = topic_mass / topic_mass.sum()

    centers_t = _unit_rows(rng, c.num_topics, d_t)
    centers_i = _unit_rows(rng, c.num_topics, d_i)
    centers_q = _unit_rows(rng, c.num_topics, d_q)
    desc = centers_t[topic] + c.topic_noise * rng.standard_normal((n, d_t)) / math.sqrt(d_t)
    img = centers_i[topic] + c.topic_noise * rng.standard_normal((n, d_i)) / math.sqrt(d_i)
    missing = rng.random(n) < c.missing_metadata_frac
    price = rng.integers(1, c.num_price_buckets + 1, size=n)

    successor = np.empty(n, dtype=np.int64)
    for t, m in enumerate(members):
        p = weight[m] / weight[m].sum()
        successor[m] = rng.choice(m, size=len(m), p=p)
        if len(m) > 1:
            # avoid self-loops, which dedup would swallow
            same = successor[m] == m
            successor[m[same]] = np.roll(m, 1)[same]

    skus = {}
    for i in range(n):
        sku = f"sku{i:05d}"
        if missing[i]:
            skus[sku] = SkuRecord(sku=sku, price_bucket=0)
        else:
            skus[sku] = SkuRecord(
                sku=sku,
                price_bucket=int(price[i]),
                category=f"cat{topic[i] % max(1, c.num_topics // 4)}",
                subcategory=f"sub{topic[i]}",
                description_vector=_round_vec(desc[i]),
                image_vector=_round_vec(img[i]),
            )

    url_w = 1.0 / np.arange(1, c.num_page_urls + 1) ** 1.0
    url_p = url_w / url_w.sum()
    # each topic has a few landing pages of its own; the rest are site-wide
    topic_urls = [rng.choice(c.num_page_urls, size=min(3, c.num_page_urls), replace=False)
                  for _ in range(c.num_topics)]
    mix = np.asarray(c.event_mix)
    span_ms = int(c.span_weeks * 7 * _DAY_MS)
    starts = np.sort(rng.integers(0, span_ms, size=c.num_sessions)) + _START_MS
    geo_p = 1.0 / c.mean_session_length
    secondary = np.array(["product_detail", "add_to_cart", "remove_from_cart", "purchase"])

    def draw_product(t: int, slot: int, prev: int | None, length: int, seen: set) -> int:
        if prev is not None and rng.random() < c.transition_prob and int(successor[prev]) not in seen:
            return int(successor[prev])
        drift = min(0.9, c.length_drift * (length - 1))
        if rng.random() < drift:
            t = int(rng.choice(c.num_topics, p=topic_p))
        m = members[t]
        w = weight[m] ** (1.0 + c.early_popularity * 0.5**slot)
        p = w / w.sum()
        item = int(rng.choice(m, p=p))
        for _ in range(3):
            if item not in seen:
                break
            item = int(rng.choice(m, p=p))
        return item

    browsing: list[BrowsingEvent] = []
    search: list[SearchEvent] = []
    for s in range(c.num_sessions):
        sid = f"s{s:06d}"
        length = int(min(c.max_session_length, rng.geometric(geo_p)))
        kinds = rng.choice(3, size=length, p=mix)
        n_products = int((kinds != 0).sum())
        t_sess = int(rng.choice(c.num_topics, p=topic_p))
        ts = int(starts[s])
        prev = None
        slot = 0
        seen: set[int] = set()
        for k in kinds:
            ts += int(rng.exponential(30.0) * _SECOND_MS) + 1
            if k == 0:
                if rng.random() < c.topical_pageview_prob:
                    url = int(rng.choice(topic_urls[t_sess]))
                else:
                    url = int(rng.choice(c.num_page_urls, p=url_p))
                browsing.append(BrowsingEvent(sid, ts, PAGEVIEW, page_url_id=f"url{url:03d}"))
                continue
            if prev is not None and rng.random() < c.repeat_prob:
                item = prev
                kind = str(rng.choice(secondary))
            else:
                item = draw_product(t_sess, slot, prev, n_products, seen)
                kind = "product_view"
                slot += 1
            sku = f"sku{item:05d}"
            if k == 1:
                browsing.append(BrowsingEvent(sid, ts, kind, sku=sku))
            else:
                t_item = int(topic[item])
                others = rng.choice(members[t_item], size=min(4, len(members[t_item])), replace=False)
                impressions = tuple(dict.fromkeys([sku] + [f"sku{o:05d}" for o in others]))
                qv = centers_q[t_item] + 0.2 * rng.standard_normal(d_q) / math.sqrt(d_q)
                search.append(SearchEvent(sid, ts, _round_vec(qv), impressions, (sku,)))
            prev = item
            seen.add(item)
    return SessionEventLog(browsing, search, skus, Counter(), d_q, d_t, d_i)


def calibrate_zipf_exponent(
    config: SyntheticConfig,
    target_gini: float = COVEO_GINI,
    tol: float = 0.005,
    max_iter: int = 40,
    lo: float = 0.05,
    hi: float = 4.0,
) -> tuple[SyntheticConfig, float]:
    """Bisect the Zipf exponent so the generated corpus hits ``target_gini``.

    Returns the tuned config and the achieved Gini.
    """
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        cfg = replace(config, zipf_exponent=mid)
        g = corpus_stats(generate_synthetic(cfg)).gini
        if best is None or abs(g - target_gini) < abs(best[1] - target_gini):
            best = (cfg, g)
        if abs(g - target_gini) <= tol:
            break
        if g < target_gini:
            lo = mid
        else:
            hi = mid
    return best


# --------------------------------------------------------------------------
# statistics


def gini(counts) -> float:
    """Gini index of non-negative counts (sorted-sum form)."""
    x = np.sort(np.asarray(counts, dtype=np.float64))
    n = x.size
    total = x.sum()
    if n == 0 or total == 0:
        return 0.0
    i = np.arange(1, n + 1)
    return float(((2 * i - n - 1) * x).sum() / (n * total))


def top_share(counts, fraction: float) -> float:
    """Share of all interactions held by the top ``fraction`` of items."""
    x = np.sort(np.asarray(counts, dtype=np.float64))[::-1]
    k = max(1, int(math.ceil(fraction * x.size)))
    return float(x[:k].sum() / x.sum())


@dataclass
class StatsReport:
    num_sessions: int
    num_browsing_events: int
    num_search_events: int
    num_skus: int
    gini: float
    top1_share: float
    top5_share: float
    median_item_frequency: float
    repeated_fraction: float
    event_mix: dict[str, float]
    rejects: dict[str, int]

    def to_dict(self) -> dict:
        return asdict(self)


def product_interactions(log: SessionEventLog) -> list[tuple[str, int, str]]:
    """(session_id, timestamp_ms, sku) for browsing product events and search clicks."""
    out = [(e.session_id, e.timestamp_ms, e.sku) for e in log.browsing if e.event_kind != PAGEVIEW]
    for s in log.search:
        out.extend((s.session_id, s.timestamp_ms, sku) for sku in s.clicked_skus)
    return out


def corpus_stats(log: SessionEventLog) -> StatsReport:
    """Long-tail and event-mix statistics.

    Item frequencies count product interactions (browsing product events
    plus search clicks) over every catalog SKU, zero-count SKUs included.
    """
    inter = product_interactions(log)
    pageviews = sum(1 for e in log.browsing if e.event_kind == PAGEVIEW)
    if not inter and not pageviews:
        raise ValueError("empty log")
    freq = Counter(sku for _, _, sku in inter)
    catalog = set(log.skus) | set(freq)
    counts = np.array([freq.get(s, 0) for s in sorted(catalog)], dtype=np.float64)

    seen: set[tuple[str, str]] = set()
    repeated = 0
    for sid, _, sku in sorted(inter, key=lambda r: (r[0], r[1])):
        if (sid, sku) in seen:
            repeated += 1
        seen.add((sid, sku))

    clicks = sum(len(s.clicked_skus) for s in log.search)
    product_events = len(log.browsing) - pageviews
    total = pageviews + product_events + clicks
    return StatsReport(
        num_sessions=len(log.session_ids()),
        num_browsing_events=len(log.browsing),
        num_search_events=len(log.search),
        num_skus=len(catalog),
        gini=gini(counts) if counts.sum() else 0.0,
        top1_share=top_share(counts, 0.01) if counts.sum() else 0.0,
        top5_share=top_share(counts, 0.05) if counts.sum() else 0.0,
        median_item_frequency=float(np.median(counts)) if counts.size else 0.0,
        repeated_fraction=repeated / len(inter) if inter else 0.0,
        event_mix={
            "pageview": pageviews / total,
            "product": product_events / total,
            "search_click": clicks / total,
        },
        rejects=dict(log.rejects),
    )
