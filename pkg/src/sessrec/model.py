"""Session transformer with multi-modal inputs, latent-cross context and a tied output layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .preprocess import (
    CONTEXT_KIND_IDS,
    EVENT_KIND_IDS,
    INFREQUENT_ID,
    MAX_LEN,
    NUM_CONTEXT_KINDS,
    PAD_ID,
    EncodedSession,
    FeatureStats,
    Vocab,
    context_kind,
)

CAUSAL = "causal"
MASKED = "masked"
CATEGORICAL = ("event_kind", "category", "subcategory", "price")
PRODUCT_CONTEXT = CONTEXT_KIND_IDS["product"]


@dataclass
class ModelConfig:
    vocab_size: int
    mask_token_id: int
    d: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = MAX_LEN
    scheme: str = MASKED
    use_image_vectors: bool = True
    use_search_context: bool = False
    frequency_capped: bool = False
    num_event_kinds: int = len(EVENT_KIND_IDS) + 1
    num_categories: int = 2
    num_subcategories: int = 2
    num_price_buckets: int = 1
    embedding_dims: dict[str, int] = field(
        default_factory=lambda: {"event_kind": 8, "category": 8, "subcategory": 8, "price": 8}
    )
    numeric_features: list[str] = field(default_factory=list)
    description_dim: int = 0
    image_dim: int = 0
    query_dim: int = 0
    ffn_mult: int = 4
    precision: int = 64

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.scheme not in (CAUSAL, MASKED):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.mask_token_id >= self.vocab_size:
            raise ValueError("mask_token_id must be a row of the item table")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def num_scalars(self) -> int:
        # standardized numerics + 4 cyclic + presence bits for each vector
        return len(self.numeric_features) + 4 + 1 + int(self.use_image_vectors)

    @property
    def variant_name(self) -> str:
        name = "XLNET" if self.scheme == MASKED else "TransfoXL"
        if self.use_image_vectors:
            name += "-IM"
        if self.use_search_context:
            name += "-S"
        if self.frequency_capped:
            name += "-FC"
        return name

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def for_corpus(cls, vocab: Vocab, stats: FeatureStats, description_dim: int, image_dim: int,
                   query_dim: int, **kw) -> "ModelConfig":
        return cls(
            vocab_size=vocab.size + 1,
            mask_token_id=vocab.mask_token_id,
            num_categories=len(vocab.category_to_id) + 2,
            num_subcategories=len(vocab.subcategory_to_id) + 2,
            num_price_buckets=vocab.num_price_buckets,
            numeric_features=list(stats.numeric_features),
            description_dim=description_dim,
            image_dim=image_dim,
            query_dim=query_dim,
            **kw,
        )


# --------------------------------------------------------------------------
# numpy views of sessions


@dataclass
class SessionArrays:
    """Per-position feature arrays of one session."""

    items: np.ndarray
    kinds: np.ndarray
    categories: np.ndarray
    subcategories: np.ndarray
    prices: np.ndarray
    scalars: np.ndarray
    description: np.ndarray
    image: np.ndarray
    context_kinds: np.ndarray
    search: np.ndarray
    session_id: str = ""

    def __len__(self) -> int:
        return len(self.items)

    def slice(self, sl: slice) -> "SessionArrays":
        return replace(
            self,
            items=self.items[sl], kinds=self.kinds[sl], categories=self.categories[sl],
            subcategories=self.subcategories[sl], prices=self.prices[sl], scalars=self.scalars[sl],
            description=self.description[sl], image=self.image[sl], context_kinds=self.context_kinds[sl],
        )

    def masked_at(self, positions: np.ndarray, mask_token_id: int) -> "SessionArrays":
        """Copy with every feature of ``positions`` blanked and the item set to the mask token."""
        out = replace(
            self,
            items=self.items.copy(), kinds=self.kinds.copy(), categories=self.categories.copy(),
            subcategories=self.subcategories.copy(), prices=self.prices.copy(), scalars=self.scalars.copy(),
            description=self.description.copy(), image=self.image.copy(),
        )
        out.items[positions] = mask_token_id
        for a in (out.kinds, out.categories, out.subcategories, out.prices):
            a[positions] = 0
        out.scalars[positions] = 0.0
        out.description[positions] = 0.0
        out.image[positions] = 0.0
        return out

    def append_mask(self, mask_token_id: int) -> "SessionArrays":
        """Append one fully blank mask-token position (masked-LM inference)."""
        def pad1(a):
            return np.concatenate([a, np.zeros((1,) + a.shape[1:], dtype=a.dtype)])

        out = replace(
            self,
            items=pad1(self.items), kinds=pad1(self.kinds), categories=pad1(self.categories),
            subcategories=pad1(self.subcategories), prices=pad1(self.prices), scalars=pad1(self.scalars),
            description=pad1(self.description), image=pad1(self.image), context_kinds=pad1(self.context_kinds),
        )
        out.items[-1] = mask_token_id
        return out


def session_arrays(session: EncodedSession, config: ModelConfig) -> SessionArrays:
    evs = session.events
    n = len(evs)
    n_num = len(config.numeric_features)
    scalars = np.zeros((n, config.num_scalars))
    desc = np.zeros((n, config.description_dim))
    img = np.zeros((n, config.image_dim))
    for t, e in enumerate(evs):
        if len(e.scaled) != n_num:
            raise ValueError(f"event has {len(e.scaled)} numeric features, model expects {n_num}")
        row = list(e.scaled) + [e.hour_sin, e.hour_cos, e.dow_sin, e.dow_cos]
        row.append(float(e.description_vector is not None))
        if e.description_vector is not None:
            if len(e.description_vector) != config.description_dim:
                raise ValueError("description vector dimension mismatch")
            desc[t] = e.description_vector
        if config.use_image_vectors:
            row.append(float(e.image_vector is not None))
            if e.image_vector is not None:
                if len(e.image_vector) != config.image_dim:
                    raise ValueError("image vector dimension mismatch")
                img[t] = e.image_vector
        scalars[t] = row
    search = np.zeros(config.query_dim)
    if session.search_mean is not None and config.query_dim:
        search = np.asarray(session.search_mean, dtype=np.float64)
    return SessionArrays(
        items=np.array([e.item_id for e in evs], dtype=np.int64),
        kinds=np.array([e.event_kind_id for e in evs], dtype=np.int64),
        categories=np.array([e.category_id for e in evs], dtype=np.int64),
        subcategories=np.array([e.subcategory_id for e in evs], dtype=np.int64),
        prices=np.array([min(e.price_bucket, config.num_price_buckets - 1) for e in evs], dtype=np.int64),
        scalars=scalars,
        description=desc,
        image=img,
        context_kinds=np.array([context_kind(e.event_kind) for e in evs], dtype=np.int64),
        search=search,
        session_id=session.session_id,
    )


@dataclass
class Batch:
    items: np.ndarray
    kinds: np.ndarray
    categories: np.ndarray
    subcategories: np.ndarray
    prices: np.ndarray
    scalars: np.ndarray
    description: np.ndarray
    image: np.ndarray
    search: np.ndarray
    real: np.ndarray
    targets: np.ndarray
    target_kinds: np.ndarray
    target_infrequent: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.items.shape


def collate(rows: Sequence[SessionArrays], targets: Sequence[np.ndarray] | None = None,
            target_kinds: Sequence[np.ndarray] | None = None) -> Batch:
    """Right-pad rows to a common length. Padding has id 0 and target IGNORE."""
    B = len(rows)
    T = max(len(r) for r in rows)

    def stack(attr, fill=0):
        first = getattr(rows[0], attr)
        out = np.full((B, T) + first.shape[1:], fill, dtype=first.dtype)
        for i, r in enumerate(rows):
            a = getattr(r, attr)
            out[i, : len(a)] = a
        return out

    real = np.zeros((B, T), dtype=bool)
    for i, r in enumerate(rows):
        real[i, : len(r)] = True
    tg = np.full((B, T), ad.IGNORE, dtype=np.int64)
    tk = np.zeros((B, T), dtype=np.int64)
    if targets is not None:
        for i, t in enumerate(targets):
            tg[i, : len(t)] = t
    if target_kinds is not None:
        for i, k in enumerate(target_kinds):
            tk[i, : len(k)] = k
    return Batch(
        items=stack("items"), kinds=stack("kinds"), categories=stack("categories"),
        subcategories=stack("subcategories"), prices=stack("prices"), scalars=stack("scalars"),
        description=stack("description"), image=stack("image"),
        search=np.stack([r.search for r in rows]), real=real,
        targets=tg, target_kinds=tk,
        target_infrequent=(tg == INFREQUENT_ID).astype(np.int64),
    )


# --------------------------------------------------------------------------
# building blocks


def latent_cross(h: Tensor, c: Tensor) -> Tensor:
    """Context-aware prediction vectors ``h * (1 + c)``."""
    if h.shape != c.shape and np.broadcast_shapes(h.shape, c.shape) != h.shape:
        raise ValueError(f"latent_cross shape mismatch: {h.shape} vs {c.shape}")
    return ad.mul(h, ad.add_scalar(c, 1.0))


def tied_logits(p: Tensor, E: Tensor) -> Tensor:
    """Scores of every item embedding row against prediction vectors ``p``."""
    return ad.matmul_transposed(p, E)


def attention_mask(real: np.ndarray, scheme: str) -> np.ndarray:
    """Additive ``[B, T, T]`` mask: padded keys blocked, plus causality when asked."""
    B, T = real.shape
    allowed = np.broadcast_to(real[:, None, :], (B, T, T))
    if scheme == CAUSAL:
        allowed = allowed & np.tril(np.ones((T, T), dtype=bool))[None]
    return np.where(allowed, 0.0, -np.inf)


class SessionTransformer:
    """Parameters plus the forward pass. The item table doubles as the output layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        c = config
        d = c.d
        dt = c.dtype

        def add(name, arr):
            self.params[name] = Parameter(name, np.asarray(arr, dtype=dt))

        def dense(name, n_in, n_out, bias=True):
            add(f"{name}.W", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)))
            if bias:
                add(f"{name}.b", np.zeros(n_out))

        def norm(name, width):
            add(f"{name}.gain", np.ones(width))
            add(f"{name}.bias", np.zeros(width))

        add("item_embedding", rng.normal(0.0, 0.05, (c.vocab_size, d)))
        norm("ln.item", d)
        sizes = {
            "event_kind": c.num_event_kinds,
            "category": c.num_categories,
            "subcategory": c.num_subcategories,
            "price": c.num_price_buckets,
        }
        for name in CATEGORICAL:
            add(f"emb.{name}", rng.normal(0.0, 1.0, (sizes[name], c.embedding_dims[name])))
            norm(f"ln.{name}", c.embedding_dims[name])
        width = d + sum(c.embedding_dims[n] for n in CATEGORICAL) + c.num_scalars + c.description_dim
        if c.use_image_vectors:
            width += c.image_dim
        dense("fusion", width, d)
        add("pos_embedding", rng.normal(0.0, 0.1, (c.max_len, d)))
        for i in range(c.layers):
            p = f"block{i}"
            for w in ("q", "k", "v", "o"):
                dense(f"{p}.attn.{w}", d, d)
            norm(f"{p}.ln1", d)
            dense(f"{p}.ffn1", d, c.ffn_mult * d)
            dense(f"{p}.ffn2", c.ffn_mult * d, d)
            norm(f"{p}.ln2", d)
        dense("head", d, d)
        add("ctx.event_kind", rng.normal(0.0, 0.02, (NUM_CONTEXT_KINDS, d)))
        if c.use_search_context:
            dense("ctx.search", c.query_dim, d, bias=False)
        if c.frequency_capped:
            add("ctx.infrequent", rng.normal(0.0, 0.02, (2, d)))

    @property
    def item_table(self) -> Parameter:
        return self.params["item_embedding"]

    def output_matrix(self) -> Parameter:
        """The output-layer weights: the very same object as the item table."""
        return self.params["item_embedding"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _dense(self, x: Tensor, name: str) -> Tensor:
        return ad.linear(x, self.params[f"{name}.W"], self.params.get(f"{name}.b"))

    def _input(self, a: np.ndarray) -> Tensor:
        return Tensor(a.astype(self.config.dtype))

    # ---- forward pieces

    def build_interaction_embeddings(self, batch: Batch, item_table: Tensor | None = None) -> Tensor:
        """Normalise each feature, concatenate, fuse to one d-vector per position."""
        c = self.config
        E = self.item_table if item_table is None else item_table
        parts = [self._ln(ad.embedding_lookup(E, batch.items), "ln.item")]
        ids = {"event_kind": batch.kinds, "category": batch.categories,
               "subcategory": batch.subcategories, "price": batch.prices}
        for name in CATEGORICAL:
            parts.append(self._ln(ad.embedding_lookup(self.params[f"emb.{name}"], ids[name]), f"ln.{name}"))
        if batch.scalars.shape[-1] != c.num_scalars:
            raise ValueError(f"batch has {batch.scalars.shape[-1]} scalar features, model expects {c.num_scalars}")
        parts.append(self._input(batch.scalars))
        parts.append(ad.l2_normalize(self._input(batch.description)))
        if c.use_image_vectors:
            parts.append(ad.l2_normalize(self._input(batch.image)))
        return self._dense(ad.concat(parts, axis=-1), "fusion")

    def encode(self, x: Tensor, real: np.ndarray) -> Tensor:
        """Transformer stack over interaction embeddings, then the FC projection to ``h``."""
        c = self.config
        T = x.shape[1]
        if T == 0:
            raise ValueError("empty sequence")
        if T > c.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {c.max_len}")
        x = ad.add(x, ad.embedding_lookup(self.params["pos_embedding"], np.arange(T)))
        mask = attention_mask(real, c.scheme)
        for i in range(c.layers):
            p = f"block{i}"
            attn = {
                "Wq": self.params[f"{p}.attn.q.W"], "bq": self.params[f"{p}.attn.q.b"],
                "Wk": self.params[f"{p}.attn.k.W"], "bk": self.params[f"{p}.attn.k.b"],
                "Wv": self.params[f"{p}.attn.v.W"], "bv": self.params[f"{p}.attn.v.b"],
                "Wo": self.params[f"{p}.attn.o.W"], "bo": self.params[f"{p}.attn.o.b"],
            }
            x = self._ln(ad.add(x, ad.multi_head_attention(x, mask, attn, c.heads)), f"{p}.ln1")
            ff = self._dense(ad.gelu(self._dense(x, f"{p}.ffn1")), f"{p}.ffn2")
            x = self._ln(ad.add(x, ff), f"{p}.ln2")
        return self._dense(x, "head")

    def compose_context(self, target_kinds: np.ndarray, search: np.ndarray,
                        target_infrequent: np.ndarray) -> Tensor:
        """``c = e + s + f`` for each position (``f`` only for frequency-capped models)."""
        c = self.config
        ctx = ad.embedding_lookup(self.params["ctx.event_kind"], target_kinds)
        if c.use_search_context:
            q = ad.l2_normalize(self._input(search))
            s = self._dense(q, "ctx.search")
            B, d = s.shape
            ctx = ad.add(ctx, ad.reshape(s, (B,) + (1,) * (ctx.data.ndim - 2) + (d,)))
        if c.frequency_capped:
            ctx = ad.add(ctx, ad.embedding_lookup(self.params["ctx.infrequent"], target_infrequent))
        return ctx

    def prediction_vectors(self, batch: Batch, use_context: bool = True,
                           item_table: Tensor | None = None) -> Tensor:
        h = self.encode(self.build_interaction_embeddings(batch, item_table), batch.real)
        if not use_context:
            return h
        ctx = self.compose_context(batch.target_kinds, batch.search, batch.target_infrequent)
        return latent_cross(h, ctx)

    def logits(self, batch: Batch, use_context: bool = True) -> Tensor:
        """Scores over the item vocabulary at every position, ``[B, T, V]``."""
        return tied_logits(self.prediction_vectors(batch, use_context), self.item_table)

    def loss(self, batch: Batch, detach: str | None = None) -> Tensor:
        """Cross-entropy at the batch's target positions.

        ``detach`` in {"lookup", "output"} cuts one of the two uses of the
        item table out of the graph; used to inspect each gradient path.
        """
        E = self.item_table
        frozen = ad.detach(E)
        p = self.prediction_vectors(batch, item_table=frozen if detach == "lookup" else E)
        B, T, d = p.shape
        flat_targets = batch.targets.reshape(-1)
        rows = np.nonzero(flat_targets != ad.IGNORE)[0]
        if rows.size == 0:
            raise ValueError("batch has no target positions")
        picked = ad.take_rows(ad.reshape(p, (B * T, d)), rows)
        logits = tied_logits(picked, frozen if detach == "output" else E)
        return ad.softmax_cross_entropy(logits, flat_targets[rows])

    def next_item_logits(self, batch: Batch, positions: np.ndarray) -> np.ndarray:
        """Inference scores at one position per row, with context forced to a frequent product event."""
        B, T = batch.shape
        kinds = np.zeros((B, T), dtype=np.int64)
        kinds[np.arange(B), positions] = PRODUCT_CONTEXT
        batch = replace(batch, target_kinds=kinds, target_infrequent=np.zeros((B, T), dtype=np.int64))
        with ad.no_grad():
            p = self.prediction_vectors(batch)
            picked = p.data[np.arange(B), positions]
            return picked @ self.item_table.data.T

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for k, v in arrays.items():
            p = self.params[k]
            if v.shape != p.data.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.data.shape}")
            p.data[...] = v


def inference_rows(rows: Sequence[SessionArrays], config: ModelConfig) -> tuple[list[SessionArrays], np.ndarray]:
    """Prepare first-half inputs for next-item scoring.

    Causal: the last event's output predicts the next item. Masked: a mask
    token is appended and its output is used. Inputs are truncated so the
    query position fits in ``max_len``.
    """
    out, pos = [], []
    for r in rows:
        if len(r) == 0:
            raise ValueError(f"empty input session {r.session_id!r}")
        if config.scheme == MASKED:
            r = r.slice(slice(-(config.max_len - 1), None)).append_mask(config.mask_token_id)
        else:
            r = r.slice(slice(-config.max_len, None))
        out.append(r)
        pos.append(len(r) - 1)
    return out, np.array(pos, dtype=np.int64)


def reserved_ids(config: ModelConfig) -> list[int]:
    return [PAD_ID, INFREQUENT_ID, config.mask_token_id]
