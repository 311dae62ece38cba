import numpy as np
import pytest
from hypothesis import settings

from sessrec import autodiff as ad
from sessrec.ingest import SyntheticConfig, generate_synthetic
from sessrec.model import MASKED, ModelConfig, SessionArrays
from sessrec.preprocess import EVENT_KIND_IDS, EncodedEvent, EncodedSession
from sessrec.preprocess import PreprocessSettings, preprocess

CRITERIA = pytest.StashKey[dict]()

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


# Acceptance tests carry @pytest.mark.criterion(n, title); their outcomes are
# collected here and printed as one PASS/FAIL line each after the run.


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    item.config.stash[CRITERIA][number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, verdict, detail = results[number]
        line = f"{verdict} criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)


def tiny_config(**kw) -> ModelConfig:
    """d=8, one layer, vocab 10 (id 9 is the mask token), 64-bit."""
    base = dict(
        vocab_size=10, mask_token_id=9, d=8, layers=1, heads=1, max_len=4, scheme=MASKED,
        num_categories=3, num_subcategories=3, num_price_buckets=3,
        embedding_dims={"event_kind": 4, "category": 4, "subcategory": 4, "price": 4},
        numeric_features=["a", "b"], description_dim=3, image_dim=3, query_dim=2, ffn_mult=2,
        precision=64,
    )
    base.update(kw)
    return ModelConfig(**base)


def random_row(config: ModelConfig, length: int, rng: np.random.Generator, session_id="s") -> SessionArrays:
    """Random feature arrays for one session (item ids avoid reserved ids and the mask)."""
    scalars = rng.normal(size=(length, config.num_scalars))
    return SessionArrays(
        items=rng.integers(2, config.mask_token_id, size=length),
        kinds=rng.integers(1, config.num_event_kinds, size=length),
        categories=rng.integers(0, config.num_categories, size=length),
        subcategories=rng.integers(0, config.num_subcategories, size=length),
        prices=rng.integers(0, config.num_price_buckets, size=length),
        scalars=scalars,
        description=rng.normal(size=(length, config.description_dim)),
        image=rng.normal(size=(length, config.image_dim)),
        context_kinds=rng.integers(1, 4, size=length),
        search=rng.normal(size=config.query_dim),
        session_id=session_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_log():
    cfg = SyntheticConfig(num_sessions=400, num_skus=80, num_page_urls=12, num_topics=6,
                          vector_dims=(4, 6, 6), zipf_exponent=1.284, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def small_corpus(small_log):
    return preprocess(small_log, PreprocessSettings(folds=5, seed=0))


@pytest.fixture(autouse=True)
def _fresh_tape():
    # forward passes outside backward() leave entries on the thread's tape
    ad.clear_tape()
    yield
    ad.clear_tape()


# ---------------------------------------------------------------- toy corpora

T0 = 1_600_000_000_000


def toy_event(key: str, item_id: int, t: int = 0, kind: str = "product_view", virtual: bool = False):
    return EncodedEvent(
        item_id=item_id, item_key=key, is_virtual=virtual, event_kind=kind,
        event_kind_id=EVENT_KIND_IDS[kind], category_id=2, subcategory_id=2, price_bucket=1,
        relative_price=1.0, num_interactions=1, has_detail=0, added_to_cart=0, recency=0.0,
        hour_sin=0.0, hour_cos=1.0, dow_sin=0.0, dow_cos=1.0, scaled=[],
        description_vector=None if virtual else [1.0, 0.0, float(item_id)],
        image_vector=None if virtual else [0.0, 1.0, float(item_id)],
        timestamp_ms=T0 + 1000 * t,
    )


def toy_session(sid: str, keys, tag: str = "train", virtual=()) -> EncodedSession:
    """Session over items named p<i> (id i + 2) and virtual pages u<i>."""
    events = []
    for t, key in enumerate(keys):
        events.append(toy_event(key, TOY_IDS[key], t, "pageview" if key in virtual else "product_view",
                                key in virtual))
    return EncodedSession(sid, events, tag)


TOY_KEYS = [f"p{i}" for i in range(6)] + ["u0", "u1"]
TOY_IDS = {k: i + 2 for i, k in enumerate(TOY_KEYS)}
TOY_VIRTUAL = {"u0", "u1"}
TOY_META = {"item_keys": [None, None] + TOY_KEYS,
            "item_is_virtual": [False, False] + [k in TOY_VIRTUAL for k in TOY_KEYS]}


def toy_model_config(**kw) -> ModelConfig:
    """Model sized for the toy vocabulary (ids 2..9 real, 10 the mask token)."""
    n = len(TOY_KEYS) + 2
    base = dict(
        vocab_size=n + 1, mask_token_id=n, d=16, layers=1, heads=2, max_len=8, scheme=MASKED,
        num_categories=4, num_subcategories=4, num_price_buckets=3,
        embedding_dims={"event_kind": 4, "category": 4, "subcategory": 4, "price": 4},
        numeric_features=[], description_dim=3, image_dim=3, query_dim=2, ffn_mult=2,
    )
    base.update(kw)
    return ModelConfig(**base)
