import pytest
from hypothesis import given
from hypothesis import strategies as st

from sessrec.ensemble import (
    EnsembleConfig,
    member_metrics,
    merge,
    merge_files,
    normalize,
    parse_member,
    write_submission,
)
from sessrec.evaluation import TopKList, Truth, read_topk, write_topk


def lists(**sessions):
    return [TopKList(sid, list(d), list(d.values())) for sid, d in sessions.items()]


def test_single_member_identity():
    member = lists(s1={"a": 0.5, "b": 0.3, "c": 0.2}, s2={"c": 0.9, "a": 0.1})
    assert merge([(member, 1.0)], norm="none") == member


def test_definitional_sum():
    out = merge([(lists(s={"A": 0.6, "B": 0.4}), 1.0), (lists(s={"B": 0.7, "C": 0.3}), 1.0)], norm="none")
    assert out[0].items == ["B", "A", "C"]
    assert out[0].scores == [pytest.approx(1.1), 0.6, 0.3]


def test_replication_is_idempotent():
    member = lists(s1={"a": 0.5, "b": 0.3, "c": 0.2}, s2={"c": 0.9, "a": 0.1})
    for norm in ("none", "softmax-prob", "min-max"):
        single = merge([(member, 1.0)], norm=norm)
        doubled = merge([(member, 0.5), (member, 0.5)], norm=norm)
        assert [t.items for t in doubled] == [t.items for t in single]
        for a, b in zip(doubled, single):
            assert a.scores == pytest.approx(b.scores)


score_maps = st.dictionaries(st.sampled_from("abcdefg"), st.floats(0.01, 1.0), min_size=1, max_size=7)


@given(score_maps, score_maps, st.floats(0.1, 5.0), st.floats(0.1, 5.0), st.floats(0.01, 100.0),
       st.sampled_from(["none", "softmax-prob", "min-max"]))
def test_weight_scaling_keeps_ranking(a, b, wa, wb, c, norm):
    [base] = merge([(lists(s=a), wa), (lists(s=b), wb)], norm=norm)
    [scaled] = merge([(lists(s=a), wa * c), (lists(s=b), wb * c)], norm=norm)
    before = dict(zip(base.items, base.scores))
    assert set(scaled.items) == set(before)
    for item, score in zip(scaled.items, scaled.scores):
        assert score == pytest.approx(c * before[item], rel=1e-9)
    # the order may only differ between items whose unscaled scores tie to rounding
    for x, y in zip(scaled.items, scaled.items[1:]):
        assert before[x] >= before[y] - 1e-12 * max(1.0, before[y])
    if len(set(base.scores)) == len(base.scores):
        gaps = [u - v for u, v in zip(base.scores, base.scores[1:])]
        if min(gaps, default=1.0) > 1e-9:
            assert scaled.items == base.items


@given(score_maps, score_maps, st.sampled_from("abcdefg"))
def test_absent_item_never_appears(a, b, item):
    a.pop(item, None)
    b.pop(item, None)
    if not a or not b:
        return
    out = merge([(lists(s=a), 1.0), (lists(s=b), 2.0)])
    assert item not in out[0].items


def test_missing_sessions_listed():
    with pytest.raises(ValueError, match="lacks 1 sessions: \\['s2'\\]"):
        merge([(lists(s1={"a": 1.0}, s2={"a": 1.0}), 1.0), (lists(s1={"a": 1.0}), 1.0)])


def test_k_trims_output():
    scores = {f"i{n:03d}": 1.0 / (n + 1) for n in range(100)}
    out = merge([(lists(s=scores), 1.0)], k=20, norm="none")
    assert out[0].items == list(scores)[:20]


def test_normalizations():
    assert normalize([2.0, 1.0, 1.0], "softmax-prob") == [0.5, 0.25, 0.25]
    assert normalize([3.0, 2.0, 1.0], "min-max") == [1.0, 0.5, 0.0]
    assert normalize([0.4, 0.4], "min-max") == [1.0, 1.0]
    assert normalize([0.4, 0.2], "none") == [0.4, 0.2]
    with pytest.raises(ValueError):
        normalize([1.0], "rank")


@pytest.mark.parametrize("kw", [dict(members=[]), dict(members=[("a", 0.0)]), dict(members=[("a", -1.0)]),
                                dict(members=[("a", 1.0)], norm="rank"), dict(members=[("a", 1.0)], k=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EnsembleConfig(**kw)


def test_parse_member():
    assert parse_member("preds/m.jsonl:0.5") == ("preds/m.jsonl", 0.5)
    assert parse_member("preds/m.jsonl") == ("preds/m.jsonl", 1.0)


def test_merge_files_and_submission(tmp_path):
    write_topk(lists(s2={"a": 0.6, "b": 0.4}, s1={"c": 1.0}), tmp_path / "m1.jsonl")
    write_topk(lists(s1={"a": 1.0}, s2={"b": 0.9, "c": 0.1}), tmp_path / "m2.jsonl")
    cfg = EnsembleConfig([(str(tmp_path / "m1.jsonl"), 1.0), (str(tmp_path / "m2.jsonl"), 1.0)], k=2)
    merged = merge_files(cfg)
    assert [t.session_id for t in merged] == ["s1", "s2"]
    d1 = write_submission(merged, tmp_path / "sub.jsonl")
    assert write_submission(merged, tmp_path / "sub2.jsonl") == d1
    assert (tmp_path / "sub.jsonl").read_bytes() == (tmp_path / "sub2.jsonl").read_bytes()
    assert read_topk(tmp_path / "sub.jsonl") == merged


def test_empty_submission_has_header(tmp_path):
    write_submission([], tmp_path / "empty.jsonl")
    text = (tmp_path / "empty.jsonl").read_text().splitlines()
    assert len(text) == 1 and "header" in text[0]
    assert read_topk(tmp_path / "empty.jsonl") == []


def test_submission_trim_keeps_order(tmp_path):
    items = {f"i{n:03d}": 1.0 - n / 100 for n in range(100)}
    write_submission(lists(s=items), tmp_path / "sub.jsonl", k=20)
    assert read_topk(tmp_path / "sub.jsonl")[0].items == list(items)[:20]


def test_member_metrics_rows():
    m1 = lists(s1={"a": 0.6, "b": 0.4})
    m2 = lists(s1={"b": 0.9, "a": 0.1})
    merged = merge([(m1, 1.0), (m2, 1.0)])
    rows = member_metrics([("m1", m1), ("m2", m2)], merged, {"s1": Truth("b", ["b"])})
    assert [r["member"] for r in rows] == ["m1", "m2", "ensemble"]
    assert [r["mrr"] for r in rows] == [0.5, 1.0, 1.0]
