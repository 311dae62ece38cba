import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TOY_IDS, TOY_META, toy_model_config, toy_session
from sessrec.checkpoint import Checkpoint
from sessrec.evaluation import (
    TopKList,
    Truth,
    evaluate,
    f1_at_k,
    f1_components,
    ground_truth,
    mrr,
    popularity_topk,
    predict_topk,
    rank_scores,
    read_topk,
    reciprocal_rank,
    write_topk,
)
from sessrec.model import CAUSAL, SessionTransformer


# ---------------------------------------------------------------- metric oracles


def rr_oracle(ranked, truth, cutoff):
    for i, item in enumerate(ranked):
        if i >= cutoff:
            break
        if item == truth:
            return 1.0 / (i + 1)
    return 0.0


def f1_oracle(ranked, truth, k):
    seen = []
    for item in ranked:
        if item not in seen:
            seen.append(item)
    predicted = set(seen[:k])
    hit = sum(1 for t in set(truth) if t in predicted)
    if hit == 0:
        return 0.0
    p, r = hit / len(predicted), hit / len(set(truth))
    return 2 * p * r / (p + r)


def random_cases(n, seed):
    r = np.random.default_rng(seed)
    universe = [f"i{j}" for j in range(15)]
    cases = []
    for _ in range(n):
        ranked = list(r.choice(universe, size=int(r.integers(0, 11)), replace=False))
        truth = list(r.choice(universe, size=int(r.integers(1, 6)), replace=False))
        cases.append((ranked, truth))
    return cases


def metric_oracle_agreement(n=1000, seed=0):
    """Compare metrics against brute-force scans on random small cases.

    Returns (mismatches, elapsed seconds).
    """
    start = time.perf_counter()
    cases = random_cases(n, seed)
    bad = 0
    for ranked, truth in cases:
        for cutoff in (1, 3, 20):
            if reciprocal_rank(ranked, truth[0], cutoff) != rr_oracle(ranked, truth[0], cutoff):
                bad += 1
        for k in (1, 5, 20):
            if f1_components(ranked, truth, k)[2] != f1_oracle(ranked, truth, k):
                bad += 1
    preds = [c[0] for c in cases]
    if mrr(preds, [c[1][0] for c in cases]) != np.mean([rr_oracle(p, t[0], 20) for p, t in cases]):
        bad += 1
    if f1_at_k(preds, [c[1] for c in cases]) != np.mean([f1_oracle(p, t, 20) for p, t in cases]):
        bad += 1
    return bad, time.perf_counter() - start


def test_metrics_match_brute_force_oracles():
    bad, elapsed = metric_oracle_agreement()
    assert bad == 0
    assert elapsed < 5


def test_reciprocal_rank_examples():
    assert reciprocal_rank(["3", "7", "9"], "7") == 0.5
    assert reciprocal_rank(["3", "7", "9"], "4") == 0.0
    assert mrr([["a", "b"], ["c"]], ["a", "c"]) == 1.0


def test_f1_examples():
    p, r, f = f1_components(["A", "B", "C"], ["B", "D"], k=3)
    assert (p, r) == (pytest.approx(1 / 3), 0.5)
    assert f == pytest.approx(0.4)
    items = [f"x{i}" for i in range(20)]
    assert f1_components(items, items)[2] == 1.0
    assert f1_components(["a"], ["b"])[2] == 0.0


def test_sessions_without_truth_are_excluded():
    assert mrr([["a"], ["b"]], ["a", None]) == 1.0
    assert f1_at_k([["a"], ["b"]], [["a"], []]) == 1.0
    with pytest.raises(ValueError):
        mrr([["a"]], [None])
    with pytest.raises(ValueError):
        f1_at_k([["a"]], [[]])


@given(st.lists(st.lists(st.sampled_from("abcdefgh"), unique=True, max_size=8), min_size=1, max_size=10),
       st.data())
def test_cutoff_monotone_and_bounded(preds, data):
    truths = [data.draw(st.sampled_from("abcdefgh")) for _ in preds]
    narrow, wide = mrr(preds, truths, cutoff=1), mrr(preds, truths, cutoff=20)
    assert 0.0 <= narrow <= wide <= 1.0
    assert 0.0 <= f1_at_k(preds, [[t] for t in truths]) <= 1.0


def test_ground_truth_skips_virtual_items():
    hidden = toy_session("s", ["u0", "p1", "p1", "u1", "p2"], virtual={"u0", "u1"})
    t = ground_truth(hidden)
    assert t.next_item == "p1"
    assert t.items == ["p1", "p2"]
    assert ground_truth(toy_session("v", ["u0"], virtual={"u0"})).next_item is None


def test_evaluate_aggregates_equal_record_means():
    preds = [TopKList("a", ["x", "y"], [0.6, 0.4]), TopKList("b", ["y", "x"], [0.9, 0.1]),
             TopKList("c", ["z"], [1.0])]
    truths = {"a": Truth("y", ["y", "q"]), "b": Truth("y", ["y"]), "c": Truth(None, []),
              "d": Truth("x", ["x"])}
    report = evaluate(preds, truths)
    assert report.mrr == pytest.approx(np.mean([0.5, 1.0]))
    assert report.f1 == pytest.approx(np.mean([r.f1 for r in report.records if r.f1 is not None]))
    assert (report.excluded_mrr, report.excluded_f1, report.missing_predictions) == (1, 1, 1)
    assert json.loads(json.dumps(report.to_dict()))["sessions"] == 3


# ---------------------------------------------------------------- ranking and prediction


def test_rank_scores_breaks_ties_by_id():
    scores = np.array([0.1, 0.5, 0.5, 0.2, 0.5])
    eligible = np.array([False, True, True, True, True])
    assert rank_scores(scores, eligible, 3).tolist() == [1, 2, 4]


def test_popularity_baseline():
    lists = popularity_topk({"a": 3, "b": 5, "c": 3, "z": 0}, ["s1", "s2"], k=2, exclude=["b"])
    assert [t.items for t in lists] == [["a", "c"], ["a", "c"]]
    assert lists[0].scores == [0.5, 0.5]


def virtual_heavy_checkpoint(scheme="masked"):
    model = SessionTransformer(toy_model_config(scheme=scheme), seed=0)
    # make reserved ids, virtual pages and the mask token the most attractive rows
    table = model.item_table.data
    for i in [0, 1, TOY_IDS["u0"], TOY_IDS["u1"], model.config.mask_token_id]:
        table[i] = 50.0
    return Checkpoint.from_model(model, meta=TOY_META)


@pytest.mark.parametrize("scheme", ["masked", CAUSAL])
def test_predictions_filter_reserved_and_virtual(scheme):
    ckpt = virtual_heavy_checkpoint(scheme)
    sessions = [toy_session(f"s{i}", ["p0", "u0", "p1"][: i + 1], "valid_first_half", virtual={"u0"})
                for i in range(3)]
    lists = predict_topk(ckpt, sessions, k=100)
    real = {f"p{i}" for i in range(6)}
    for t in lists:
        assert set(t.items) == real
        assert t.scores == sorted(t.scores, reverse=True)
        assert len(t.items) < 100


def test_predictions_are_deterministic():
    ckpt = virtual_heavy_checkpoint()
    s = [toy_session("s", ["p2", "p3"], "valid_first_half")]
    assert predict_topk(ckpt, s, k=3) == predict_topk(ckpt.copy(), s, k=3)


def test_predict_rejects_empty_session():
    with pytest.raises(ValueError, match="empty"):
        predict_topk(virtual_heavy_checkpoint(), [toy_session("e", [])])


def test_predict_needs_item_index():
    model = SessionTransformer(toy_model_config())
    with pytest.raises(ValueError, match="item index"):
        predict_topk(model, [toy_session("s", ["p0"])])


# ---------------------------------------------------------------- persistence


def test_topk_file_round_trip(tmp_path):
    lists = [TopKList("b", ["x", "y", "z"], [0.5, 0.3, 0.2]), TopKList("a", ["q"], [1.0])]
    digest = write_topk(lists, tmp_path / "p.jsonl", k=2, meta={"model": "m"})
    back = read_topk(tmp_path / "p.jsonl")
    assert [t.session_id for t in back] == ["a", "b"]
    assert back[1].items == ["x", "y"]
    assert write_topk(lists, tmp_path / "q.jsonl", k=2, meta={"model": "m"}) == digest


def test_topk_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_topk(tmp_path / "missing.jsonl")
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(ValueError, match="malformed"):
        read_topk(tmp_path / "bad.jsonl")
    (tmp_path / "bad2.jsonl").write_text('{"session_id": "a"}\n')
    with pytest.raises(ValueError, match="malformed"):
        read_topk(tmp_path / "bad2.jsonl")


def test_duplicate_items_rejected():
    with pytest.raises(ValueError):
        TopKList("s", ["a", "a"], [0.5, 0.5])
