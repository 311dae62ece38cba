import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sessrec import autodiff as ad
from sessrec.autodiff import Parameter, Tensor


def scalarize(y: Tensor, seed: int = 99) -> Tensor:
    """Weighted sum of y with fixed random weights, so every output coordinate matters."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return ad.mean(ad.mul(y, Tensor(w)))


def P(name, shape, rng, scale=1.0):
    return Parameter(name, rng.normal(0.0, scale, shape))


def mha_params(d, rng):
    out = {}
    for w in "qkvo":
        out[f"W{w}"] = P(f"W{w}", (d, d), rng, 1 / math.sqrt(d))
        out[f"b{w}"] = P(f"b{w}", (d,), rng, 0.1)
    return out


# ---------------------------------------------------------------- forward values


def test_l2_normalize_three_four_five():
    y = ad.l2_normalize(Tensor([3.0, 4.0]))
    np.testing.assert_allclose(y.data, [0.6, 0.8])
    assert np.linalg.norm(y.data) == pytest.approx(1.0)


def test_l2_normalize_zero_vector_gives_zero_and_zero_grad():
    x = Parameter("x", np.zeros((2, 3)))
    y = ad.l2_normalize(x)
    assert np.all(y.data == 0)
    ad.backward(scalarize(y))
    assert np.all(x.grad == 0)


def test_layer_norm_of_constant_is_zero():
    x = Tensor(np.full((1, 6), 3.7))
    y = ad.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_concat_shapes():
    y = ad.concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 5)))], axis=-1)
    assert y.shape == (2, 8)


def test_concat_rejects_mismatch():
    with pytest.raises(ValueError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 5)))], axis=-1)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_add_shape_mismatch():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


def test_cross_entropy_uniform_is_ln2():
    loss = ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
    assert float(loss.data) == pytest.approx(math.log(2))


def test_cross_entropy_confident():
    loss = ad.softmax_cross_entropy(Tensor([[10.0, -10.0]]), np.array([0]))
    assert float(loss.data) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert float(loss.data) == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_ignored_position_does_not_count():
    logits = np.array([[1.0, 2.0, 0.5], [4.0, -1.0, 0.0]])
    both = ad.softmax_cross_entropy(Tensor(logits), np.array([2, ad.IGNORE]))
    one = ad.softmax_cross_entropy(Tensor(logits[:1]), np.array([2]))
    assert float(both.data) == float(one.data)


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([ad.IGNORE, ad.IGNORE]))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.array([[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]])
    x = Parameter("z", z.copy())
    ad.backward(ad.softmax_cross_entropy(x, np.array([1, 2])))
    expected = ad.softmax(z)
    expected[[0, 1], [1, 2]] -= 1.0
    np.testing.assert_allclose(x.grad, expected / 2, atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(ad.softmax(x).sum(axis=-1), 1.0, atol=1e-6)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-1e3, 1e3)).filter(lambda a: np.all(np.linalg.norm(a, axis=-1) > 1e-6)))
def test_l2_normalize_unit_norm(x):
    y = ad.l2_normalize(Tensor(x))
    np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- attention


def test_attention_single_token_is_value_projection(rng):
    d = 4
    params = mha_params(d, rng)
    x = Tensor(rng.normal(size=(1, d)))
    y = ad.multi_head_attention(x, np.zeros((1, 1)), params, heads=2)
    v = x.data @ params["Wv"].data + params["bv"].data
    np.testing.assert_allclose(y.data, v @ params["Wo"].data + params["bo"].data, atol=1e-12)


def test_causal_mask_position_zero_ignores_future(rng):
    d = 4
    params = mha_params(d, rng)
    x = rng.normal(size=(3, d))
    y0 = ad.multi_head_attention(Tensor(x), ad.causal_mask(3), params, heads=2).data
    x2 = x.copy()
    x2[1:] += rng.normal(size=(2, d)) * 10
    y1 = ad.multi_head_attention(Tensor(x2), ad.causal_mask(3), params, heads=2).data
    assert np.array_equal(y0[0], y1[0])
    assert not np.array_equal(y0[2], y1[2])


@given(st.integers(2, 7), st.integers(0, 10_000))
def test_causal_invariance_property(n, seed):
    r = np.random.default_rng(seed)
    d = 4
    params = mha_params(d, r)
    x = r.normal(size=(n, d))
    t = int(r.integers(0, n - 1))
    base = ad.multi_head_attention(Tensor(x), ad.causal_mask(n), params, heads=2).data
    x2 = x.copy()
    x2[t + 1 :] = r.normal(size=(n - t - 1, d)) * 5
    pert = ad.multi_head_attention(Tensor(x2), ad.causal_mask(n), params, heads=2).data
    assert np.array_equal(base[: t + 1], pert[: t + 1])


def test_blocked_keys_get_exactly_zero_weight():
    scores = np.array([[1.0, 2.0, 3.0]])
    w = ad.attention_weights(scores, np.array([[0.0, -np.inf, 0.0]]))
    assert w[0, 1] == 0.0
    assert w.sum() == pytest.approx(1.0)


def test_fully_blocked_row_attends_to_self():
    scores = np.zeros((3, 3))
    mask = np.zeros((3, 3))
    mask[1, :] = -np.inf
    w = ad.attention_weights(scores, mask)
    np.testing.assert_array_equal(w[1], [0.0, 1.0, 0.0])
    assert np.all(np.isfinite(w))


def test_heads_must_divide_width(rng):
    with pytest.raises(ValueError):
        ad.multi_head_attention(Tensor(rng.normal(size=(2, 5))), np.zeros((2, 2)), mha_params(5, rng), heads=2)


# ---------------------------------------------------------------- tape


def test_no_grad_records_nothing():
    ad.clear_tape()
    x = Parameter("x", np.ones(3))
    with ad.no_grad():
        ad.scale(x, 2.0)
    assert ad.tape_length() == 0


def test_backward_clears_tape():
    x = Parameter("x", np.ones(3))
    loss = ad.mean(ad.scale(x, 2.0))
    assert ad.tape_length() > 0
    ad.backward(loss)
    assert ad.tape_length() == 0
    np.testing.assert_allclose(x.grad, 2.0 / 3)


def test_backward_needs_scalar():
    x = Parameter("x", np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.scale(x, 2.0))
    ad.clear_tape()


def test_tape_is_per_thread():
    ad.clear_tape()
    seen = []

    def work():
        x = Parameter("x", np.ones(2))
        ad.scale(x, 3.0)
        seen.append(ad.tape_length())
        ad.clear_tape()

    t = threading.Thread(target=work)
    t.start()
    t.join()
    assert seen == [1]
    assert ad.tape_length() == 0


def test_shared_parameter_accumulates_from_both_uses():
    E = Parameter("E", np.array([[1.0, 2.0], [3.0, 4.0]]))
    a = ad.embedding_lookup(E, np.array([0]))
    b = ad.matmul_transposed(Tensor([[1.0, 1.0]]), E)
    ad.backward(ad.add(ad.mean(a), ad.mean(b)))
    # lookup contributes 0.5 to row 0; the product contributes 0.5 to every entry
    np.testing.assert_allclose(E.grad, [[1.0, 1.0], [0.5, 0.5]])


# ---------------------------------------------------------------- gradient checks


def check(loss_fn, params, tol=1e-6):
    err = ad.grad_check(loss_fn, params, samples_per_param=None)
    assert err < tol, err


def test_grad_linear(rng):
    x = P("x", (3, 4), rng)
    W = P("W", (4, 5), rng)
    b = P("b", (5,), rng)
    err = ad.grad_check(lambda: scalarize(ad.linear(x, W, b)), [x, W, b], samples_per_param=None)
    assert err < 1e-7


def test_grad_linear_batched(rng):
    x = P("x", (2, 3, 4), rng)
    W = P("W", (4, 5), rng)
    b = P("b", (5,), rng)
    check(lambda: scalarize(ad.linear(x, W, b)), [x, W, b])


def test_grad_add_mul_broadcast(rng):
    a = P("a", (2, 3, 4), rng)
    b = P("b", (3, 1), rng)
    c = P("c", (4,), rng)
    check(lambda: scalarize(ad.mul(ad.add(a, b), c)), [a, b, c])


def test_grad_scale_and_add_scalar(rng):
    a = P("a", (3, 2), rng)
    check(lambda: scalarize(ad.add_scalar(ad.scale(a, -1.7), 0.3)), [a])


def test_grad_gelu(rng):
    a = P("a", (4, 5), rng, 2.0)
    check(lambda: scalarize(ad.gelu(a)), [a])


def test_grad_reshape_concat_mean(rng):
    a = P("a", (2, 3), rng)
    b = P("b", (2, 5), rng)
    check(lambda: scalarize(ad.mean(ad.reshape(ad.concat([a, b], axis=-1), (4, 4)), axis=0)), [a, b])


def test_grad_take_rows(rng):
    a = P("a", (5, 3), rng)
    check(lambda: scalarize(ad.take_rows(a, np.array([4, 0, 4, 2]))), [a])


def test_grad_embedding_with_repeats(rng):
    E = P("E", (6, 3), rng)
    check(lambda: scalarize(ad.embedding_lookup(E, np.array([[1, 1, 5], [0, 1, 2]]))), [E])


def test_grad_matmul_transposed(rng):
    x = P("x", (2, 3, 4), rng)
    E = P("E", (7, 4), rng)
    check(lambda: scalarize(ad.matmul_transposed(x, E)), [x, E])


def test_grad_layer_norm(rng):
    x = P("x", (3, 6), rng)
    g = P("g", (6,), rng)
    b = P("b", (6,), rng)
    check(lambda: scalarize(ad.layer_norm(x, g, b)), [x, g, b])


def test_grad_l2_normalize(rng):
    x = P("x", (3, 4), rng)
    check(lambda: scalarize(ad.l2_normalize(x)), [x])


def test_grad_cross_entropy(rng):
    z = P("z", (4, 6), rng)
    t = np.array([1, ad.IGNORE, 5, 0])
    check(lambda: ad.softmax_cross_entropy(z, t), [z])


@pytest.mark.parametrize("batched", [False, True])
def test_grad_multi_head_attention(rng, batched):
    d = 6
    params = mha_params(d, rng)
    shape = (2, 4, d) if batched else (4, d)
    x = P("x", shape, rng)
    mask = ad.causal_mask(4)
    if batched:
        mask = np.stack([mask, np.where(np.arange(4)[None, :] < 3, 0.0, -np.inf).repeat(4, 0)])
    def f():
        return scalarize(ad.multi_head_attention(x, mask, params, heads=3))

    # scores are shift-invariant per query, so the key bias has an exactly zero
    # gradient; finite differences there are pure noise
    check(f, [x, *(p for k, p in params.items() if k != "bk")])
    ad.backward(f())
    np.testing.assert_allclose(params["bk"].grad, 0.0, atol=1e-12)


def test_grad_check_zero_params():
    assert ad.grad_check(lambda: Tensor(1.0), []) == 0.0


def test_grad_check_needs_float64():
    x = Parameter("x", np.ones(3, dtype=np.float32))
    with pytest.raises(ValueError):
        ad.grad_check(lambda: ad.mean(x), [x])


def test_grad_check_flags_non_finite():
    x = Parameter("x", np.array([1e-300]))

    def f():
        return ad.mean(ad.mul(x, Tensor([np.inf])))

    with pytest.raises(FloatingPointError):
        ad.grad_check(f, [x])
    ad.clear_tape()


def test_grad_check_detects_wrong_gradient():
    x = Parameter("x", np.array([1.0, 2.0]))

    def broken():
        out = Tensor(np.asarray((x.data**2).sum()))
        return ad._record(out, (x,), lambda g: (g * x.data,))  # should be 2x

    assert ad.grad_check(broken, [x]) > 0.1
