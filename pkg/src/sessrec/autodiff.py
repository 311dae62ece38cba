"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable op computes its forward value eagerly and, when any
input requires a gradient, appends a backward closure to the active
thread's tape. ``backward(loss)`` replays the tape in reverse and then
clears it.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def clear_tape() -> None:
    _tape().clear()


def tape_length() -> int:
    return len(_tape())


class Tensor:
    """A numpy array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__


class Parameter(Tensor):
    """A named leaf tensor that the optimizer updates in place."""

    __slots__ = ()

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def _wrap(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape().append((out, tuple(inputs), backward))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` and clear the tape."""
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    try:
        for out, inputs, fn in reversed(tape):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is not None and inp.requires_grad:
                    _accumulate(inp, g)
    finally:
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(k))
    return _record(out, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data + a.data.dtype.type(k))
    return _record(out, (a,), lambda g: (g,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences stay clean)."""
    c = math.sqrt(2.0 / math.pi)
    v = x.data
    inner = c * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t))

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record(out, (x,), bw)


# --------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ValueError("concat of nothing")
    ndim = xs[0].data.ndim
    ax = axis % ndim
    for t in xs:
        if t.data.ndim != ndim or any(t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat shape mismatch: {[t.shape for t in xs]}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=ax))
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, tuple(xs), bw)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor (duplicates allowed)."""
    if x.data.ndim != 2:
        raise ValueError("take_rows expects a 2-D tensor")
    rows = np.asarray(rows, dtype=np.int64)
    out = Tensor(x.data[rows])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return _record(out, (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        out = Tensor(np.asarray(x.data.mean()))
        return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    ax = axis % x.data.ndim
    n = x.shape[ax]
    out = Tensor(x.data.mean(axis=ax))

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _record(out, (x,), bw)


def detach(x: Tensor) -> Tensor:
    """Same values, cut out of the graph."""
    return Tensor(x.data)


# --------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is ``[in, out]``."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} != ({W.shape[1]},)")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, W) if b is None else (x, W, b)

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gW = x.data.reshape(-1, x.shape[-1]).T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _record(out, inputs, bw)


def matmul_transposed(x: Tensor, table: Tensor) -> Tensor:
    """``x @ table.T``: scores of every row of ``table`` against ``x``."""
    if table.data.ndim != 2 or x.shape[-1] != table.shape[1]:
        raise ValueError(f"matmul_transposed shape mismatch: x {x.shape}, table {table.shape}")
    out = Tensor(x.data @ table.data.T)

    def bw(g):
        gx = g @ table.data if x.requires_grad else None
        gt = None
        if table.requires_grad:
            gt = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gt

    return _record(out, (x, table), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = Tensor(table.data[ids])

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm parameter shape mismatch for width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _record(out, (x, gain, bias), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-norm rows over the last axis. Zero rows stay zero with zero gradient."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x.data / safe, 0.0).astype(x.data.dtype)
    out = Tensor(y)

    def bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(norm > 0, (g - y * proj) / safe, 0.0).astype(x.data.dtype),)

    return _record(out, (x,), bw)


# --------------------------------------------------------------------------
# attention


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def _softmax_rows(scores: np.ndarray, blocked: np.ndarray) -> np.ndarray:
    s = np.where(blocked, -np.inf, scores)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked softmax in float64. Fully blocked rows attend to themselves."""
    neg = np.isneginf(mask)
    scores = scores + np.where(neg, 0.0, mask)
    blocked = np.broadcast_to(neg, scores.shape).copy()
    dead = blocked.all(axis=-1)
    if dead.any():
        t = scores.shape[-1]
        eye = np.eye(t, dtype=bool)
        blocked[dead] = ~np.broadcast_to(eye, blocked.shape)[dead]
    return _softmax_rows(scores.astype(np.float64), blocked)


def multi_head_attention(x: Tensor, mask: np.ndarray, params, heads: int) -> Tensor:
    """Scaled dot-product self-attention.

    ``x`` is ``[seq, d]`` or ``[batch, seq, d]``; ``mask`` is additive
    (0 allowed, -inf blocked) and broadcastable to ``[batch, seq, seq]``.
    ``params`` maps ``Wq, bq, Wk, bk, Wv, bv, Wo, bo`` to tensors.
    """
    squeeze = x.data.ndim == 2
    X = x.data[None] if squeeze else x.data
    B, T, d = X.shape
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[-2:] != (T, T):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {T}")
    dh = d // heads
    scale_ = 1.0 / math.sqrt(dh)
    Wq, bq, Wk, bk = params["Wq"], params["bq"], params["Wk"], params["bk"]
    Wv, bv, Wo, bo = params["Wv"], params["bv"], params["Wo"], params["bo"]

    def split(a):
        return a.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    Q = split(X @ Wq.data + bq.data)
    K = split(X @ Wk.data + bk.data)
    V = split(X @ Wv.data + bv.data)
    S = (Q @ K.transpose(0, 1, 3, 2)) * scale_
    A = attention_weights(S, mask[:, None])
    Ac = A.astype(X.dtype)
    O = (Ac @ V).transpose(0, 2, 1, 3).reshape(B, T, d)
    Y = O @ Wo.data + bo.data
    out = Tensor(Y[0] if squeeze else Y)
    inputs = (x, Wq, bq, Wk, bk, Wv, bv, Wo, bo)

    def bw(g):
        G = g[None] if squeeze else g
        G2 = G.reshape(-1, d)
        gWo = O.reshape(-1, d).T @ G2
        gbo = G2.sum(axis=0)
        dO = split(G @ Wo.data.T)
        dA = dO @ V.transpose(0, 1, 3, 2)
        dV = Ac.transpose(0, 1, 3, 2) @ dO
        dS = (A * (dA - (dA * A).sum(axis=-1, keepdims=True))).astype(X.dtype) * scale_
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(B, T, d)

        dQ, dK, dV = merge(dQ), merge(dK), merge(dV)
        Xf = X.reshape(-1, d)
        grads = [None]
        if x.requires_grad:
            dX = dQ @ Wq.data.T + dK @ Wk.data.T + dV @ Wv.data.T
            grads[0] = dX[0] if squeeze else dX
        for dP in (dQ, dK, dV):
            flat = dP.reshape(-1, d)
            grads.extend([Xf.T @ flat, flat.sum(axis=0)])
        grads.extend([gWo, gbo])
        return tuple(grads)

    return _record(out, inputs, bw)


# --------------------------------------------------------------------------
# loss


IGNORE = -1


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, ignore: int = IGNORE) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore``."""
    if logits.data.ndim != 2:
        raise ValueError("logits must be [positions, vocab]")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ValueError("one target per logits row")
    keep = targets != ignore
    n = int(keep.sum())
    if n == 0:
        raise ValueError("all positions ignored")
    if targets[keep].min() < 0 or targets[keep].max() >= logits.shape[1]:
        raise IndexError("target id out of range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(keep)[0]
    nll = logsum[rows] - z[rows, targets[rows]]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets[rows]] -= 1.0
        p[~keep] = 0.0
        return ((p * (float(g) / n)).astype(logits.data.dtype),)

    return _record(out, (logits,), bw)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain (non-differentiable) softmax for inference paths."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    epsilon: float = 1e-5,
    samples_per_param: int | None = 8,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values. Each
    parameter must be float64. ``samples_per_param=None`` checks every
    coordinate.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check needs 64-bit parameters, {p.name} is {p.data.dtype}")
        p.grad = None
    if not params:
        return 0.0
    clear_tape()
    loss = f()
    backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        a_flat = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                up = float(f().data)
                flat[i] = orig - epsilon
                down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while perturbing {p.name}[{i}]")
            num = (up - down) / (2 * epsilon)
            a = float(a_flat[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
