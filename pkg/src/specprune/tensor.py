"""Dense tensors with reverse-mode autodiff on an explicit gradient tape.

Plain numpy arrays do the arithmetic; a `Tensor` is a thin immutable wrapper
that optionally points at a node on the currently active tape.  Inference
runs untraced (no graph is kept).  Wrapping a computation in ``trace()``
records every op that touches a watched parameter, and ``backward(loss)``
replays the tape in reverse to produce one gradient array per watched
parameter.  Gradients are sums over whatever batch the forward pass saw,
never means; normalization is the caller's business.

Only float32/float64 are supported.  Ops never broadcast beyond numpy's
rules, and matmul additionally requires either a plain 2-D right operand or
exactly matching batch dimensions.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

Array = np.ndarray

# Gradient record: parameter key -> gradient array, same shape as the parameter.
GradientRecord = dict

# Finite stand-in for -inf when masking attention logits; exp() underflows
# to exactly 0.0 after max-subtraction in both float32 and float64.
MASK_VALUE = -1e9

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable dense array, optionally attached to a gradient tape.

    ``data`` is a float32 or float64 ndarray and must never be mutated once
    wrapped; sharing across threads is safe for that reason.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor construction saw NaN or Inf")
        self.data = arr
        self.node = None

    @classmethod
    def _wrap(cls, data: Array, node: "_Node | None" = None) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        traced = " traced" if self.node is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{traced})"


class _Node:
    """One tape entry: how to push a gradient back to the op's inputs."""

    __slots__ = ("tape", "parents", "vjp", "key")

    def __init__(self, tape, parents, vjp, key=None):
        self.tape = tape
        self.parents = parents  # tuple of _Node or None, aligned with vjp output
        self.vjp = vjp  # callable(grad) -> tuple of parent grads; None for leaves
        self.key = key  # parameter key for leaves


class Tape:
    """Single-threaded record of one traced forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict = {}  # param key -> leaf node
        self._params: dict = {}  # param key -> parameter array (for zero grads)

    def watch(self, tensor: Tensor, key) -> Tensor:
        """Register ``tensor`` as a parameter and return its traced view.

        Watching the same key twice returns a view of the same leaf, so all
        uses accumulate into one gradient.
        """
        leaf = self._leaves.get(key)
        if leaf is None:
            leaf = _Node(self, (), None, key=key)
            self._leaves[key] = leaf
            self._params[key] = tensor.data
            self._nodes.append(leaf)
        return Tensor._wrap(tensor.data, leaf)

    def _record(self, out_data: Array, parents, vjp) -> Tensor:
        node = _Node(self, tuple(parents), vjp)
        self._nodes.append(node)
        return Tensor._wrap(out_data, node)


_tls = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class trace:
    """Context manager activating a fresh tape on this thread."""

    def __enter__(self) -> Tape:
        tape = Tape()
        _tape_stack().append(tape)
        self._tape = tape
        return tape

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self._tape
        return False


def _node_of(x, tape: Tape | None):
    if tape is not None and isinstance(x, Tensor) and x.node is not None and x.node.tape is tape:
        return x.node
    return None


def _data(x) -> Array:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _emit(out: Array, inputs: Sequence, vjps: Sequence[Callable | None]) -> Tensor:
    """Wrap an op result, recording it if any input is on the active tape.

    ``vjps[i]`` maps the output gradient to input ``i``'s gradient; entries
    for constant inputs are ignored.
    """
    tape = current_tape()
    if tape is None:
        return Tensor._wrap(out)
    parents = [_node_of(x, tape) for x in inputs]
    if not any(p is not None for p in parents):
        return Tensor._wrap(out)

    def vjp(grad):
        return tuple(
            f(grad) if (p is not None and f is not None) else None
            for p, f in zip(parents, vjps)
        )

    return tape._record(out, parents, vjp)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` after a broadcasting forward op."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd
    return _emit(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, ad.shape), lambda g: _unbroadcast(g, bd.shape)),
    )


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd
    return _emit(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * bd, ad.shape),
            lambda g: _unbroadcast(g * ad, bd.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product.  Right operand is either 2-D (a shared weight) or has
    batch dims identical to the left operand's."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {ad.shape} x {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul batch dims disagree: {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)

    def grad_a(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2))

    def grad_b(g):
        if bd.ndim == 2:
            return np.matmul(
                ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
        return np.matmul(np.swapaxes(ad, -1, -2), g)

    return _emit(out, (a, b), (grad_a, grad_b))


def reshape(x, shape) -> Tensor:
    xd = _data(x)
    out = xd.reshape(shape)
    return _emit(out, (x,), (lambda g: g.reshape(xd.shape),))


def transpose(x, axes) -> Tensor:
    xd = _data(x)
    out = np.transpose(xd, axes)
    inverse = tuple(np.argsort(axes))
    return _emit(out, (x,), (lambda g: np.transpose(g, inverse),))


def slice_rows(x, start: int, stop: int) -> Tensor:
    """First-axis slice; gradient scatters back into a zero array."""
    xd = _data(x)
    out = xd[start:stop]

    def grad(g):
        full = np.zeros_like(xd)
        full[start:stop] = g
        return full

    return _emit(out, (x,), (grad,))


def index_scalar(x, idx: tuple) -> Tensor:
    """Single element as a 0-d tensor; useful as a backward seed."""
    xd = _data(x)
    out = np.asarray(xd[idx])

    def grad(g):
        full = np.zeros_like(xd)
        full[idx] = g
        return full

    return _emit(out, (x,), (grad,))


def sum_all(x) -> Tensor:
    xd = _data(x)
    out = np.asarray(xd.sum())
    return _emit(out, (x,), (lambda g: np.broadcast_to(g, xd.shape).copy(),))


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x, axis: int = -1, mask: Array | None = None) -> Tensor:
    """Max-subtracted softmax; output sums to 1 along ``axis``.

    ``mask`` is an optional constant added to the logits before normalizing
    (e.g. a causal mask); it does not change the gradient formula.
    """
    xd = _data(x)
    out = xd + mask if mask is not None else xd.copy()
    out -= out.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def grad(g):
        res = g * out
        inner = res.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=res)
        res *= out
        return res

    return _emit(out, (x,), (grad,))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU.

    Written as in-place chains: these arrays dominate training's memory
    traffic, so every avoided temporary is a DRAM round-trip saved.
    """
    xd = _data(x)
    t = xd * xd
    t *= xd
    t *= 0.044715
    t += xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = 1.0 + t
    out *= xd
    out *= 0.5

    def grad(g):
        inner = xd * xd
        inner *= 3 * 0.044715
        inner += 1.0
        inner *= _GELU_C  # d/dx of the tanh argument
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        inner *= sech2
        inner *= xd
        inner += 1.0 + t
        inner *= 0.5
        inner *= g
        return inner

    return _emit(out, (x,), (grad,))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out = norm * gd
    out += bd
    lead = tuple(range(xd.ndim - 1))

    def grad_x(g):
        gn = g * gd
        m1 = gn.mean(axis=-1, keepdims=True)
        m2 = (gn * norm).mean(axis=-1, keepdims=True)
        gn -= m1
        gn -= norm * m2
        gn *= inv
        return gn

    def grad_gain(g):
        return (g * norm).sum(axis=lead) if lead else g * norm

    def grad_bias(g):
        return g.sum(axis=lead) if lead else g

    return _emit(out, (x, gain, bias), (grad_x, grad_gain, grad_bias))


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    td = _data(table)
    idx = np.asarray(ids)
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise IndexError(
            f"token id out of range: ids in [{idx.min()}, {idx.max()}], "
            f"table has {td.shape[0]} rows"
        )
    out = td[idx]

    def grad(g):
        full = np.zeros_like(td)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, td.shape[1]))
        return full

    return _emit(out, (table,), (grad,))


def cross_entropy(logits, targets) -> Tensor:
    """Summed next-token cross-entropy.

    ``logits`` is [N, V], ``targets`` [N] integer class ids; the result is the
    sum (not mean) of per-row ``logsumexp(row) - row[target]``.
    """
    ld = _data(logits)
    t = np.asarray(targets).reshape(-1)
    if ld.ndim != 2 or t.shape[0] != ld.shape[0]:
        raise DimensionError(f"cross_entropy wants [N,V] logits and [N] targets, got {ld.shape} and {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= ld.shape[1]):
        raise IndexError(f"target id out of range for vocab {ld.shape[1]}")
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=1)
    log_z = np.log(z) + m[:, 0]
    picked = ld[np.arange(ld.shape[0]), t]
    out = np.asarray((log_z - picked).sum())
    if not np.isfinite(out):
        raise NumericError("cross_entropy produced a non-finite loss")

    def grad(g):
        p = e / z[:, None]
        p[np.arange(ld.shape[0]), t] -= 1.0
        return p * g

    return _emit(out, (logits,), (grad,))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> GradientRecord:
    """Reverse-sweep the tape behind a traced scalar.

    Returns one gradient array per watched parameter; parameters the loss
    never touched get exact zeros.  Two identical calls produce bitwise
    identical results (the sweep order is the fixed tape order).
    """
    if not isinstance(loss, Tensor) or loss.node is None:
        raise UsageError("backward needs a traced tensor (run the forward pass under trace())")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar, got shape {loss.data.shape}")
    tape = loss.node.tape
    grads: dict[int, Array] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            if g is not None and node.vjp is None:
                grads[id(node)] = g  # leaf: keep for collection below
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    record: GradientRecord = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(id(leaf))
        record[key] = g if g is not None else np.zeros_like(tape._params[key])
    return record
