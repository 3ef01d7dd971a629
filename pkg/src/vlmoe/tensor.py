"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss, {"w": w})

Outside a tape every op is a plain numpy evaluation, which is what inference
and the finite-difference oracles use.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

DTYPE = np.float64
LAYERNORM_EPS = 1e-6
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, reused tape)."""


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "grad_node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.grad_node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Records differentiable ops in execution order (hence topological order)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> int:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been back-propagated")
        self.nodes.append(_Node(out, parents, backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        """Back-propagate a scalar loss.

        Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated. When
        ``wrt`` is given, a name -> gradient map is returned, with zeros for
        parameters the loss does not reach.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.grad_node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.grad_node is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes = []
        if wrt is None:
            return {}
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in wrt.items()
        }


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape; wrap the forward pass in `with Tape():`")
    return tape.backward(loss, wrt)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out.grad_node = tape.record(out, parents, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def normal_pdf(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def standard_normal_cdf(a) -> Tensor:
    """Phi(x). Differentiable (derivative is the normal pdf) so the load loss can use it."""
    a = as_tensor(a)
    return _result(ndtr(a.data), (a,), lambda g: (g * normal_pdf(a.data),))


def gelu(a) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = ndtr(x)
    return _result(x * cdf, (a,), lambda g: (g * (cdf + x * normal_pdf(x)),))


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + size)
        out.append(index_select(a, tuple(sl)))
        start += size
    return out


def index_select(a, index) -> Tensor:
    """Basic or fancy indexing; the backward scatter-adds so repeated indices accumulate."""
    a = as_tensor(a)

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)


def embedding_gather(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


def scatter_add_rows(values, rows, n_rows: int) -> Tensor:
    """Zero [n_rows, ...] tensor with ``values[i]`` added into row ``rows[i]``."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n_rows,) + values.shape[1:], dtype=DTYPE)
    np.add.at(out, rows, values.data)
    return _result(out, (values,), lambda g: (g[rows],))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- fused nn ops


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def logsumexp(a, axis: int = -1) -> Tensor:
    """log(sum(exp)) along ``axis`` (dropped), max-subtracted then corrected."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s
    return _result(out, (a,), lambda g: (np.expand_dims(g, axis) * p,))


def layernorm(x, gain, bias, eps: float = LAYERNORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm width {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bw)


def cross_entropy(logits, targets, ignore_mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions not ignored (0 if none)."""
    logits = as_tensor(logits)
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    use = np.ones(n, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    count = int(use.sum())
    if count == 0:
        return _result(np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),))
    tgt = targets[use]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    rows = logits.data[use]
    m = rows.max(axis=1, keepdims=True)
    e = np.exp(rows - m)
    s = e.sum(axis=1, keepdims=True)
    logp = rows - m - np.log(s)
    loss = -logp[np.arange(count), tgt].mean()

    def bw(g):
        p = e / s
        p[np.arange(count), tgt] -= 1.0
        full = np.zeros_like(logits.data)
        full[use] = p * (g / count)
        return (full,)

    return _result(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    """Write ``[u64 header length][JSON header][little-endian float64 payload]``.

    The header maps each name to its shape and byte offset within the payload.
    """
    header = {}
    offset = 0
    for name, t in params.items():
        header[name] = {"shape": list(t.shape), "offset": offset}
        offset += t.data.size * 8
    blob = json.dumps(header, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    payload = raw[8 + hlen :]
    out = {}
    for name, meta in header.items():
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        out[name] = arr.astype(DTYPE).reshape(meta["shape"])
    return out
