"""A small reverse-mode differentiation tape over numpy arrays.

Only the operations the scorer needs are provided.  Each op records its
parents and a closure returning the gradient for every parent; :func:`backward`
walks the tape in reverse topological order.  Leaf gradients are written once
per backward pass: calling :func:`backward` again before :func:`zero_grad`
raises instead of accumulating.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EmptyReductionError, GradientError, IncompatibleCheckpointError, ShapeError

CHECKPOINT_FORMAT = "pronscore-checkpoint"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.item())

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (indices may repeat)."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(a.data, index, axis=axis), (a,), back)


def select_last(a: Tensor, i: int) -> Tensor:
    """``a[..., i]``."""
    def back(g):
        out = np.zeros_like(a.data)
        out[..., i] = g
        return (out,)

    return _node(a.data[..., i], (a,), back)


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(0.5 * x * (1.0 + t), (a,), back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# Layers


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` with ``W`` stored (in_features, out_features)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} and weight {W.shape} are incompatible")
    parents = [x, W]
    out = x.data @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = out + b.data
        parents.append(b)

    def back(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = g @ W.data.T
        gW = x.data.reshape(-1, W.shape[0]).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _node(out, parents, back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), back)


def _mask_array(mask, like: np.ndarray, op: str) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    _check_broadcast(like, m, op)
    return m


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; masked entries are exactly zero."""
    x = as_tensor(x)
    if mask is None:
        m = None
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        m = _mask_array(mask, x.data, "softmax")
        on = np.broadcast_to(m, np.broadcast_shapes(m.shape, x.shape)) > 0
        if np.any(~on.any(axis=axis)):
            raise EmptyReductionError("softmax: a row is fully masked")
        top = np.where(on, x.data, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(on, np.exp(np.where(on, x.data - top, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), back)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]})")

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _node(table.data[ids], (table,), back)


def masked_mean(x, mask, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = _mask_array(mask, x.data, "masked_mean")
    m = np.broadcast_to(m, x.shape)
    count = m.sum(axis=axis)
    if np.any(count == 0):
        raise EmptyReductionError("masked_mean: a reduction has no unmasked entries")
    out = np.where(m > 0, x.data, 0.0).sum(axis=axis) / count

    def back(g):
        return (np.expand_dims(g / count, axis) * m,)

    return _node(out, (x,), back)


def masked_weighted_sum(x, weights, mask, axis: int = -1) -> Tensor:
    """``sum(weights * x)`` over unmasked entries along ``axis``."""
    x, w = as_tensor(x), as_tensor(weights)
    if x.shape != w.shape:
        raise ShapeError(f"masked_weighted_sum: values {x.shape} vs weights {w.shape}")
    m = np.broadcast_to(_mask_array(mask, x.data, "masked_weighted_sum"), x.shape)
    if np.any(m.sum(axis=axis) == 0):
        raise EmptyReductionError("masked_weighted_sum: a reduction has no unmasked entries")
    on = m > 0
    xv = np.where(on, x.data, 0.0)
    wv = np.where(on, w.data, 0.0)

    def back(g):
        ge = np.expand_dims(g, axis)
        return ge * wv, ge * xv

    return _node((xv * wv).sum(axis=axis), (x, w), back)


def mse_masked(pred, target, mask) -> Tensor:
    """Mean squared error over unmasked elements; ``target`` is a constant."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_masked: prediction {pred.shape} vs target {target.shape}")
    m = np.broadcast_to(_mask_array(mask, pred.data, "mse_masked"), pred.shape) > 0
    count = int(m.sum())
    if count == 0:
        raise EmptyReductionError("mse_masked: every element is masked")
    diff = np.where(m, pred.data - np.where(m, target, 0.0), 0.0)

    def back(g):
        return (g * 2.0 * diff / count,)

    return _node(np.asarray((diff * diff).sum() / count), (pred,), back)


def multi_head_self_attention(x, mask, params: Mapping[str, Tensor], n_heads: int,
                              prefix: str = "") -> Tensor:
    """Scaled dot-product self-attention over ``x`` of shape (B, L, d).

    ``mask`` is (B, L) with 1 for real positions; padded keys get zero weight.
    ``params`` holds ``{prefix}{q,k,v,o}.{W,b}``.
    """
    x = as_tensor(x)
    B, L, d = x.shape
    if d % n_heads:
        raise ShapeError(f"d_model={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (B, L):
        raise ShapeError(f"attention mask {mask.shape} does not match input {x.shape}")

    def heads(name):
        t = linear(x, params[f"{prefix}{name}.W"], params[f"{prefix}{name}.b"])
        return transpose(reshape(t, (B, L, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1, mask=mask[:, None, None, :])
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    return linear(ctx, params[f"{prefix}o.W"], params[f"{prefix}o.b"])


# ---------------------------------------------------------------------------
# Backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every tracked leaf reachable from the scalar ``loss``."""
    if loss.data.ndim != 0:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached: no tracked parameter reaches it")
    if loss._consumed:
        raise GradientError("backward already ran on this graph")
    order = _topo_order(loss)
    for node in order:
        if node.is_leaf and node.grad is not None:
            raise GradientError(f"leaf {node.name or node!r} already holds a gradient; call zero_grad()")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        node._consumed = True
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def zero_grad(params) -> None:
    for p in (params.values() if isinstance(params, Mapping) else params):
        p.grad = None


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters whose gradient is ``None`` (not reached by the loss) are left
    untouched, including their moment estimates.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: {name} has shape {p.shape} but gradient {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Checkpoint container


def save_tensors(path, tensors: Mapping[str, np.ndarray], config: dict, seed: int | None,
                 extra: dict | None = None) -> None:
    """Write a versioned JSON container of named 64-bit tensors."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "seed": seed,
        "tensors": [
            {"name": name, "shape": list(arr.shape),
             "values": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}
            for name, arr in sorted(tensors.items())
        ],
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    tensors = {}
    for entry in doc["tensors"]:
        arr = np.array(entry["values"], dtype=np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, doc
