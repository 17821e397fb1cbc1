"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of ops the transformer needs are provided. Each op computes
its forward value with numpy and, when any input requires a gradient, stores a
closure that maps the output gradient to input gradients. ``backward`` builds
the tape (a topological order of the graph below the loss) and replays it in
reverse.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPES = {"f64": np.float64, "f32": np.float32}


class ShapeError(ValueError):
    """Raised when operand extents violate an op's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        t.op = op
    return t


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return _record(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def take(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Select entries of ``a`` along ``axis``; ``index`` must not repeat."""
    index = np.asarray(index)
    if len(np.unique(index)) != len(index):
        raise ShapeError("take: index must be unique")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _record(np.take(a.data, index, axis=axis), (a,), backward, "take")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _record(table.data[ids], (table,), backward, "embedding")


def repeat_heads(x: Tensor, groups: int) -> Tensor:
    """[B, Hkv, S, D] -> [B, Hkv*groups, S, D], each kv head broadcast to its query group."""
    if groups == 1:
        return x
    b, h, s, d = x.shape
    out = np.repeat(x.data, groups, axis=1)
    return _record(
        out,
        (x,),
        lambda g: (g.reshape(b, h, groups, s, d).sum(axis=2),),
        "repeat_heads",
    )


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes.

    ``b`` is either 2-D (a weight shared across the leading axes of ``a``) or
    has exactly the leading axes of ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch extents {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward, "matmul")


# --------------------------------------------------------------------------
# nonlinearities and normalisation


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _record(xd * s, (x,), backward, "silu")


def softmax_forward(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis; masked entries come out exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax_rows: fully masked row")
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked softmax over the last axis. ``mask`` broadcasts against ``x``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError as exc:
        raise ShapeError(f"softmax_rows: mask {mask.shape} vs {x.shape}") from exc
    y = softmax_forward(x.data, mask).astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), backward, "softmax_rows")


def rmsnorm_forward(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gain


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rmsnorm: gain {gain.shape} vs input {x.shape}")
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xd * r

    def backward(g):
        u = g * gd
        gx = r * u - xhat * (r * r * (u * xd).sum(axis=-1, keepdims=True) / d)
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx, gg

    return _record(xhat * gd, (x, gain), backward, "rmsnorm")


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


# --------------------------------------------------------------------------
# rotary embedding


def rope_angles(positions: np.ndarray, d_head: int, theta: float) -> np.ndarray:
    """Angles [S, d_head/2] for the given position ids."""
    if d_head % 2:
        raise ShapeError(f"rope: d_head must be even, got {d_head}")
    inv_freq = theta ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope_rotate(x: np.ndarray, angles: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate adjacent pairs (x[2i], x[2i+1]) of the last axis by ``angles``.

    ``angles`` has shape [S, D/2] and lines up with the second-to-last axis.
    """
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    if inverse:
        sin = -sin
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope(x: Tensor, positions: np.ndarray, theta: float = 10000.0) -> Tensor:
    """Rotary embedding for x[..., S, d_head] with one position id per row."""
    angles = rope_angles(positions, x.shape[-1], theta)
    if angles.shape[0] != x.shape[-2]:
        raise ShapeError(f"rope: {angles.shape[0]} positions for {x.shape[-2]} rows")
    return _record(
        rope_rotate(x.data, angles),
        (x,),
        lambda g: (rope_rotate(g, angles, inverse=True),),
        "rope",
    )


# --------------------------------------------------------------------------
# loss


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [n, V], got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    if n == 0:
        raise ShapeError("cross_entropy: no rows")
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError(f"cross_entropy: target out of range [0, {v})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# --------------------------------------------------------------------------
# reverse pass


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topological order of every taped node reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward is None:
        raise ValueError("backward: loss is not on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=p.dtype)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


def zeros(shape, dtype="f64", requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)
