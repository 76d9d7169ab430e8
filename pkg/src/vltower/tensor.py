"""Dense tensors with a tape-based reverse-mode autodiff.

Arrays are numpy-backed and row-major. Every op is a plain function that
computes its result eagerly and, when a :class:`Tape` is recording and an
input requires grad, appends a record holding the backward closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_default_dtype = np.float32
_debug = False
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


class AutodiffError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


def set_debug(flag: bool) -> None:
    """Scan every op output for NaN/Inf when enabled."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            if np.issubdtype(arr.dtype, np.bool_) or np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; all of these route through the recorded ops below
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad=requires_grad)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op records for one forward/backward pass.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded when at least one input requires grad.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def contains(self, t: Tensor) -> bool:
        return t.node_id is not None and t.node_id < len(self.records) and self.records[t.node_id].output is t


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class no_record:
    """Suspend recording (evaluation passes)."""

    def __enter__(self):
        self._saved = list(_tape_stack)
        _tape_stack.clear()

    def __exit__(self, *exc):
        _tape_stack.extend(self._saved)


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _debug and np.issubdtype(out_data.dtype, np.floating) and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.records)
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from ``root`` that requires grad.

    Grads accumulate into existing ``.grad`` arrays until :func:`zero_grad`.
    """
    if root.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    tape = active_tape()
    if tape is None or not tape.contains(root):
        raise AutodiffError("root is not recorded on the active tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records[: root.node_id + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        out = rec.output
        out.grad = g if out.grad is None else out.grad + g
        in_grads = rec.backward(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if inp.node_id is None or not tape.contains(inp):
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != leaf.shape:
            raise ShapeError("backward", leaf.shape, g.shape)
        leaf.grad = g.astype(leaf.dtype, copy=False) if leaf.grad is None else leaf.grad + g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_trailing(op: str, a: Tensor, b: Tensor) -> None:
    """Only leading-axis expansion is allowed: the smaller operand must
    match the trailing extents of the larger one exactly."""
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(op, f"trailing {big.shape[big.ndim - small.ndim:] if small.ndim else big.shape}", small.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` may be a 2-D weight shared across all leading axes of ``a``;
    otherwise leading extents must be equal.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", f"(..., n, k) @ (..., k, m) with k={ad.shape[-1] if ad.ndim else '?'}", (a.shape, b.shape))
    if bd.ndim == 2:
        out = ad @ bd

        def bw(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _emit("matmul", out, (a, b), bw)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError("matmul", f"leading {ad.shape[:-2]}", bd.shape[:-2])
    out = ad @ bd

    def bw_batched(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), bw_batched)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"permutation of {a.ndim} axes", axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{int(np.prod(src))} elements", tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def slice_(a: Tensor, index) -> Tensor:
    src_shape, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dt)
        if _has_array_index(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _emit("slice", np.asarray(a.data[index]), (a,), bw)


def _has_array_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) forces exactly zero weight
    at masked positions. A slice with no kept position yields zeros.
    """
    x = a.data
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(mask, x.shape)
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(np.where(mask, x - m, 0)), 0).astype(x.dtype, copy=False)
        s = e.sum(axis=-1, keepdims=True)
        y = e / np.where(s > 0, s, 1)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", (d,), (gamma.shape, beta.shape))
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gamma, beta), bw)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_SQRT_2_OVER_PI)
    k = x.dtype.type(GELU_COEF)
    x2 = x * x
    t = np.tanh(c * (x + k * x2 * x))
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _emit("gelu", out.astype(x.dtype, copy=False), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1 - y * y),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError("embedding", f"ids in [0, {n})", f"[{ids.min()}, {ids.max()}]")
    src_shape = table.shape

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src_shape[1]))
        return (full,)

    return _emit("embedding", table.data[ids], (table,), bw)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size

        def bw(g):
            return (np.full(shape, g / n, dtype=a.dtype),)

        return _emit("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw)
    ax = axis % a.ndim
    n = shape[ax]

    def bw_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _emit("mean", a.data.mean(axis=ax), (a,), bw_axis)


@dataclass
class DropoutStream:
    """Counter-based randomness keyed by (seed, step, op index)."""

    seed: int
    step: int = 0
    counter: int = 0

    def next_generator(self) -> np.random.Generator:
        rng = np.random.default_rng([self.seed, self.step, self.counter])
        self.counter += 1
        return rng

    def at_step(self, step: int) -> "DropoutStream":
        return DropoutStream(self.seed, step, 0)


def dropout(a: Tensor, p: float, train: bool, stream: DropoutStream | None) -> Tensor:
    if not train or p <= 0.0:
        return a
    if stream is None:
        raise ValueError("dropout in train mode needs a DropoutStream")
    keep = stream.next_generator().random(a.shape) >= p
    m = (keep / (1.0 - p)).astype(a.dtype)
    return _emit("dropout", a.data * m, (a,), lambda g: (g * m,))


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean cross-entropy over positions whose label is not ``ignore_index``.

    With no valid position the loss is defined as 0 (and its grad is 0).
    """
    labels = np.asarray(labels)
    x = logits.data
    c = x.shape[-1]
    if labels.shape != x.shape[:-1]:
        raise ShapeError("cross_entropy", x.shape[:-1], labels.shape)
    flat = x.reshape(-1, c)
    lab = labels.reshape(-1)
    valid = lab != ignore_index
    n_valid = int(valid.sum())
    if n_valid and (lab[valid].min() < 0 or lab[valid].max() >= c):
        raise ShapeError("cross_entropy", f"labels in [0, {c})", f"[{lab[valid].min()}, {lab[valid].max()}]")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, lab, 0)
    picked = logp[np.arange(len(lab)), safe]
    loss = -(picked * valid).sum() / max(n_valid, 1)

    def bw(g):
        if n_valid == 0:
            return (np.zeros_like(x),)
        p = np.exp(logp)
        p[np.arange(len(lab)), safe] -= 1.0
        p *= valid[:, None] / n_valid
        return ((p * g).reshape(x.shape).astype(x.dtype, copy=False),)

    return _emit("cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    coords: Sequence[tuple[int, ...]] | Sequence[int],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is perturbed in place and restored. The relative error at each
    coordinate is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    with Tape():
        out = f(x)
        backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    worst = 0.0
    flat = x.data.reshape(-1)
    for c in coords:
        k = int(np.ravel_multi_index(c, x.shape)) if isinstance(c, tuple) else int(c)
        orig = flat[k]
        flat[k] = orig + h
        with no_record():
            fp = float(f(x).data)
        flat[k] = orig - h
        with no_record():
            fm = float(f(x).data)
        flat[k] = orig
        central = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[k])
        err = abs(a - central) / max(abs(a), abs(central), 1e-8)
        worst = max(worst, err)
    return worst
