"""Reverse-mode automatic differentiation over dense numpy arrays.

A `DenseArray` wraps an `np.ndarray`; while a `Tape` is active, every
operation appends one record (inputs, output, backward rule) to the tape.
`Tape.backward` replays the records once, in reverse order, accumulating
gradients into the `.grad` of every leaf that was created with
`requires_grad=True`.

Only the operations needed by the flow/attention stack are provided.
Broadcasting is deliberately restricted: shapes are right-aligned and only
one operand may expand (scalars, missing leading axes, or size-1 axes).
Anything else raises `ShapeError` naming the operation and both shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class GradEngineError(ValueError):
    """Base class for gradient-engine failures."""


class ShapeError(GradEngineError):
    """An operation received arrays whose shapes it cannot combine."""


# ---------------------------------------------------------------------------
# arrays and tape
# ---------------------------------------------------------------------------


class DenseArray:
    """Dense float array participating in reverse-mode differentiation.

    `data` is treated as immutable while any tape referencing it is alive;
    optimizers may rebind/mutate `.data` between tapes. `.grad` is a plain
    ndarray (or None), written by `Tape.backward` for leaves only.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- introspection ------------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DenseArray(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operators ----------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return neg(self)

    # -- conveniences -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def detach(self):
        return detach(self)


def as_dense(x, dtype=None) -> DenseArray:
    """Coerce scalars / ndarrays / DenseArrays to DenseArray (constant leaf)."""
    if isinstance(x, DenseArray):
        return x
    return DenseArray(x, dtype=dtype)


class TapeOp:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("name", "inputs", "output", "backward_rule")

    def __init__(self, name, inputs, output, backward_rule):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


_TAPE_STACK: list["Tape | None"] = []


class Tape:
    """Ordered record of operations for one reverse sweep.

    Entering the tape makes it the active recording target; `backward`
    seeds the output gradient and invokes each recorded backward rule
    exactly once, in reverse recording order. Rules for operations that do
    not feed the requested output receive a zero upstream gradient (they
    are still invoked — a tape with n records performs n rule calls).
    """

    def __init__(self):
        self.ops: list[TapeOp] = []
        self.backward_calls = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GradEngineError("tape stack corrupted: exited a non-innermost tape")
        return False

    def record(self, name, inputs, output, backward_rule) -> None:
        self.ops.append(TapeOp(name, inputs, output, backward_rule))

    def backward(self, output: DenseArray, seed: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into each requiring leaf's `.grad`."""
        if not isinstance(output, DenseArray):
            raise GradEngineError("backward target must be a DenseArray")
        if seed is None:
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=output.dtype)}
        for op in reversed(self.ops):
            upstream = grads.pop(id(op.output), None)
            if upstream is None:
                upstream = np.zeros_like(op.output.data)
            input_grads = op.backward_rule(upstream)
            self.backward_calls += 1
            if len(input_grads) != len(op.inputs):  # pragma: no cover - op author bug
                raise GradEngineError(f"{op.name}: backward rule produced {len(input_grads)} "
                                      f"gradients for {len(op.inputs)} inputs")
            for inp, g in zip(op.inputs, input_grads):
                if g is None:
                    continue
                if g.shape != inp.data.shape:
                    raise ShapeError(f"{op.name}: backward produced gradient of shape {g.shape} "
                                     f"for input of shape {inp.data.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for op in self.ops:
            for inp in op.inputs:
                if inp.requires_grad and id(inp) in grads:
                    g = grads.pop(id(inp))
                    inp.grad = g if inp.grad is None else inp.grad + g


class _NoGrad:
    """Context manager suppressing tape recording (pushes a None tape)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def no_grad() -> _NoGrad:
    return _NoGrad()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _register(name: str, inputs: Sequence[DenseArray], out: DenseArray, backward_rule) -> DenseArray:
    tape = _active_tape()
    if tape is not None:
        tape.record(name, tuple(inputs), out, backward_rule)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _check_broadcast(name: str, sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Right-aligned broadcast where at most one operand expands."""
    out = []
    a_expands = b_expands = False
    for i in range(1, max(len(sa), len(sb)) + 1):
        da = sa[-i] if i <= len(sa) else 1  # missing leading axes act as size 1
        db = sb[-i] if i <= len(sb) else 1
        if da == db:
            out.append(da)
        elif da == 1:
            a_expands = True
            out.append(db)
        elif db == 1:
            b_expands = True
            out.append(da)
        else:
            raise ShapeError(f"{name}: shapes {sa} and {sb} are not broadcastable")
    if a_expands and b_expands:
        raise ShapeError(f"{name}: broadcast may expand only one operand, got {sa} and {sb}")
    return tuple(reversed(out))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` back down to `shape` (inverse of one-sided broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _check_broadcast("add", a.shape, b.shape)
    out = DenseArray(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _register("add", (a, b), out, backward)


def sub(a, b) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _check_broadcast("sub", a.shape, b.shape)
    out = DenseArray(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _register("sub", (a, b), out, backward)


def mul(a, b) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _check_broadcast("mul", a.shape, b.shape)
    out = DenseArray(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _register("mul", (a, b), out, backward)


def div(a, b) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _check_broadcast("div", a.shape, b.shape)
    out = DenseArray(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _register("div", (a, b), out, backward)


def neg(a) -> DenseArray:
    a = as_dense(a)
    out = DenseArray(-a.data)
    return _register("neg", (a,), out, lambda g: (-g,))


def exp(a) -> DenseArray:
    a = as_dense(a)
    out = DenseArray(np.exp(a.data))
    return _register("exp", (a,), out, lambda g: (g * out.data,))


def abs_(a) -> DenseArray:
    """|a| with subgradient 0 at 0."""
    a = as_dense(a)
    out = DenseArray(np.abs(a.data))
    return _register("abs", (a,), out, lambda g: (g * np.sign(a.data),))


def power(a, exponent: float) -> DenseArray:
    """a ** p for a fixed scalar exponent p."""
    a = as_dense(a)
    p = float(exponent)
    out = DenseArray(a.data ** p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _register("power", (a,), out, backward)


def sigmoid(a) -> DenseArray:
    a = as_dense(a)
    x = a.data
    z = np.exp(-np.abs(x))  # one exp pass; stable for both signs
    s = np.where(x >= 0, 1.0, z) / (1.0 + z)
    out = DenseArray(s.astype(x.dtype, copy=False))

    def backward(g):
        return (g * out.data * (1.0 - out.data),)

    return _register("sigmoid", (a,), out, backward)


def clip(a, lo: float, hi: float) -> DenseArray:
    """Clamp to [lo, hi]; gradient passes where lo <= a <= hi (inclusive)."""
    a = as_dense(a)
    if not lo <= hi:
        raise GradEngineError(f"clip: empty interval [{lo}, {hi}]")
    out = DenseArray(np.clip(a.data, lo, hi))
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)

    def backward(g):
        return (g * mask,)

    return _register("clip", (a,), out, backward)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a, b) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")
    elif b.ndim != 2:
        raise ShapeError(f"matmul: unsupported rank combination {a.shape} @ {b.shape}")
    out = DenseArray(a.data @ b.data)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if a.ndim == b.ndim:
            gb = np.swapaxes(a.data, -1, -2) @ g
        else:  # stacked a against a single matrix b: fold batch into rows
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _register("matmul", (a, b), out, backward)


def transpose(a) -> DenseArray:
    """Swap the last two axes."""
    a = as_dense(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs ndim >= 2, got {a.shape}")
    out = DenseArray(np.swapaxes(a.data, -1, -2))
    return _register("transpose", (a,), out, lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, *shape) -> DenseArray:
    a = as_dense(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out = DenseArray(a.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    return _register("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat_last(a, b) -> DenseArray:
    """Concatenate along the last axis."""
    a, b = as_dense(a), as_dense(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: leading shapes differ, {a.shape} vs {b.shape}")
    out = DenseArray(np.concatenate([a.data, b.data], axis=-1))
    split = a.shape[-1]

    def backward(g):
        return g[..., :split], g[..., split:]

    return _register("concat_last", (a, b), out, backward)


def softmax_last(a) -> DenseArray:
    """Numerically stable softmax along the last axis."""
    a = as_dense(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = DenseArray(s)

    def backward(g):
        inner = (g * out.data).sum(axis=-1, keepdims=True)
        return (out.data * (g - inner),)

    return _register("softmax_last", (a,), out, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> DenseArray:
    a = as_dense(a)
    axis = _norm_axis(axis, a.ndim)
    out = DenseArray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _register("sum", (a,), out, backward)


def mean(a, axis=None, keepdims: bool = False) -> DenseArray:
    a = as_dense(a)
    axis = _norm_axis(axis, a.ndim)
    out = DenseArray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False),)

    return _register("mean", (a,), out, backward)


def frobenius_sq(a) -> DenseArray:
    """Sum of squared entries (squared Frobenius norm), as a scalar."""
    a = as_dense(a)
    out = DenseArray(np.array((a.data * a.data).sum(), dtype=a.dtype))
    return _register("frobenius_sq", (a,), out, lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# custom gradients
# ---------------------------------------------------------------------------


def custom_grad(forward_fn: Callable, backward_fn: Callable, name: str = "custom"):
    """Build an op from a raw-ndarray forward and a hand-written backward.

    `forward_fn(*datas) -> ndarray`; `backward_fn(grad_out, *datas)` returns
    one gradient per input (ndarray of the input's shape, or None). Produced
    gradient shapes are validated against the inputs at backward time.
    """

    def op(*xs):
        arrs = tuple(as_dense(x) for x in xs)
        datas = tuple(a.data for a in arrs)
        out = DenseArray(np.asarray(forward_fn(*datas)))

        def backward(g):
            grads = backward_fn(g, *datas)
            if not isinstance(grads, tuple):
                grads = (grads,)
            return tuple(None if gi is None else np.asarray(gi) for gi in grads)

        return _register(name, arrs, out, backward)

    return op


detach = custom_grad(lambda x: x.copy(), lambda g, x: np.zeros_like(x), name="detach")
"""Identity forward; gradient is exactly zero (cuts the graph)."""

ste_round = custom_grad(lambda x: np.floor(x + 0.5), lambda g, x: g, name="ste_round")
"""Round half-up in the forward pass; straight-through identity backward."""


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[DenseArray], DenseArray], point: DenseArray,
               eps: float | None = None) -> float:
    """Max relative error between tape gradient and central finite differences.

    `fn` must map a single DenseArray to a scalar DenseArray and be
    deterministic. The checked leaf is promoted to float64 (finite
    differences are meaningless at float32 resolution); values `fn` closes
    over may stay 32-bit — ops promote downstream of the leaf, and anything
    not depending on it cancels exactly in the central difference. Relative
    error per coordinate uses the denominator max(|g_tape|, |g_fd|,
    1e-4 * gscale) where gscale is the largest gradient magnitude seen, so
    exact-zero coordinates do not blow up.
    """
    x0 = np.array(point.data, copy=True, dtype=np.float64)
    if eps is None:
        eps = 1e-5

    leaf = DenseArray(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(leaf)
        if out.shape != ():
            raise GradEngineError(f"grad_check: fn must return a scalar, got shape {out.shape}")
        tape.backward(out)
    g_tape = np.zeros_like(x0) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)

    g_fd = np.zeros(x0.size, dtype=np.float64)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn(DenseArray(x0.copy())).item()
            flat[i] = orig - eps
            f_minus = fn(DenseArray(x0.copy())).item()
            flat[i] = orig
            g_fd[i] = (f_plus - f_minus) / (2.0 * eps)
    g_fd = g_fd.reshape(x0.shape)

    if not (np.all(np.isfinite(g_tape)) and np.all(np.isfinite(g_fd))):
        raise GradEngineError("grad_check: non-finite gradient encountered")
    gscale = max(np.abs(g_tape).max(initial=0.0), np.abs(g_fd).max(initial=0.0), 1e-12)
    denom = np.maximum(np.maximum(np.abs(g_tape), np.abs(g_fd)), 1e-4 * gscale)
    return float((np.abs(g_tape - g_fd) / denom).max())


def zero_grads(params: Iterable[DenseArray]) -> None:
    for p in params:
        p.grad = None
