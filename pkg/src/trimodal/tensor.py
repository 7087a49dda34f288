"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation is a plain function that computes its forward value with
numpy and, when any input requires a gradient, appends a :class:`Node` to the
thread's active :class:`Tape`.  :func:`backward` replays the tape in reverse.

The op set is closed: matmul, add/sub/mul, scale, exp, log, relu, clamp,
conv2d, sum/mean, softmax/log_softmax, embedding lookup, concat, transpose,
reshape, l2_normalize and a fused sigmoid binary cross-entropy.  Binary ops
broadcast only in three shapes: scalar operands, trailing ("row-wise")
operands, and same-rank operands with singleton axes (keepdims form).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "backward",
    "no_grad",
    "get_tape",
    "make_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "relu",
    "clamp",
    "conv2d",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "embedding",
    "concat",
    "transpose",
    "reshape",
    "l2_normalize",
    "l2_normalize_rows",
    "bce_with_logits",
]

NORM_EPS = 1e-12


class Tensor:
    """An n-dimensional float64 array with an optional gradient.

    Parameters
    ----------
    values : array_like
        Copied into a contiguous float64 array.
    requires_grad : bool
        Whether :func:`backward` should populate ``grad`` for this tensor.
    name : str, optional
        Label used by parameter registries and checkpoints.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Node:
    """One recorded operation: inputs, output and the rule mapping the
    output gradient to one gradient (or ``None``) per input."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; append order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    previous = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str, inputs: Sequence[Tensor]):
    if not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.values)) for t in inputs):
            raise NumericalError(f"{op} produced non-finite values from finite inputs")


def make_op(op: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap a forward result and record it on the tape when needed.

    ``backward_fn(grad_out)`` must return one array (or ``None``) per input.
    Extension point for fused ops defined outside this module.
    """
    _check_finite(out, op, inputs)
    requires = _grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires)
    if requires:
        get_tape().record(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor that requires it and feeds ``loss``.

    Gradients accumulate into existing ``grad`` arrays.  The tape is cleared
    afterwards, so a second call needs a fresh forward pass.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad:
        tape.clear()
        raise ContractError("loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.values)}
    owners = {id(loss): loss}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            out = node.output
            out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        # whatever is left never appeared as a node output: leaves
        for key, g in grads.items():
            leaf = owners[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    finally:
        tape.clear()


# -- broadcasting helpers ----------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    for small, big in ((a, b), (b, a)):
        if int(np.prod(small)) == 1 and len(small) <= len(big):
            return big
        if len(small) < len(big) and big[len(big) - len(small):] == small:
            return big
        if len(small) == len(big) and all(s in (1, g) for s, g in zip(small, big)):
            return big
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    out = a.values + b.values
    return make_op("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    out = a.values - b.values
    return make_op("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.values, b.values
    out = av * bv
    return make_op("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return make_op("scale", (x,), x.values * c, lambda g: (g * c,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    return make_op("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.values <= 0):
        raise DomainError("log of a non-positive value")
    xv = x.values
    return make_op("log", (x,), np.log(xv), lambda g: (g / xv,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0
    return make_op("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip values to ``[lo, hi]``; gradient passes where the bound is not active."""
    x = _as_tensor(x)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (x.values >= lo_v) & (x.values <= hi_v)
    out = np.clip(x.values, lo_v, hi_v)
    return make_op("clamp", (x,), out, lambda g: (g * inside,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product for ranks (2,2), (3,3) with equal batch, and (3,2)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or (a.ndim == 2 and b.ndim == 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def rule(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if av.ndim == 3 and bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return make_op("matmul", (a, b), out, rule)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: bad axes {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.values, axes))
    return make_op("transpose", (x,), out, lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {shape}") from exc
    src = x.shape
    return make_op("reshape", (x,), out, lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op("concat", tuple(tensors), out,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(table, ids) -> Tensor:
    """Row lookup: ``out[..., :] = table[ids[...], :]``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError("embedding id out of range")
    out = table.values[ids]

    def rule(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_op("embedding", (table,), out, rule)


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.values.sum(axis=axes, keepdims=keepdims)
    src = x.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return make_op("sum", (x,), out, rule)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- softmax family ----------------------------------------------------------

def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return make_op("softmax", (x,), out,
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    """Log-softmax over the last axis, computed stably."""
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return make_op("log_softmax", (x,), out,
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def l2_normalize(x) -> Tensor:
    """Scale every vector along the last axis to unit Euclidean norm."""
    x = _as_tensor(x)
    norms = np.sqrt((x.values ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DomainError("l2_normalize of a (near) zero-norm vector")
    out = x.values / norms
    return make_op("l2_normalize", (x,), out,
                   lambda g: ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,))


def l2_normalize_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects rank 2, got {x.shape}")
    return l2_normalize(x)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean sigmoid binary cross-entropy against a constant 0/1 target array."""
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: {logits.shape} vs targets {y.shape}")
    z = logits.values
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = 1.0 / (1.0 + np.exp(-z))
    return make_op("bce_with_logits", (logits,), np.array(per.sum() / n),
                   lambda g: (g * (sig - y) / n,))


# -- convolution -------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, ``x`` [N, C, H, W] with ``w`` [O, C, kh, kw]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * ph, wd + 2 * pw
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    xp = np.pad(x.values, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # cols: [N, C, Ho, Wo, kh, kw]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.values.reshape(o, -1)
    out = (cols2 @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias {bias.shape} for {o} output channels")
        out = out + bias.values[None, :, None, None]
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_op("conv2d", tuple(inputs), out, rule)
