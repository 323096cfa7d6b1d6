"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a closure computing the local
vector-Jacobian product. Node ids are drawn from a global counter, so
creation order is a valid topological order and ``backward`` simply walks
the reachable nodes by decreasing id.

Broadcasting is deliberately absent from the elementwise ops: shapes must
match exactly or one operand must be a Python scalar. Use
:func:`broadcast_to` to expand explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "activation",
    "sigmoid",
    "tanh",
    "relu",
    "rms_norm",
    "reduce",
    "sum",
    "mean",
    "sq_l2",
    "l1",
    "reshape",
    "broadcast_to",
    "index",
    "add_bias",
    "shift",
    "stack",
    "backward",
    "zero_grad",
    "grad_check",
    "no_grad",
    "set_debug",
]

_ids = itertools.count()
_grad_enabled = True
_debug = False

# sigmoid is clipped into the open unit interval; float64 rounds to 1.0 for x > ~37
_SIG_HI = float(np.nextafter(1.0, 0.0))
_SIG_LO = float(np.finfo(np.float64).tiny)


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when ``flag`` is true."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array that can take part in a differentiable computation.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer that ``backward`` accumulates into.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return add(a, -float(b))
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    if not np.isscalar(c):
        raise ShapeError("scale expects a scalar factor")
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either operand may carry leading batch axes as long as the other is a
    plain matrix; gradients of the matrix operand are summed over the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:

        def vjp(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif a.ndim == 2:

        def vjp(g):
            g3 = g.reshape((-1,) + g.shape[-2:])
            b3 = bd.reshape((-1,) + bd.shape[-2:])
            ga = np.einsum("bik,bjk->ij", g3, b3)
            gb = ad.T @ g
            return ga, gb

    else:
        raise ShapeError("matmul: at most one operand may be batched")
    return _result(ad @ bd, (a, b), vjp, "matmul")


# -- activations -------------------------------------------------------------


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    np.clip(out, _SIG_LO, _SIG_HI, out=out)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def rms_norm(x, eps: float = 1e-12) -> Tensor:
    """Divide each vector along the last axis by its root mean square."""
    x = as_tensor(x)
    d = x.shape[-1]
    r = np.sqrt((x.data**2).mean(axis=-1, keepdims=True) + eps)
    out = x.data / r

    def vjp(g):
        proj = (g * x.data).sum(axis=-1, keepdims=True)
        return (g / r - x.data * proj / (d * r**3),)

    return _result(out, (x,), vjp, "rms_norm")


def identity(x) -> Tensor:
    return as_tensor(x)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
}


def activation(kind: str, x) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# -- reductions --------------------------------------------------------------


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")
    axis = axis % x.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), vjp, "sum_axis")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    shape = x.shape
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sq_l2(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _result(np.asarray(np.vdot(d, d)), (x,), lambda g: (2.0 * float(g) * d,), "sq_l2")


def l1(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # np.sign(0) == 0, the subgradient used at the kink
    return _result(np.asarray(np.abs(d).sum()), (x,), lambda g: (float(g) * np.sign(d),), "l1")


_REDUCTIONS = {"sum": sum, "mean": mean, "sq_l2": sq_l2, "l1": l1}


def reduce(kind: str, x) -> Tensor:
    try:
        return _REDUCTIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(x, shape) -> Tensor:
    """Expand size-1 (or missing leading) axes; backward sums them out."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    old = x.shape
    lead = len(shape) - len(old)
    keep = tuple(i + lead for i, s in enumerate(old) if s == 1 and shape[i + lead] != 1)

    def vjp(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if keep:
            g = g.sum(axis=tuple(k - lead for k in keep), keepdims=True)
        return (g.reshape(old),)

    return _result(out, (x,), vjp, "broadcast_to")


def add_bias(x, b) -> Tensor:
    """``x + b`` with ``b`` repeated along every leading axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def shift(x, k: int) -> Tensor:
    """Delay along axis 0: ``out[t] = x[t - k]``, zeros for ``t < k``."""
    x = as_tensor(x)
    if k < 0:
        raise ValueError("shift must be non-negative")
    out = np.zeros_like(x.data)
    if k < x.shape[0]:
        out[k:] = x.data[: x.shape[0] - k]

    def vjp(g):
        back = np.zeros_like(g)
        if k < g.shape[0]:
            back[: g.shape[0] - k] = g[k:]
        return (back,)

    return _result(out, (x,), vjp, "shift")


def index(x, idx) -> Tensor:
    """Numpy indexing (basic or advanced); backward scatters with add."""
    x = as_tensor(x)
    shape = x.shape

    basic = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx)
    )

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx]), (x,), vjp, "index")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty sequence")
    for t in ts[1:]:
        _check_same(ts[0], t, "stack")
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(out, ts, vjp, "stack")


# -- differentiation ---------------------------------------------------------


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not attached to any tensor requiring grad")
    nodes: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack_.extend(p for p in node._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|) over all entries."""
    if not eps > 0:
        raise ValueError(f"invalid epsilon {eps!r}: must be > 0")
    params = list(params)
    zero_grad(params)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(loss_fn().data)
                flat[i] = orig - eps
                lo = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NumericError("loss is not finite under perturbation")
                fd = (hi - lo) / (2.0 * eps)
                err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
                worst = max(worst, err)
    return worst
