"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float32 in training mode and float64 in
verification mode. Every operation records its parents and a backward rule
on the output; ``backward`` replays the recorded graph exactly once in
reverse topological order, accumulates gradients into the leaves, and then
consumes the graph (a second backward raises ``StateError``).

Broadcasting for binary elementwise ops is restricted to equal ranks with
size-1 expansion; 0-d scalars are exempt. Matmul additionally broadcasts
leading batch dimensions.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation contract)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array, optionally tracking gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

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
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalar operands are allowed; tensor operands go through
    # the rank-checked ops below.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, _coerce(1.0 / other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Create a graph node from already-computed forward data.

    ``backward(grad)`` must return one gradient array (or None) per parent.
    This is the extension point used by custom primitives outside this
    module (e.g. the sequence recurrence).
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be scalar and sit on a live graph; the graph is consumed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward already consumed this graph")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")

    topo = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        node._consumed = True
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# broadcast helpers

def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if len(sa) == 0 or len(sb) == 0:
        return  # scalars broadcast against anything
    if len(sa) != len(sb):
        raise DimensionError(f"rank mismatch {sa} vs {sb} (no implicit rank promotion)")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"cannot broadcast {sa} with {sb}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return apply_op(out, (a,), lambda g: (-g * out * out,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as logaddexp(0, x) for stability."""
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    return apply_op(out, (a,), lambda g: (g * _sigmoid(a.data),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    return apply_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def absolute(a: Tensor) -> Tensor:
    return apply_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (no gradient to mask)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape or a.shape != b.shape:
        raise DimensionError(f"where() needs equal shapes, got {mask.shape}/{a.shape}/{b.shape}")
    return apply_op(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)),
    )


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "exp": exp,
    "softplus": softplus,
    "silu": silu,
    "reciprocal": reciprocal,
}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name over the supported elementwise kernels."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op_kind} takes one operand")
    return fn(a)


# ---------------------------------------------------------------------------
# structural ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op(a.data @ b.data, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes (matmul helper)."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return apply_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g: np.ndarray):
        return tuple(np.split(g, offsets, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def back(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return apply_op(a.data[index], (a,), back)


def flip(a: Tensor, axis: int) -> Tensor:
    # Contiguous copies, not views: downstream BLAS calls must see the same
    # memory layout as an explicitly reversed array, so that reversing is
    # bitwise-exactly its own inverse.
    return apply_op(
        np.ascontiguousarray(np.flip(a.data, axis=axis)),
        (a,),
        lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),),
    )


# ---------------------------------------------------------------------------
# reductions and normalizations

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis=axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = axis % a.ndim
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return apply_op(
        np.asarray(out), (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
    )


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = axis % a.ndim
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return apply_op(
        np.asarray(out), (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


def reduce(a: Tensor, kind: str, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return reduce_sum(a, axis=axis, keepdims=keepdims)
    if kind == "mean":
        return reduce_mean(a, axis=axis, keepdims=keepdims)
    raise ContractError(f"unknown reduction {kind!r}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rejects non-finite input."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g: np.ndarray):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return apply_op(out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def back(g: np.ndarray):
        gxhat = g * gain.data
        dx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op(out, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckReport:
    """Per-tensor comparison of analytic vs central-difference gradients."""

    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status}  {self.name}: max rel err {self.max_rel_err:.3e} at {self.worst_index} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, tol {self.tol:.1e})"
        )


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Normalized by max(1, |a|, |b|): relative for O(1) gradients, absolute
    # below that, so tolerances stay meaningful for tiny components.
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
    name: str = "x",
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central
    finite differences, elementwise. ``f`` must be pure; ``x`` should be
    float64 for the documented tolerances to hold.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ContractError(f"step size h={h} outside [1e-6, 1e-4]")
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(x).item()
            flat[i] = orig - h
            lo = f(x).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * h)

    err = _rel_err(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(
        name=name,
        max_rel_err=max_err,
        worst_index=tuple(int(i) for i in worst),
        analytic=float(analytic[worst]) if err.size else 0.0,
        numeric=float(numeric[worst]) if err.size else 0.0,
        tol=tol,
    )


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
) -> list[GradCheckReport]:
    """Gradient-check a zero-argument scalar function against every tensor
    in ``params``. One backward pass supplies all analytic gradients; the
    finite differences perturb each parameter element in place.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ContractError(f"step size h={h} outside [1e-6, 1e-4]")
    for p in params.values():
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ContractError("grad_check_params needs a scalar-valued function")
    backward(out)
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    reports = []
    with no_grad():
        for name, p in params.items():
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = f().item()
                flat[i] = orig - h
                lo = f().item()
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2.0 * h)
            err = _rel_err(analytic[name], numeric)
            worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
            reports.append(
                GradCheckReport(
                    name=name,
                    max_rel_err=float(err.max()) if err.size else 0.0,
                    worst_index=tuple(int(i) for i in worst),
                    analytic=float(analytic[name][worst]) if err.size else 0.0,
                    numeric=float(numeric[worst]) if err.size else 0.0,
                    tol=tol,
                )
            )
    return reports
