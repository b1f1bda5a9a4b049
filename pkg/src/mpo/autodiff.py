"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run tape: every operation returns a new `Tensor` that
remembers its parents and a vector-Jacobian closure. `backward()` on a
scalar walks the tape once in reverse topological order and accumulates
gradients into the participating leaves.

Deliberate restrictions, to keep the shape-bug surface small:
  * float64 only,
  * 1-D and 2-D arrays (plus 0-d scalars from reductions),
  * no broadcasting except scalar-times-tensor (`scale`) and a row-wise
    bias add of a 1-D vector onto a 2-D matrix.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "log_softmax",
    "gather_rows",
    "take_along_rows",
    "rmsnorm",
    "tsum",
    "tmean",
    "backward",
    "grads_for",
]


class NonFiniteError(FloatingPointError):
    """An op produced (or was fed) NaN or Inf."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise ValueError(f"tensors are limited to 2 dimensions, got shape {arr.shape}")
    return arr


class Tensor:
    """A float64 array plus an optional tape node.

    Tensors are immutable by convention after creation; training code
    replaces the whole `.data` array rather than writing into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor created from non-finite data")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Sugar used throughout the model/objective code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _make(
    data: np.ndarray,
    op: str,
    parents: tuple[Tensor, ...],
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]],
) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        # Constant subgraphs (e.g. a frozen reference model) carry no tape.
        out._parents = ()
        out._vjp = None
    return out


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D row bias added to each row of a 2-D matrix."""
    if a.shape == b.shape:
        def vjp(g):
            return g, g
        return _make(a.data + b.data, "add", (a, b), vjp)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
        return _make(a.data + b.data, "add_bias", (a, b), vjp)
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _make(ad * bd, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Scalar times tensor (the one permitted scalar broadcast)."""
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _make(a.data * c, "scale", (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: both operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D tensor, got shape {a.shape}")

    def vjp(g):
        return (g.T,)

    return _make(a.data.T.copy(), "transpose", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _make(out_data, "exp", (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log: input must be strictly positive")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(np.log(ad), "log", (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # sigma(x) = exp(-log(1 + e^-x)): stable for any magnitude, no overflow.
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)

    def vjp(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, "sigmoid", (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) via logaddexp; never overflows."""
    ad = a.data
    out_data = np.logaddexp(0.0, ad)

    def vjp(g):
        return (g * _sigmoid(ad),)

    return _make(out_data, "softplus", (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax along the last axis, stabilized by max subtraction."""
    ad = a.data
    if ad.ndim not in (1, 2):
        raise ValueError(f"log_softmax: expected 1-D or 2-D tensor, got shape {a.shape}")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out_data, "log_softmax", (a,), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (embedding lookup, row slicing)."""
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows: expected 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    nrows = a.shape[0]

    def vjp(g):
        acc = np.zeros((nrows, g.shape[1]))
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(a.data[idx], "gather_rows", (a,), vjp)


def take_along_rows(a: Tensor, idx) -> Tensor:
    """Pick one entry per row of a 2-D tensor: out[i] = a[i, idx[i]]."""
    if a.data.ndim != 2:
        raise ValueError(f"take_along_rows: expected 2-D tensor, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    if idx.shape != (n,):
        raise ValueError(f"take_along_rows: index shape {idx.shape} does not match {n} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"take_along_rows: index out of range for {a.shape[1]} columns")
    shape = a.shape
    rows = np.arange(n)

    def vjp(g):
        acc = np.zeros(shape)
        acc[rows, idx] = g
        return (acc,)

    return _make(a.data[rows, idx], "take_along_rows", (a,), vjp)


def rmsnorm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalization with a learned per-column gain.

    out[i, j] = gain[j] * a[i, j] / sqrt(mean_j(a[i, j]^2) + eps)
    """
    if a.data.ndim != 2 or gain.data.ndim != 1 or a.shape[1] != gain.shape[0]:
        raise ValueError(f"rmsnorm: incompatible shapes {a.shape} and {gain.shape}")
    ad, gd = a.data, gain.data
    d = ad.shape[1]
    inv_rms = 1.0 / np.sqrt((ad * ad).mean(axis=1, keepdims=True) + eps)
    normed = ad * inv_rms

    def vjp(g):
        gg = g * gd
        # d(normed)/d(a): inv_rms * (I - outer(a, a) * inv_rms^2 / d) per row
        dot = (gg * ad).sum(axis=1, keepdims=True)
        da = inv_rms * (gg - ad * (inv_rms * inv_rms) * dot / d)
        dgain = (g * normed).sum(axis=0)
        return da, dgain

    return _make(normed * gd, "rmsnorm", (a, gain), vjp)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum()), "sum", (a,), vjp)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(a.data.mean()), "mean", (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf.

    Gradients of shared subexpressions add up; each tape node is visited
    exactly once.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any trainable tensor")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # Trainable leaf: fold into persistent .grad.
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grads_for(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return a gradient per named parameter.

    Parameters that do not participate in `loss` get an exact zero
    gradient of the right shape.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }
