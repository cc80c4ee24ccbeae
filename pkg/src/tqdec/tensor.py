"""Dense float64 tensors with tape-based reverse-mode differentiation.

Define-by-run: every operation records its parents and a backward
closure on the output node, and ``backward()`` replays the tape in
reverse topological order. Scope is deliberately small: 1D/2D arrays,
no broadcasting beyond bias-vector addition over rows, float64 only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LAYER_NORM_EPS = 1e-5
LOG_CLAMP = 1e-12


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 ndarray, ``grad`` is allocated lazily by the
    backward pass and has the same shape. Leaves created with
    ``requires_grad=True`` are the trainable parameters; interior nodes
    require grad whenever any parent does.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn: Callable[[], None] | None = None
        self._op = _op
        self._backward_ran = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        backward(self)

    # light operator sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=tuple(parents), _op=op)


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological evaluation order; each reachable node once."""
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
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad node reachable from ``loss``.

    ``loss`` must hold a single element. A second call on the same node
    is rejected; rebuild the graph (or zero grads and rerun the forward
    pass) instead of reusing a consumed tape.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise ContractError("backward already ran on this node; "
                            "rebuild the graph before differentiating again")
    loss._backward_ran = True
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn()


# ---------------------------------------------------------------------------
# primitive operations


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. The one allowed broadcast: 2D + 1D bias over rows."""
    bias_case = a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]
    if not bias_case and a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = _result(a.data + b.data, (a, b), "add")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0) if bias_case else g)
    out._backward_fn = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")
    out = _result(a.data - b.data, (a, b), "sub")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)
    out._backward_fn = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), "neg")

    def _bw():
        if a.requires_grad:
            a._accumulate(-out.grad)
    out._backward_fn = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product, shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out = _result(a.data * b.data, (a, b), "mul")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    out._backward_fn = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(a.data * s, (a,), "scale")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * s)
    out._backward_fn = _bw
    return out


def hadamard_const(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout masks); no grad into the mask."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.data.shape:
        raise DimensionError(
            f"hadamard_const: shapes {a.data.shape} and {mask.shape} differ")
    out = _result(a.data * mask, (a,), "hadamard_const")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * mask)
    out._backward_fn = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def _bw():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    out._backward_fn = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2D operand, got {a.data.shape}")
    out = _result(a.data.T.copy(), (a,), "transpose")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad.T)
    out._backward_fn = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}")
    out = _result(a.data.reshape(shape).copy(), (a,), "reshape")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.data.shape))
    out._backward_fn = _bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat: empty input list")
    datas = [p.data for p in parts]
    ndim = datas[0].ndim
    for d in datas:
        if d.ndim != ndim:
            raise DimensionError(
                f"concat: rank mismatch {[x.shape for x in datas]}")
    out = _result(np.concatenate(datas, axis=axis), tuple(parts), "concat")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])
    out._backward_fn = _bw
    return out


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = _result(a.data.sum(axis=axis), (a,), "sum")

    def _bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis=axis)
            a._accumulate(np.broadcast_to(g, a.data.shape))
    out._backward_fn = _bw
    return out


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, returns a scalar node."""
    return scale(tsum(a), 1.0 / a.data.size)


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), (a,), "relu")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0.0))
    out._backward_fn = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _result(y, (a,), "sigmoid")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * y * (1.0 - y))
    out._backward_fn = _bw
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stabilized softmax along ``axis``; slices sum to 1."""
    _check_finite(a.data, "softmax")
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (a,), "softmax")

    def _bw():
        if a.requires_grad:
            g = out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - inner))
    out._backward_fn = _bw
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log: non-positive input, clamp first")
    out = _result(np.log(a.data), (a,), "log")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad / a.data)
    out._backward_fn = _bw
    return out


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only through unclamped entries."""
    floor = float(floor)
    out = _result(np.maximum(a.data, floor), (a,), "clamp_min")

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > floor))
    out._backward_fn = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale+shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must be ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")

    def _bw():
        g = out.grad
        if gain.requires_grad:
            gg = g * xhat
            gain._accumulate(gg.sum(axis=0) if x.data.ndim == 2 else gg)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0) if x.data.ndim == 2 else g)
        if x.requires_grad:
            gy = g * gain.data
            term = gy - gy.mean(axis=-1, keepdims=True) \
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)
    out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: tuple | None = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5, tol: float = 1e-5,
               max_checks: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    ``f`` must rebuild its graph on every call. Relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|);
    the report carries the max. ``max_checks`` limits the check to a
    random coordinate subset (for expensive f).
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    idxs = np.arange(flat.size)
    if max_checks is not None and max_checks < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idxs = rng.choice(flat.size, size=max_checks, replace=False)

    max_err = 0.0
    worst = None
    a_flat = analytic.reshape(-1)
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        f_minus = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
        if err > max_err:
            max_err = err
            worst = np.unravel_index(i, x.data.shape)
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol,
                           n_checked=len(idxs), worst_index=worst)
