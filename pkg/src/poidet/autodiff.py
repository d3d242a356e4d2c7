"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is 64-bit and row-major. Tensor ranks 0..3 are supported
(batch x rows x cols); elementwise ops accept exact-shape operands,
python scalars, or single-element tensors (scalar broadcast). Ops
executed while a Tape is active are recorded in execution order;
``Tape.backward`` replays the adjoints in exact reverse order,
accumulating (never overwriting) gradient buffers.

Coordinate convention for ``grid_sample``/``bilinear``: a map has shape
[C, H, W], a sample point is (u, v) with u the continuous column and v
the continuous row, and cell centers sit at integer coordinates.
Out-of-bounds neighbors contribute zero (zero padding).
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np

try:
    from scipy.linalg.blas import dgemm as _dgemm
except ImportError:  # pragma: no cover
    _dgemm = None


class AutodiffError(Exception):
    """Base class for failures inside the differentiation engine."""


class ShapeError(AutodiffError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


# Finite checks cost one pass per op output; they are cheap at this
# scale and catch divergence at the op that caused it.
FINITE_CHECKS = os.environ.get("POIDET_FINITE_CHECKS", "1") != "0"

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; one tape per forward/backward pass."""

    __slots__ = ("_records",)

    def __init__(self) -> None:
        self._records: list[tuple[str, Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        if popped is not self:
            raise AutodiffError("tape stack corrupted: unbalanced enter/exit")

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, name: str, fn: Callable[[], None]) -> None:
        self._records.append((name, fn))

    def backward(self, root: "Tensor") -> None:
        """Seed d(root)/d(root) = 1 and accumulate adjoints in reverse order."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if not root.requires_grad:
            raise AutodiffError("backward root does not require grad")
        root.grad += 1.0
        for _name, fn in reversed(self._records):
            fn()


class Tensor:
    """A dense float64 array, optionally carrying a same-shape grad buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"tensor rank {arr.ndim} > 3 unsupported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Leaf tensor with a grad buffer. With `rng`, data is the shape to fill."""
    if rng is not None:
        shape = tuple(data)
        values = rng.normal(0.0, scale if scale is not None else 1.0, size=shape)
        return Tensor(values, requires_grad=True)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _finish(name: str, data: np.ndarray, inputs: Sequence[Tensor],
            make_backward) -> Tensor:
    """Wrap an op result; register its adjoint if a tape is recording."""
    if FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{name}' produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = np.zeros_like(data) if needs else None
    if needs:
        tape._record(name, make_backward(out))
    return out


def _scalar_reduce(adj: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce an adjoint onto a scalar-broadcast operand's shape."""
    return np.asarray(adj.sum(), dtype=np.float64).reshape(shape)


def _accum_matmul(out: np.ndarray, x: np.ndarray, y: np.ndarray) -> None:
    """out += x @ y without temporaries, via BLAS beta=1 accumulation.

    x and y may be transpose views of C-contiguous matrices. Computed in
    the transposed space (out.T = y.T @ x.T + out.T) so the row-major
    buffers are valid Fortran-order operands without copies.
    """
    if _dgemm is None or not out.flags.c_contiguous:
        out += x @ y
        return

    def as_fortran(m):
        if m.flags.f_contiguous:
            return m, False
        return m.T, True  # m.T is F-contiguous when m is C-contiguous

    a, ta = as_fortran(y.T)
    b, tb = as_fortran(x.T)
    if not (a.flags.f_contiguous and b.flags.f_contiguous):
        out += x @ y
        return
    _dgemm(1.0, a, b, beta=1.0, c=out.T, overwrite_c=True,
           trans_a=ta, trans_b=tb)


def _ewise_check(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape} "
                     "(only exact-shape and scalar broadcast supported)")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ewise_check("add", a, b)
    data = a.data + b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad if a.shape == data.shape else _scalar_reduce(out.grad, a.shape)
            if b.requires_grad:
                b.grad += out.grad if b.shape == data.shape else _scalar_reduce(out.grad, b.shape)
        return fn

    return _finish("add", data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ewise_check("sub", a, b)
    data = a.data - b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad if a.shape == data.shape else _scalar_reduce(out.grad, a.shape)
            if b.requires_grad:
                g = -out.grad
                b.grad += g if b.shape == data.shape else _scalar_reduce(g, b.shape)
        return fn

    return _finish("sub", data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ewise_check("mul", a, b)
    data = a.data * b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                g = out.grad * b.data
                a.grad += g if a.shape == data.shape else _scalar_reduce(g, a.shape)
            if b.requires_grad:
                g = out.grad * a.data
                b.grad += g if b.shape == data.shape else _scalar_reduce(g, b.shape)
        return fn

    return _finish("mul", data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _ewise_check("div", a, b)
    data = a.data / b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                g = out.grad / b.data
                a.grad += g if a.shape == data.shape else _scalar_reduce(g, a.shape)
            if b.requires_grad:
                g = -out.grad * a.data / (b.data * b.data)
                b.grad += g if b.shape == data.shape else _scalar_reduce(g, b.shape)
        return fn

    return _finish("div", data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    data = -a.data

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad -= out.grad
        return fn

    return _finish("neg", data, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad * data
        return fn

    return _finish("exp", data, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad / a.data
        return fn

    return _finish("log", data, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad * 0.5 / data
        return fn

    return _finish("sqrt", data, (a,), bw)


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    data = np.abs(a.data)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad * np.sign(a.data)
        return fn

    return _finish("abs", data, (a,), bw)


def power(a, exponent: float) -> Tensor:
    """x ** p for a constant float exponent."""
    a = _as_tensor(a)
    p = float(exponent)
    data = a.data ** p

    def bw(out):
        def fn():
            if a.requires_grad:
                if p == 0.0:
                    return
                a.grad += out.grad * p * a.data ** (p - 1.0)
        return fn

    return _finish("power", data, (a,), bw)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bw(out):
        def fn():
            if a.requires_grad:
                # subgradient 0 at exactly 0
                a.grad += out.grad * (a.data > 0.0)
        return fn

    return _finish("relu", data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad * data * (1.0 - data)
        return fn

    return _finish("sigmoid", data, (a,), bw)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bw(out):
        def fn():
            if a.requires_grad:
                x = a.data
                s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                             np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
                a.grad += out.grad * s
        return fn

    return _finish("softplus", data, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(out):
        def fn():
            if a.requires_grad:
                _accum_matmul(a.grad, out.grad, b.data.T)
            if b.requires_grad:
                _accum_matmul(b.grad, a.data.T, out.grad)
        return fn

    return _finish("matmul", data, (a, b), bw)


def bmm(a, b) -> Tensor:
    """Batched matmul: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += np.matmul(out.grad, b.data.transpose(0, 2, 1))
            if b.requires_grad:
                b.grad += np.matmul(a.data.transpose(0, 2, 1), out.grad)
        return fn

    return _finish("bmm", data, (a, b), bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    data = np.ascontiguousarray(a.data.T)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad.T
        return fn

    return _finish("transpose", data, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad.reshape(a.shape)
        return fn

    return _finish("reshape", data, (a,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat of empty list")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def fn():
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    t.grad += out.grad[tuple(idx)]
        return fn

    return _finish("concat", data, ts, bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start},{start + length}) out of bounds for "
                         f"axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad[idx] += out.grad
        return fn

    return _finish("narrow", data, (a,), bw)


def index_rows(a, indices) -> Tensor:
    """Gather rows (axis 0) by an integer index array; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def bw(out):
        def fn():
            if a.requires_grad:
                np.add.at(a.grad, idx, out.grad)
        return fn

    return _finish("index_rows", data, (a,), bw)


def repeat_rows(v, times: int) -> Tensor:
    """Tile a 1-D vector into `times` identical rows."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"repeat_rows expects rank 1, got {v.shape}")
    data = np.broadcast_to(v.data, (times, v.shape[0])).copy()

    def bw(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad.sum(axis=0)
        return fn

    return _finish("repeat_rows", data, (v,), bw)


def repeat_mid(x, times: int) -> Tensor:
    """[B,n] -> [B,times,n] by repetition along a new middle axis."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"repeat_mid expects rank 2, got {x.shape}")
    data = np.broadcast_to(x.data[:, None, :], (x.shape[0], times, x.shape[1])).copy()

    def bw(out):
        def fn():
            if x.requires_grad:
                x.grad += out.grad.sum(axis=1)
        return fn

    return _finish("repeat_mid", data, (x,), bw)


def add_row(x, b) -> Tensor:
    """[n,m] + [m] broadcast over rows (the bias add of a linear layer)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row: incompatible shapes {x.shape} and {b.shape}")
    data = x.data + b.data[None, :]

    def bw(out):
        def fn():
            if x.requires_grad:
                x.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad.sum(axis=0)
        return fn

    return _finish("add_row", data, (x, b), bw)


def scale_rows(x, s) -> Tensor:
    """Scale row i of [n,m] by s[i]."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {x.shape} and {s.shape}")
    data = x.data * s.data[:, None]

    def bw(out):
        def fn():
            if x.requires_grad:
                x.grad += out.grad * s.data[:, None]
            if s.requires_grad:
                s.grad += (out.grad * x.data).sum(axis=1)
        return fn

    return _finish("scale_rows", data, (x, s), bw)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad
        return fn

    return _finish("sum", data, (a,), bw)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    data = np.asarray(a.data.sum() / n)

    def bw(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad / n
        return fn

    return _finish("mean", data, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along `axis`; outputs sum to 1."""
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("softmax of empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def fn():
            if a.requires_grad:
                gy = out.grad * data
                a.grad += gy - data * gy.sum(axis=axis, keepdims=True)
        return fn

    return _finish("softmax", data, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1] if x.ndim else 0
    if c < 2:
        raise ShapeError(f"layer_norm needs >= 2 channels, got shape {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def bw(out):
        def fn():
            g = out.grad
            if gamma.requires_grad:
                gamma.grad += (g * xhat).reshape(-1, c).sum(axis=0)
            if beta.requires_grad:
                beta.grad += g.reshape(-1, c).sum(axis=0)
            if x.requires_grad:
                gg = g * gamma.data
                x.grad += inv * (gg - gg.mean(axis=-1, keepdims=True)
                                 - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return fn

    return _finish("layer_norm", data, (x, gamma, beta), bw)


def _gather_map(m: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fetch map[:, yy, xx] transposed to [P,C], zeros where out of bounds."""
    _c, h, w = m.shape
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    vals = np.zeros((yy.shape[0], m.shape[0]))
    if ok.any():
        vals[ok] = m[:, yy[ok], xx[ok]].T
    return vals, ok


def grid_sample(feature_map, coords) -> Tensor:
    """Bilinear sample of [C,H,W] at coords [P,2] = (u=col, v=row) -> [P,C].

    Cell centers are at integer coordinates; out-of-bounds neighbors
    contribute zero. Differentiable with respect to both the map and the
    coordinates.
    """
    m, uv = _as_tensor(feature_map), _as_tensor(coords)
    if m.ndim != 3:
        raise ShapeError(f"grid_sample map must be [C,H,W], got {m.shape}")
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(f"grid_sample coords must be [P,2], got {uv.shape}")
    u = uv.data[:, 0]
    v = uv.data[:, 1]
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1
    wx = u - x0
    wy = v - y0

    f00, _ = _gather_map(m.data, y0, x0)
    f01, _ = _gather_map(m.data, y0, x1)
    f10, _ = _gather_map(m.data, y1, x0)
    f11, _ = _gather_map(m.data, y1, x1)

    w00 = ((1 - wx) * (1 - wy))[:, None]
    w01 = (wx * (1 - wy))[:, None]
    w10 = ((1 - wx) * wy)[:, None]
    w11 = (wx * wy)[:, None]
    data = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    def bw(out):
        def fn():
            g = out.grad
            if uv.requires_grad:
                du = ((1 - wy)[:, None] * (f01 - f00) + wy[:, None] * (f11 - f10)) * g
                dv = ((1 - wx)[:, None] * (f10 - f00) + wx[:, None] * (f11 - f01)) * g
                uv.grad[:, 0] += du.sum(axis=1)
                uv.grad[:, 1] += dv.sum(axis=1)
            if m.requires_grad:
                gt = m.grad.transpose(1, 2, 0)  # view into m.grad
                _c, h, w = m.data.shape
                for yy, xx, wk in ((y0, x0, w00), (y0, x1, w01),
                                   (y1, x0, w10), (y1, x1, w11)):
                    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                    if ok.any():
                        np.add.at(gt, (yy[ok], xx[ok]), wk[ok] * g[ok])
        return fn

    return _finish("grid_sample", data, (m, uv), bw)


def bilinear(feature_map, u: float, v: float) -> Tensor:
    """Single-point bilinear sample of [C,H,W] at (u=col, v=row) -> [C]."""
    out = grid_sample(feature_map, Tensor(np.array([[u, v]])))
    return reshape(out, (out.shape[1],))


def linear(x, weight, bias=None) -> Tensor:
    """x[n,k] @ weight[k,m] (+ bias[m]), fused into one tape record."""
    if bias is None:
        return matmul(x, weight)
    x, w, b = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if (x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]
            or b.shape != (w.shape[1],)):
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape} "
                         f"+ {b.shape}")
    data = x.data @ w.data
    data += b.data

    def bw(out):
        def fn():
            if x.requires_grad:
                _accum_matmul(x.grad, out.grad, w.data.T)
            if w.requires_grad:
                _accum_matmul(w.grad, x.data.T, out.grad)
            if b.requires_grad:
                b.grad += out.grad.sum(axis=0)
        return fn

    return _finish("linear", data, (x, w, b), bw)
