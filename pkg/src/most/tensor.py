"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation goes through :func:`apply_primitive`. When any
input participates in the tape (``requires_grad``), a :class:`Node` is recorded
with a monotonically increasing id, so sorting nodes by id is a valid
topological order and :func:`backward` simply walks them in reverse.

Shapes must match exactly for elementwise kinds; the only implicit expansion
is ``scalar_mul`` (tensor times a one-element tensor or a Python float) and the
per-channel ``bias_add``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "apply_primitive",
    "backward",
    "gradients",
    "finite_diff_check",
    "FiniteDiffReport",
    "PRIMITIVES",
    "centered_fft2",
]

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    """One primitive application recorded on the tape."""

    __slots__ = ("id", "kind", "inputs", "attrs", "saved", "consumed")

    def __init__(self, kind, inputs, attrs, saved):
        self.id = next(_node_ids)
        self.kind = kind
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.saved = saved
        self.consumed = False

    def __repr__(self):
        return f"Node({self.id}, {self.kind})"


class Tensor:
    """Dense real array, optionally tracked for reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other, self)])

    def __radd__(self, other):
        return apply_primitive("add", [_as_tensor(other, self), self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other, self)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_as_tensor(other, self), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], c=float(other))
        return apply_primitive("mul", [self, _as_tensor(other, self)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], c=1.0 / float(other))
        return apply_primitive("div", [self, _as_tensor(other, self)])

    def __neg__(self):
        return apply_primitive("scalar_mul", [self], c=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor(np.full(like.shape, value, dtype=like.dtype))
    return Tensor(np.asarray(value, dtype=like.dtype))


# --------------------------------------------------------------------------
# primitive kinds: forward(arrays, attrs) -> (out, saved);
#                  backward(g, arrays, saved, attrs) -> per-input grads
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    arity: tuple[int, int]
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity=(1, 1)):
    def wrap(cls):
        PRIMITIVES[name] = Primitive(arity, cls.forward, cls.backward)
        return cls

    return wrap


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(itertools.zip_longest(a.shape, b.shape)):
            if da != db:
                raise ShapeError(
                    f"{kind}: dimension {axis} mismatch ({da} vs {db}); "
                    f"shapes {a.shape} and {b.shape}"
                )


@_register("add", (2, 2))
class _Add:
    def forward(xs, attrs):
        _same_shape("add", *xs)
        return xs[0] + xs[1], None

    def backward(g, xs, saved, attrs):
        return g, g


@_register("sub", (2, 2))
class _Sub:
    def forward(xs, attrs):
        _same_shape("sub", *xs)
        return xs[0] - xs[1], None

    def backward(g, xs, saved, attrs):
        return g, -g


@_register("mul", (2, 2))
class _Mul:
    def forward(xs, attrs):
        _same_shape("mul", *xs)
        return xs[0] * xs[1], None

    def backward(g, xs, saved, attrs):
        return g * xs[1], g * xs[0]


@_register("div", (2, 2))
class _Div:
    def forward(xs, attrs):
        _same_shape("div", *xs)
        return xs[0] / xs[1], None

    def backward(g, xs, saved, attrs):
        a, b = xs
        gb = g / b
        return gb, -gb * a / b


@_register("scalar_mul", (1, 2))
class _ScalarMul:
    # x * c (attr) or x * s where s is a one-element tensor
    def forward(xs, attrs):
        if len(xs) == 2:
            if xs[1].size != 1:
                raise ShapeError(
                    f"scalar_mul: scalar operand must have one element, got shape {xs[1].shape}"
                )
            return xs[0] * xs[1].reshape(()), None
        return xs[0] * attrs["c"], None

    def backward(g, xs, saved, attrs):
        if len(xs) == 2:
            s = xs[1].reshape(())
            return g * s, np.sum(g * xs[0]).reshape(xs[1].shape)
        return (g * attrs["c"],)


@_register("matmul", (2, 2))
class _Matmul:
    def forward(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul: expects 2-D operands, got ranks {a.ndim} and {b.ndim}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul: inner dimension mismatch (a dim 1 = {a.shape[1]}, b dim 0 = {b.shape[0]})"
            )
        return a @ b, None

    def backward(g, xs, saved, attrs):
        a, b = xs
        return g @ b.T, a.T @ g


def _im2col(x, k):
    """(N,C,H,W) -> (C*k*k, N*H*W) columns for stride-1 'same' correlation."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _col2im(cols, shape, k):
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, p:p + h, p:p + w]


@_register("conv2d", (2, 3))
class _Conv2d:
    # stride 1, zero "same" padding, NCHW input, OIHW kernel, odd k
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        if x.ndim != 4:
            raise ShapeError(f"conv2d: input must be N×C×H×W, got rank {x.ndim}")
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ShapeError(f"conv2d: kernel must be O×I×k×k with odd k, got {w.shape}")
        if w.shape[1] != x.shape[1]:
            raise ShapeError(
                f"conv2d: input channel dimension 1 mismatch (input {x.shape[1]}, kernel {w.shape[1]})"
            )
        n, _, h, wd = x.shape
        o, k = w.shape[0], w.shape[2]
        cols = _im2col(x, k)
        out = w.reshape(o, -1) @ cols
        if len(xs) == 3:
            b = xs[2]
            if b.shape != (o,):
                raise ShapeError(f"conv2d: bias dimension 0 must be {o}, got {b.shape}")
            out += b[:, None]
        out = np.ascontiguousarray(out.reshape(o, n, h, wd).transpose(1, 0, 2, 3))
        return out, cols

    def backward(g, xs, cols, attrs):
        x, w = xs[0], xs[1]
        o, k = w.shape[0], w.shape[2]
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = _col2im(w.reshape(o, -1).T @ g2, x.shape, k) if attrs.get("_needs", (True,))[0] else None
        grads = [gx, gw]
        if len(xs) == 3:
            grads.append(g2.sum(axis=1))
        return tuple(grads)


@_register("bias_add", (2, 2))
class _BiasAdd:
    # adds a length-C vector along axis 1
    def forward(xs, attrs):
        x, b = xs
        if x.ndim < 2 or b.shape != (x.shape[1],):
            raise ShapeError(f"bias_add: bias must have shape ({x.shape[1]},), got {b.shape}")
        shape = [1] * x.ndim
        shape[1] = -1
        return x + b.reshape(shape), None

    def backward(g, xs, saved, attrs):
        axes = tuple(i for i in range(g.ndim) if i != 1)
        return g, g.sum(axis=axes)


@_register("relu")
class _Relu:
    def forward(xs, attrs):
        return np.maximum(xs[0], 0), None

    def backward(g, xs, saved, attrs):
        return (g * (xs[0] > 0),)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


@_register("sigmoid")
class _Sigmoid:
    def forward(xs, attrs):
        s = _sigmoid(xs[0])
        return s, s

    def backward(g, xs, s, attrs):
        return (g * s * (1 - s),)


@_register("softplus")
class _Softplus:
    def forward(xs, attrs):
        return _softplus(xs[0]), None

    def backward(g, xs, saved, attrs):
        return (g * _sigmoid(xs[0]),)


@_register("square")
class _Square:
    def forward(xs, attrs):
        return xs[0] * xs[0], None

    def backward(g, xs, saved, attrs):
        return (2 * g * xs[0],)


@_register("abs")
class _Abs:
    def forward(xs, attrs):
        return np.abs(xs[0]), None

    def backward(g, xs, saved, attrs):
        return (g * np.sign(xs[0]),)


def _check_spatial(kind, x, factor=1):
    if x.ndim != 4:
        raise ShapeError(f"{kind}: input must be N×C×H×W, got rank {x.ndim}")
    for axis in (2, 3):
        if x.shape[axis] % factor:
            raise ShapeError(f"{kind}: dimension {axis} ({x.shape[axis]}) not divisible by {factor}")


@_register("avg_pool2d")
class _AvgPool:
    def forward(xs, attrs):
        x = xs[0]
        _check_spatial("avg_pool2d", x, 2)
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None

    def backward(g, xs, saved, attrs):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)


@_register("upsample_nearest2x")
class _Upsample:
    def forward(xs, attrs):
        _check_spatial("upsample_nearest2x", xs[0])
        return np.repeat(np.repeat(xs[0], 2, axis=2), 2, axis=3), None

    def backward(g, xs, saved, attrs):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


@_register("concat_channels", (2, 16))
class _Concat:
    def forward(xs, attrs):
        ref = xs[0]
        for other in xs[1:]:
            if other.ndim != ref.ndim:
                raise ShapeError("concat_channels: rank mismatch")
            for axis in range(ref.ndim):
                if axis != 1 and other.shape[axis] != ref.shape[axis]:
                    raise ShapeError(
                        f"concat_channels: dimension {axis} mismatch "
                        f"({ref.shape[axis]} vs {other.shape[axis]})"
                    )
        return np.concatenate(xs, axis=1), None

    def backward(g, xs, saved, attrs):
        bounds = np.cumsum([x.shape[1] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=1))


def _norm_axis(axis):
    if axis is None:
        return None
    return tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)


@_register("reduce_sum")
class _ReduceSum:
    def forward(xs, attrs):
        return np.sum(xs[0], axis=_norm_axis(attrs.get("axis"))), None

    def backward(g, xs, saved, attrs):
        x = xs[0]
        axis = _norm_axis(attrs.get("axis"))
        if axis is not None:
            g = np.expand_dims(g, tuple(a % x.ndim for a in axis))
        return (np.broadcast_to(g, x.shape).copy(),)


@_register("reduce_mean")
class _ReduceMean:
    def forward(xs, attrs):
        return np.mean(xs[0], axis=_norm_axis(attrs.get("axis"))), None

    def backward(g, xs, saved, attrs):
        x = xs[0]
        axis = _norm_axis(attrs.get("axis"))
        if axis is None:
            count = x.size
        else:
            axis = tuple(a % x.ndim for a in axis)
            count = int(np.prod([x.shape[a] for a in axis]))
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)


@_register("reshape")
class _Reshape:
    def forward(xs, attrs):
        try:
            return xs[0].reshape(attrs["shape"]), None
        except ValueError as exc:
            raise ShapeError(f"reshape: {exc}") from None

    def backward(g, xs, saved, attrs):
        return (g.reshape(xs[0].shape),)


@_register("crop")
class _Crop:
    # trims `border` pixels off both ends of the last two axes
    def forward(xs, attrs):
        b = attrs["border"]
        x = xs[0]
        if x.ndim < 2 or min(x.shape[-2:]) <= 2 * b:
            raise ShapeError(f"crop: border {b} too large for spatial shape {x.shape[-2:]}")
        return x[..., b:-b, b:-b].copy() if b else x.copy(), None

    def backward(g, xs, saved, attrs):
        b = attrs["border"]
        out = np.zeros_like(xs[0])
        if b:
            out[..., b:-b, b:-b] = g
        else:
            out[...] = g
        return (out,)


def _box_sum(x, k):
    c = np.cumsum(x, axis=-2)
    c = np.concatenate([c[..., k - 1:k, :], c[..., k:, :] - c[..., :-k, :]], axis=-2)
    c = np.cumsum(c, axis=-1)
    return np.concatenate([c[..., k - 1:k], c[..., k:] - c[..., :-k]], axis=-1)


@_register("box_mean")
class _BoxMean:
    # mean over every fully contained k×k window of the last two axes ("valid")
    def forward(xs, attrs):
        k = attrs["size"]
        x = xs[0]
        if x.ndim < 2 or min(x.shape[-2:]) < k:
            raise ShapeError(f"box_mean: window {k} larger than spatial shape {x.shape[-2:]}")
        return _box_sum(x, k) / (k * k), None

    def backward(g, xs, saved, attrs):
        k = attrs["size"]
        pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        return (_box_sum(np.pad(g, pad), k) / (k * k),)


def centered_fft2(z: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes with DC at index (H/2, W/2)."""
    axes = (-2, -1)
    fn = np.fft.ifft2 if inverse else np.fft.fft2
    return np.fft.fftshift(fn(np.fft.ifftshift(z, axes=axes), axes=axes, norm="ortho"), axes=axes)


@_register("dft2", (1, 2))
class _Dft2:
    # inputs: real part [, imaginary part]; attrs: inverse (bool), part ("re"|"im")
    def forward(xs, attrs):
        re = xs[0]
        if len(xs) == 2:
            _same_shape("dft2", xs[0], xs[1])
        for axis in (-2, -1):
            n = re.shape[axis]
            if n < 1 or n & (n - 1):
                raise ShapeError(f"dft2: dimension {re.ndim + axis} ({n}) is not a power of two")
        z = re + 1j * xs[1] if len(xs) == 2 else re.astype(np.result_type(re, 1j))
        out = centered_fft2(z, attrs["inverse"])
        part = out.real if attrs["part"] == "re" else out.imag
        return np.ascontiguousarray(part).astype(re.dtype, copy=False), None

    def backward(g, xs, saved, attrs):
        # unitary map: the real-pair adjoint is the opposite-direction transform
        gz = g.astype(np.result_type(g, 1j)) if attrs["part"] == "re" else 1j * g
        back = centered_fft2(gz, not attrs["inverse"])
        dtype = xs[0].dtype
        grads = [back.real.astype(dtype, copy=False)]
        if len(xs) == 2:
            grads.append(back.imag.astype(dtype, copy=False))
        return tuple(grads)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``kind`` forward and record it when any input is tracked."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    lo, hi = prim.arity
    if not lo <= len(inputs) <= hi:
        raise ValueError(f"{kind}: expected {lo}..{hi} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    with np.errstate(all="ignore"):  # non-finite results are reported below
        out, saved = prim.forward(arrays, attrs)
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind}: produced non-finite values")
    result = Tensor(out)
    if any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(kind, inputs, attrs, saved)
    return result


def _collect(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        for t in node.inputs:
            if t.node is not None and t.node.id not in seen:
                stack.append(t.node)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def _run_backward(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("backward on an empty graph: loss does not depend on any tracked tensor")
    if loss.node.consumed:
        raise GraphError("graph already consumed by a previous backward call")
    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in _collect(loss.node):
        g = grads.pop(node.id, None)
        if g is not None:
            arrays = [t.data for t in node.inputs]
            node.attrs["_needs"] = tuple(t.requires_grad for t in node.inputs)
            in_grads = PRIMITIVES[node.kind].backward(g, arrays, node.saved, node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    key = id(t)
                    if key in leaves:
                        leaves[key] = (t, leaves[key][1] + gi)
                    else:
                        leaves[key] = (t, np.asarray(gi))
                else:
                    prev = grads.get(t.node.id)
                    grads[t.node.id] = gi if prev is None else prev + gi
        node.consumed = True
        node.saved = None
        node.inputs = ()
    return leaves


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from ``loss``.

    The graph is released afterwards; a second call on the same loss raises
    :class:`GraphError`.
    """
    for t, g in _run_backward(loss).values():
        t.grad = g.reshape(t.shape)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Like :func:`backward`, but returns grads for ``params`` (zeros if unreached)."""
    leaves = _run_backward(loss)
    out = []
    for p in params:
        hit = leaves.get(id(p))
        g = np.zeros_like(p.data) if hit is None else hit[1].reshape(p.shape)
        p.grad = g
        out.append(g)
    return out


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    autodiff: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-4, tol: float = 1e-4
) -> FiniteDiffReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` to central differences.

    The error is normwise: ``max|g_ad - g_fd| / max(max|g_ad|, max|g_fd|)``,
    and 0 when both gradients vanish.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)

    def value(arr):
        return f(Tensor(arr.copy())).item()

    v1, v2 = value(x), value(x)
    if v1 != v2:
        raise ValueError("finite_diff_check: f is not deterministic at the same input")

    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check: f must be scalar-valued, got shape {out.shape}")
    if out.node is None:
        ad = np.zeros_like(x)
    else:
        ad = gradients(out, [xt])[0]

    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = value(x)
        flat[i] = orig - eps
        down = value(x)
        flat[i] = orig
        fd_flat[i] = (up - down) / (2 * eps)

    scale = max(np.max(np.abs(ad), initial=0.0), np.max(np.abs(fd), initial=0.0))
    err = 0.0 if scale == 0 else float(np.max(np.abs(ad - fd)) / scale)
    return FiniteDiffReport(err, tol, ad, fd)


# --------------------------------------------------------------------------
# functional wrappers
# --------------------------------------------------------------------------


def scalar_mul(x: Tensor, s) -> Tensor:
    if isinstance(s, Tensor):
        return apply_primitive("scalar_mul", [x, s])
    return apply_primitive("scalar_mul", [x], c=float(s))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return apply_primitive("conv2d", [x, w] if b is None else [x, w, b])


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("bias_add", [x, b])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def softplus(x: Tensor) -> Tensor:
    return apply_primitive("softplus", [x])


def square(x: Tensor) -> Tensor:
    return apply_primitive("square", [x])


def absolute(x: Tensor) -> Tensor:
    return apply_primitive("abs", [x])


def avg_pool2d(x: Tensor) -> Tensor:
    return apply_primitive("avg_pool2d", [x])


def upsample2x(x: Tensor) -> Tensor:
    return apply_primitive("upsample_nearest2x", [x])


def concat_channels(*xs: Tensor) -> Tensor:
    return apply_primitive("concat_channels", list(xs))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("reduce_sum", [x], axis=axis)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    return apply_primitive("reduce_mean", [x], axis=axis)


def reshape(x: Tensor, shape) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def crop(x: Tensor, border: int) -> Tensor:
    return apply_primitive("crop", [x], border=int(border))


def box_mean(x: Tensor, size: int) -> Tensor:
    return apply_primitive("box_mean", [x], size=int(size))
