"""Dense-tensor numerical core with reverse-mode automatic differentiation.

Everything in this package (generators, discriminators, every loss term)
is expressed through the primitives below. Gradients are computed by
recording a DAG of closures during the forward pass and replaying it in
reverse topological order. Single-threaded execution with a fixed seed is
bit-reproducible; there are no nondeterministic reductions.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "finite_checks",
    "tensor",
    "zeros",
    "ones",
    "randn",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "instance_norm",
    "dropout",
    "l1_loss",
    "mse_loss",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class NonFiniteError(ValueError):
    """A NaN or Inf crossed an operation boundary."""


class GraphError(RuntimeError):
    """backward() called on a tensor that cannot drive a backward pass."""


_grad_enabled = True
_finite_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-operation NaN/Inf validation (on by default)."""
    global _finite_enabled
    prev = _finite_enabled
    _finite_enabled = enabled
    try:
        yield
    finally:
        _finite_enabled = prev


def _check_finite(arr: np.ndarray, op: str):
    if _finite_enabled and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values detected")


class Tensor:
    """A dense float array plus an optional slot in the backward graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction of op results -------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basics ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward pass ----------------------------------------------------

    def backward(self):
        """Populate .grad on every requires_grad tensor reachable from here.

        The root must be a scalar connected to a recorded graph. Traversal
        is iterative (deep generator stacks exceed the recursion limit).
        """
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self._parents:
            raise GraphError("backward() on a detached tensor: no recorded graph")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._parents:
                    stack.append((p, False))
                # leaves are accumulation targets only; no need to visit

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward(node.grad)

    def _accumulate(self, g: np.ndarray):
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.data.dtype)
        data = self.data + other.data
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, self.data.dtype)
        data = self.data - other.data
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._result(data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return _as_tensor(other, self.data.dtype) - self

    def __mul__(self, other):
        other = _as_tensor(other, self.data.dtype)
        data = self.data * other.data
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.data.dtype)
        data = self.data / other.data
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._result(data, (a, b), backward, "div")

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-self.data, (a,), backward, "neg")

    # -- matmul -------------------------------------------------------------

    def __matmul__(self, other):
        other = _as_tensor(other, self.data.dtype)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
        data = a.data @ b.data

        def backward(g):
            a._accumulate(g @ b.data.swapaxes(-1, -2))
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

        return Tensor._result(data, (a, b), backward, "matmul")

    # -- activations ---------------------------------------------------------

    def relu(self):
        a = self
        mask = self.data > 0
        data = np.where(mask, self.data, 0)

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._result(data, (a,), backward, "relu")

    def leaky_relu(self, slope: float = 0.2):
        a = self
        mask = self.data > 0
        data = np.where(mask, self.data, self.data * slope)

        def backward(g):
            a._accumulate(np.where(mask, g, g * slope))

        return Tensor._result(data, (a,), backward, "leaky_relu")

    def tanh(self):
        a = self
        data = np.tanh(self.data)

        def backward(g):
            a._accumulate(g * (1.0 - data * data))

        return Tensor._result(data, (a,), backward, "tanh")

    def sigmoid(self):
        a = self
        # stable piecewise form avoids exp overflow on large |x|
        x = self.data
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(g):
            a._accumulate(g * data * (1.0 - data))

        return Tensor._result(data, (a,), backward, "sigmoid")

    def softplus(self):
        a = self
        x = self.data
        data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

        def backward(g):
            sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                           np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * sig)

        return Tensor._result(data, (a,), backward, "softplus")

    def exp(self):
        a = self
        data = np.exp(self.data)

        def backward(g):
            a._accumulate(g * data)

        return Tensor._result(data, (a,), backward, "exp")

    def log(self):
        a = self
        data = np.log(self.data)

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(data, (a,), backward, "log")

    def sqrt(self):
        a = self
        data = np.sqrt(self.data)

        def backward(g):
            a._accumulate(g * (0.5 / data))

        return Tensor._result(data, (a,), backward, "sqrt")

    def abs(self):
        a = self
        data = np.abs(self.data)

        def backward(g):
            a._accumulate(g * np.sign(a.data))

        return Tensor._result(data, (a,), backward, "abs")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._result(np.asarray(data), (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        data = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else np.prod(
            [self.shape[ax] for ax in _normalize_axes(axis, self.ndim)])

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / count)

        return Tensor._result(np.asarray(data), (a,), backward, "mean")

    # -- softmax family ----------------------------------------------------------

    def softmax(self, axis: int = -1):
        a = self
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            inner = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - inner))

        return Tensor._result(data, (a,), backward, "softmax")

    def logsumexp(self, axis: int = -1, keepdims: bool = False):
        a = self
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        s = e.sum(axis=axis, keepdims=True)
        data = (m + np.log(s))
        soft = e / s
        if not keepdims:
            data = np.squeeze(data, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(g * soft)

        return Tensor._result(data, (a,), backward, "logsumexp")

    # -- shape manipulation ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        data = self.data.reshape(shape)

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._result(data, (a,), backward, "reshape")

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = self.data.transpose(axes)

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(data, (a,), backward, "transpose")

    def index_select(self, axis: int, indices) -> "Tensor":
        """Gather along one axis. Backward scatter-adds (indices may repeat)."""
        a = self
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("index_select: indices must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.shape[axis]):
            raise ShapeError(
                f"index_select: index out of bounds for axis {axis} with size {self.shape[axis]}")
        data = np.take(self.data, idx, axis=axis)

        def backward(g):
            dg = np.zeros(a.shape, dtype=g.dtype)
            sl = [slice(None)] * dg.ndim
            sl[axis] = idx
            np.add.at(dg, tuple(sl), g)
            a._accumulate(dg)

        return Tensor._result(data, (a,), backward, "index_select")


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back down to the shape it was broadcast from."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- constructors ---------------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, scale: float = 1.0,
          requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype) * dtype(scale),
                  requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl[axis] = slice(start, stop)
            t._accumulate(g[tuple(sl)])

    return Tensor._result(data, tuple(tensors), backward, "concat")


# -- convolution -------------------------------------------------------------------
#
# conv2d / conv_transpose2d are im2col + GEMM. The column matrix is
# rebuilt during backward instead of being saved, which keeps graph
# memory flat at the cost of one extra copy per conv.


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, (out_ch, in_ch, kh, kw) weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape} / {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = _pad2d(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, stride, oh, ow)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = (wmat @ cols).reshape(f, n, oh, ow).swapaxes(0, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(f, n * oh * ow)
        if weight.requires_grad:
            cols_b = _im2col(_pad2d(x.data, padding), kh, kw, stride, stride, oh, ow)
            weight._accumulate((gmat @ cols_b.T).reshape(weight.shape))
        if x.requires_grad:
            dxp = _col2im(wmat.T @ gmat, n, c, hp, wp, kh, kw, stride, stride, oh, ow)
            x._accumulate(dxp[:, :, padding:hp - padding, padding:wp - padding]
                          if padding else dxp)
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._result(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, weight laid out (in_ch, out_ch, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-D input/weight, got {x.shape} / {weight.shape}")
    n, c, h, w = x.shape
    cw, f, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight expects {cw}")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    oh = hf - 2 * padding
    ow = wf - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: output {oh}x{ow} is empty")

    xmat = np.ascontiguousarray(x.data.swapaxes(0, 1)).reshape(c, n * h * w)
    wmat = weight.data.reshape(c, f * kh * kw)
    full = _col2im(wmat.T @ xmat, n, f, hf, wf, kh, kw, stride, stride, h, w)
    out = full[:, :, padding:hf - padding, padding:wf - padding] if padding else full
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gp = _pad2d(g, padding)
        gcols = _im2col(gp, kh, kw, stride, stride, h, w)
        if x.requires_grad:
            dx = (wmat @ gcols).reshape(c, n, h, w).swapaxes(0, 1)
            x._accumulate(np.ascontiguousarray(dx))
        if weight.requires_grad:
            weight._accumulate((xmat @ gcols.T).reshape(weight.shape))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._result(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


# -- composed operations --------------------------------------------------------------


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: need NCHW input, got {x.shape}")
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    y = centered / (var + eps).sqrt()
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; scaling keeps the expected activation unchanged."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    a = x
    data = x.data * keep

    def backward(g):
        a._accumulate(g * keep)

    return Tensor._result(data, (a,), backward, "dropout")


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    return (a - b).abs().mean()


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return (d * d).mean()


# -- finite-difference validation -------------------------------------------------------


def grad_check(fn, point: Tensor, epsilon: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the point tensor to a scalar Tensor. With ``max_coords``,
    a deterministic random subset of coordinates is probed, which keeps
    checks on large parameter tensors affordable.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"grad_check: epsilon must be in (0, 1e-2], got {epsilon}")
    probe = Tensor(point.data.astype(np.float64).copy(), requires_grad=True)
    loss = fn(probe)
    loss.backward()
    analytic = probe.grad.reshape(-1).copy()

    flat = probe.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        coords.sort()

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = float(fn(probe.detach()).data)
        flat[i] = orig - epsilon
        f_minus = float(fn(probe.detach()).data)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"grad_check: non-finite evaluation at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
