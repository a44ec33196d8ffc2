"""
Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation is a `Function` subclass with a `forward` that
works on raw arrays and a `backward` that maps the output adjoint to one adjoint
per parent. `Tensor` wraps an array and, when it was produced by an operation on
tensors that require gradients, remembers that operation so `backward` can walk
the graph in reverse topological order.

Intermediate activations can keep their gradient by calling `retain_grad()` on
them before `backward`; this is how token gradients are read out of the model.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

DTYPE = np.float64
LAYERNORM_EPS = 1e-8
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

_check_finite = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf check run after every forward op. Returns the old value."""
    global _check_finite
    old = _check_finite
    _check_finite = bool(enabled)
    return old


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {shapes} are not broadcast-compatible") from exc


class Function:
    """A node of the differentiation graph.

    Subclasses implement `forward(*arrays, **kwargs) -> array` and
    `backward(grad) -> tuple` with one entry per parent (None where a parent
    receives no gradient). State needed by `backward` is stored on `self`.
    """

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs) -> "Tensor":
        fn = cls(*parents)
        out = fn.forward(*(p.data for p in parents), **kwargs)
        if _check_finite and not np.isfinite(out).all():
            raise NumericError(f"{cls.__name__} produced non-finite values")
        needs_grad = any(p.requires_grad for p in parents)
        t = Tensor(out, requires_grad=needs_grad, _copy=False)
        if needs_grad:
            t._ctx = fn
        return t


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "_retain", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 _copy: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=DTYPE) if _copy else np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None
        self._retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _copy=False)

    def retain_grad(self) -> "Tensor":
        """Keep this tensor's gradient after `backward` even if it is not a leaf."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.parents[0].requires_grad else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.parents[1].requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = _unbroadcast(grad / self.b, self.a.shape)
        gb = _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Scale(Function):
    def forward(self, a, c=1.0):
        self.c = float(c)
        return a * self.c

    def backward(self, grad):
        return (grad * self.c,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Gelu(Function):
    """tanh approximation of GELU."""

    def forward(self, a):
        self.a = a
        t = a * a
        t *= 0.044715
        t += 1.0
        t *= a
        t *= _SQRT_2_OVER_PI
        np.tanh(t, out=t)
        self.t = t
        out = t + 1.0
        out *= a
        out *= 0.5
        return out

    def backward(self, grad):
        a, t = self.a, self.t
        # d/da = 0.5 (1 + t) + 0.5 a (1 - t^2) c (1 + 3 * 0.044715 a^2)
        d = a * a
        d *= 3 * 0.044715
        d += 1.0
        d *= _SQRT_2_OVER_PI
        d *= a
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= grad
        return (d,)


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a, b) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def scale(a, c: float) -> Tensor:
    return Scale.apply(as_tensor(a), c=c)


def exp(a) -> Tensor:
    return Exp.apply(as_tensor(a))


def log(a) -> Tensor:
    return Log.apply(as_tensor(a))


def relu(a) -> Tensor:
    return Relu.apply(as_tensor(a))


def gelu(a) -> Tensor:
    return Gelu.apply(as_tensor(a))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
        self.a, self.b = a, b
        if b.ndim == 2:
            # one GEMM instead of a loop over leading axes
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        ga = gb = None
        if b.ndim == 2:
            g2 = grad.reshape(-1, grad.shape[-1])
            if self.parents[0].requires_grad:
                ga = (g2 @ b.T).reshape(a.shape)
            if self.parents[1].requires_grad:
                gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if self.parents[0].requires_grad:
            ga = _unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape)
        if self.parents[1].requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
        return ga, gb


class Reshape(Function):
    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape=()):
        self.in_shape = a.shape
        _broadcast_shape(a.shape, tuple(shape))
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (_unbroadcast(grad, self.in_shape),)


class Slice(Function):
    def forward(self, a, index=None):
        self.in_shape = a.shape
        self.index = index
        return np.array(a[index], dtype=DTYPE)

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=DTYPE)
        if _has_advanced(self.index):
            np.add.at(g, self.index, grad)
        else:
            g[self.index] = grad
        return (g,)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        ax = axis % ref.ndim
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(
                    s1 != s2 for k, (s1, s2) in enumerate(zip(arr.shape, ref.shape)) if k != ax):
                raise ShapeError(f"concat extents differ off axis {axis}: {ref.shape} vs {arr.shape}")
        self.axis = ax
        self.sizes = [arr.shape[ax] for arr in arrays]
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape),)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    return MatMul.apply(as_tensor(a), as_tensor(b))


def reshape(a, shape) -> Tensor:
    return Reshape.apply(as_tensor(a), shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(as_tensor(a), axes=axes)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    return BroadcastTo.apply(as_tensor(a), shape=tuple(shape))


def slice_(a, index) -> Tensor:
    return Slice.apply(as_tensor(a), index=index)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-D operands")
    return Concat.apply(*tensors, axis=axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return Sum.apply(as_tensor(a), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def _check_axis(a: np.ndarray, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for {a.ndim}-D input")
    return axis % a.ndim


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = _check_axis(a, axis)
        e = a - a.max(axis=self.axis, keepdims=True)
        np.exp(e, out=e)
        e /= e.sum(axis=self.axis, keepdims=True)
        self.out = e
        return e

    def backward(self, grad):
        y = self.out
        g = grad - (grad * y).sum(axis=self.axis, keepdims=True)
        g *= y
        return (g,)


class LayerNorm(Function):
    """Normalise to zero mean, unit variance along `axis` (no affine)."""

    def forward(self, a, axis=-1, eps=LAYERNORM_EPS):
        self.axis = _check_axis(a, axis)
        mu = a.mean(axis=self.axis, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=self.axis, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        return self.xhat

    def backward(self, grad):
        ax, xhat = self.axis, self.xhat
        g_mean = grad.mean(axis=ax, keepdims=True)
        gx_mean = (grad * xhat).mean(axis=ax, keepdims=True)
        return (self.inv * (grad - g_mean - xhat * gx_mean),)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(as_tensor(a), axis=axis)


def layernorm(a, axis: int = -1, eps: float = LAYERNORM_EPS) -> Tensor:
    """Zero-variance inputs map to zeros (eps keeps the denominator positive)."""
    return LayerNorm.apply(as_tensor(a), axis=axis, eps=eps)


# ---------------------------------------------------------------------------
# Losses (all reduce by mean over every element / position)
# ---------------------------------------------------------------------------

class L1Loss(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
        diff = pred - target
        self.sign = np.sign(diff) / diff.size
        return np.asarray(np.abs(diff).mean())

    def backward(self, grad):
        g = grad * self.sign
        return g, -g


class MSELoss(Function):
    def forward(self, pred, target):
        if pred.shape != target.shape:
            raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
        self.diff = pred - target
        return np.asarray((self.diff ** 2).mean())

    def backward(self, grad):
        g = grad * 2.0 * self.diff / self.diff.size
        return g, -g


class CrossEntropy(Function):
    """Softmax cross-entropy over the last axis with integer labels."""

    def forward(self, logits, labels):
        labels = labels.astype(np.int64)
        if logits.shape[:-1] != labels.shape:
            raise ShapeError(f"cross_entropy label shape {labels.shape} vs logits {logits.shape}")
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        self.prob = np.exp(logp)
        self.labels = labels
        picked = np.take_along_axis(logp, labels[..., None], axis=-1)
        self.count = labels.size
        return np.asarray(-picked.mean())

    def backward(self, grad):
        g = self.prob.copy()
        np.put_along_axis(g, self.labels[..., None],
                          np.take_along_axis(g, self.labels[..., None], axis=-1) - 1.0, axis=-1)
        return grad * g / self.count, None


def l1_loss(pred, target) -> Tensor:
    return L1Loss.apply(as_tensor(pred), as_tensor(target))


def mse_loss(pred, target) -> Tensor:
    return MSELoss.apply(as_tensor(pred), as_tensor(target))


def cross_entropy(logits, labels) -> Tensor:
    return CrossEntropy.apply(as_tensor(logits), as_tensor(labels))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into `t.grad` for every leaf that requires grad
    and every intermediate marked with `retain_grad()`.

    The graph is kept, so `backward` may be called again (e.g. once per task loss);
    gradients accumulate until zeroed.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward called on a tensor that is not part of a graph")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._ctx is None:
            continue
        for parent, pg in zip(node._ctx.parents, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], eps: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    Per coordinate the error is |analytic - numeric| / max(1, |numeric|).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(base, requires_grad=True)
    out = f(xt)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(Tensor(base)).item()
        flat[k] = orig - eps
        fm = f(Tensor(base)).item()
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function value is not finite under perturbation")
        num_flat[k] = (fp - fm) / (2 * eps)
    if not np.isfinite(analytic).all():
        raise NumericError("analytic gradient is not finite")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
