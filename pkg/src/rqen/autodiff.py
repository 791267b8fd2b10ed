"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every operation runs eagerly: building a node computes its value and stores a
closure that maps the upstream gradient to gradients of the parents.  Only
first-order gradients are supported.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Raised when the inputs of a primitive do not conform."""


def _shape_error(kind: str, *arrays) -> ShapeError:
    shapes = ", ".join(str(tuple(np.shape(a))) for a in arrays)
    return ShapeError(f"{kind}: incompatible input shapes {shapes}")


class Tensor:
    """A graph node holding a dense float64 value and its accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Tensor"] = (),
        op: str = "leaf",
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    # operator sugar; keeps model code readable
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __truediv__(self, other):
        return divide(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, op, backward) -> Tensor:
    out = Tensor(value, parents, op, backward)
    if not out.requires_grad:
        # constant subgraph; nothing to propagate
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(kind, a, b) from None


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.value, b.value)
    av, bv = a.value, b.value

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _node(av @ bv, (a, b), "matmul", backward)


def add_bias(x, bias) -> Tensor:
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.value.ndim != 1 or x.value.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise _shape_error("add-bias", x.value, bias.value)
    lead = tuple(range(x.value.ndim - 1))

    def backward(g):
        return g, g.sum(axis=lead)

    return _node(x.value + bias.value, (x, bias), "add-bias", backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise-add", a.value, b.value)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), "elementwise-add", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise-mul", a.value, b.value)
    av, bv = a.value, b.value

    def backward(g):
        ga = _unbroadcast(g * bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(av * bv, (a, b), "elementwise-mul", backward)


def divide(a, b) -> Tensor:
    """Broadcasting quotient a / b; b must be nonzero."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a.value, b.value)
    if np.any(b.value == 0):
        raise ZeroDivisionError("divide: zero denominator")
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        ga = _unbroadcast(g / bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), "divide", backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _node(x.value * c, (x,), "scalar-mul", lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep strictly inside (0, 1) even where float64 saturates
    return np.clip(out, _TINY, _ONE_MINUS)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = sigmoid_array(x.value)
    return _node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def hinge(x) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), "hinge", lambda g: (g * mask,))


def _axes(ndim: int, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x.value.ndim, axis)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise _shape_error("mean-over-rows", x.value)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(x.value.mean(axis=axes, keepdims=keepdims), (x,), "mean-over-rows", backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x.value.ndim, axis)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.value.sum(axis=axes, keepdims=keepdims), (x,), "sum-over-axis", backward)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[x.value for x in xs]) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, xs, "concat", backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.value, np.empty(0)) from None
    orig = x.shape
    return _node(out, (x,), "reshape", lambda g: (g.reshape(orig),))


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.value.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _node(x.value[index], (x,), "slice", backward)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.value**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ZeroDivisionError("l2-normalize: zero vector")
    y = x.value / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _node(y, (x,), "l2-normalize", backward)


def squared_l2_distance(a, b) -> Tensor:
    """Row-wise ||a - b||^2 over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("squared-l2-distance", a.value, b.value)
    diff = a.value - b.value

    def backward(g):
        ga = 2.0 * diff * g[..., None]
        return ga, -ga

    return _node((diff**2).sum(axis=-1), (a, b), "squared-l2-distance", backward)


def l2_distance(a, b) -> Tensor:
    """Row-wise Euclidean distance; the gradient at zero distance is taken as 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("l2-distance", a.value, b.value)
    diff = a.value - b.value
    dist = np.sqrt((diff**2).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)

    def backward(g):
        ga = diff * (np.where(dist > 0, g / safe, 0.0))[..., None]
        return ga, -ga

    return _node(dist, (a, b), "l2-distance", backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under row-wise softmax of logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("softmax-cross-entropy", logits.value, labels)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax-cross-entropy: labels must lie in [0, {c})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _node(loss, (logits,), "softmax-cross-entropy", backward)


def _conv_cols(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    n, c, h, w = x.shape
    # (N, C, H, W, k, k) -> (N*H*W, C*k*k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x, weight, bias) -> Tensor:
    """Same-padded stride-1 convolution; x is (N, C, H, W), weight (O, C, k, k) with odd k."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xv, wv = x.value, weight.value
    if (
        xv.ndim != 4
        or wv.ndim != 4
        or wv.shape[1] != xv.shape[1]
        or wv.shape[2] != wv.shape[3]
        or wv.shape[2] % 2 == 0
        or bias.shape != (wv.shape[0],)
    ):
        raise _shape_error("conv2d", xv, wv, bias.value)
    n, c, h, w = xv.shape
    o, _, k, _ = wv.shape
    cols = _conv_cols(xv, k)
    wmat = wv.reshape(o, -1)
    out = (cols @ wmat.T + bias.value).reshape(n, h, w, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wv.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            pad = k // 2
            dcols = (g2 @ wmat).reshape(n, h, w, c, k, k)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad : pad + h, pad : pad + w]
        return gx, gw, gb

    return _node(np.ascontiguousarray(out), (x, weight, bias), "conv2d", backward)


def avg_pool2d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.value.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise _shape_error("avg-pool", x.value)
    n, c, h, w = x.shape
    out = x.value.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return _node(out, (x,), "avg-pool", backward)


# ---------------------------------------------------------------------------
# dispatch by kind name

_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add-bias": add_bias,
    "elementwise-add": add,
    "elementwise-mul": mul,
    "scalar-mul": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "mean-over-rows": mean,
    "sum-over-axis": sum_,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "l2-normalize": l2_normalize,
    "squared-l2-distance": squared_l2_distance,
    "l2-distance": l2_distance,
    "softmax-cross-entropy": softmax_cross_entropy,
    "hinge": hinge,
    "divide": divide,
    "reshape": reshape,
    "slice": slice_axis,
    "conv2d": conv2d,
    "avg-pool": avg_pool2d,
}

PRIMITIVE_KINDS = tuple(_PRIMITIVES)


def forward_primitive(kind: str, *inputs, **attrs) -> np.ndarray:
    """Evaluate one primitive on plain arrays and return its value."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **attrs).value


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Populate ``.grad`` on every node upstream of a scalar loss.

    When ``store`` is given, the gradients of its bound leaves are added to its
    accumulators.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor produced by a forward pass")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64).reshape(parent.shape)
            else:
                parent.grad = parent.grad + g
    if store is not None:
        store.accumulate()


class ParamStore:
    """Named trainable arrays with matching gradient accumulators."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._bound: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> Tensor:
        """Leaf tensor for ``name`` bound to this store for the current graph."""
        leaf = self._bound.get(name)
        if leaf is None or leaf.value is not self.params[name]:
            leaf = Tensor(self.params[name], requires_grad=True, name=name)
            self._bound[name] = leaf
        return leaf

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def size(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        self._bound.clear()

    def accumulate(self) -> None:
        for name, leaf in self._bound.items():
            if leaf.grad is not None:
                self.grads[name] += leaf.grad
            leaf.grad = None
        self._bound.clear()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self.params.items()
