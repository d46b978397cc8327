"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built dynamically: every op returns a new ``Tensor`` that
remembers its parents and a backward closure.  Calling ``backward()`` on a
scalar walks the graph once in reverse topological order and accumulates
gradients additively, so a tensor consumed by k downstream nodes receives
the sum of k contributions.  All storage is row-major float64; images are
NCHW.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, GraphError, NumericError, ShapeError

LOG_EPS = 1e-12


class Tensor:
    """One node of the differentiation graph.

    ``data`` holds the forward value, ``grad`` the accumulated gradient of
    the same shape (or None before backward / after zero_grad).  Leaf
    tensors with ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut out of the graph (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires one.

        Must be called on a scalar; each node's backward rule runs exactly
        once, after all of its consumers.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(x, requires_grad=False, op="constant")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # never in-place: g may alias another node's grad buffer
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: operands {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data + b.data, requires_grad=req, _parents=(a, b), op="add")
    if req:
        def _bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data - b.data, requires_grad=req, _parents=(a, b), op="sub")
    if req:
        def _bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data * b.data, requires_grad=req, _parents=(a, b), op="mul")
    if req:
        def _bw():
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def scale(x, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c, requires_grad=x.requires_grad, _parents=(x,), op="scale")
    if x.requires_grad:
        def _bw():
            _accumulate(x, out.grad * c)
        out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible operands {a.data.shape} @ {b.data.shape}"
        )
    req = a.requires_grad or b.requires_grad
    out = Tensor(a.data @ b.data, requires_grad=req, _parents=(a, b), op="matmul")
    if req:
        def _bw():
            if a.requires_grad:
                _accumulate(a, out.grad @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ out.grad)
        out._backward = _bw
    return out


def add_bias(x, b) -> Tensor:
    """Add a per-feature bias: (N,F)+(F,) or (N,C,H,W)+(C,)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-d, got {b.data.shape}")
    if x.data.ndim == 2:
        if x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"add_bias: features {x.data.shape} vs bias {b.data.shape}"
            )
        return add(x, b)
    if x.data.ndim == 4:
        if x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"add_bias: channels {x.data.shape} vs bias {b.data.shape}"
            )
        return add(x, reshape(b, (1, b.data.shape[0], 1, 1)))
    raise ShapeError(f"add_bias: unsupported input rank {x.data.ndim}")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(
        np.maximum(x.data, 0.0), requires_grad=x.requires_grad, _parents=(x,), op="relu"
    )
    if x.requires_grad:
        def _bw():
            _accumulate(x, out.grad * (x.data > 0.0))
        out._backward = _bw
    return out


def log(x) -> Tensor:
    """Natural log, clamped below so log(p) is finite for p >= 0."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, LOG_EPS)
    out = Tensor(np.log(clamped), requires_grad=x.requires_grad, _parents=(x,), op="log")
    if x.requires_grad:
        def _bw():
            # flat below the clamp
            _accumulate(x, out.grad * (x.data >= LOG_EPS) / clamped)
        out._backward = _bw
    return out


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)
    out = Tensor(out_data, requires_grad=x.requires_grad, _parents=(x,), op="sum")
    if x.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.data.shape))
        out._backward = _bw
    return out


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    return scale(reduce_sum(x), 1.0 / x.data.size)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}") from None
    out = Tensor(out_data, requires_grad=x.requires_grad, _parents=(x,), op="reshape")
    if x.requires_grad:
        def _bw():
            _accumulate(x, out.grad.reshape(x.data.shape))
        out._backward = _bw
    return out


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: need a batch axis, got shape {x.data.shape}")
    return reshape(x, (x.data.shape[0], -1))


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Forward cross-correlation on plain arrays (shared by op and eval paths)."""
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {cw}")
    if stride < 1 or int(stride) != stride:
        raise ConfigError(f"conv2d: stride must be a positive integer, got {stride}")
    if pad < 0:
        raise ConfigError(f"conv2d: pad must be non-negative, got {pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1 or (h + 2 * pad) < kh or (wd + 2 * pad) < kw:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} does not fit input {(h, wd)} with pad {pad}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, f, oh, ow))
    for ki in range(kh):
        for kj in range(kw):
            window = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
            out += np.einsum("nchw,fc->nfhw", window, w[:, :, ki, kj])
    return out


def avgpool2d_raw(x: np.ndarray, size: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(
            f"avgpool2d: spatial dims {(h, w)} not divisible by window {size}"
        )
    return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with an (F,C,KH,KW) kernel.

    Direct evaluation: one fused product per kernel offset, summed over
    offsets.  Zero padding of ``pad`` on each spatial border, ``stride``
    applied to the output grid.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need NCHW input and FCKK kernel, got {x.data.shape} and {w.data.shape}"
        )
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    out_data = conv2d_raw(x.data, w.data, stride, pad)
    oh, ow = out_data.shape[2], out_data.shape[3]
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    )
    req = x.requires_grad or w.requires_grad
    out = Tensor(out_data, requires_grad=req, _parents=(x, w), op="conv2d")
    if req:
        def _bw():
            g = out.grad
            if w.requires_grad:
                gw = np.zeros_like(w.data)
                for ki in range(kh):
                    for kj in range(kw):
                        window = xp[
                            :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
                        ]
                        gw[:, :, ki, kj] = np.einsum("nfhw,nchw->fc", g, window)
                _accumulate(w, gw)
            if x.requires_grad:
                gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[
                            :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
                        ] += np.einsum("nfhw,fc->nchw", g, w.data[:, :, ki, kj])
                if pad:
                    gxp = gxp[:, :, pad : pad + h, pad : pad + wd]
                _accumulate(x, gxp)
        out._backward = _bw
    return out


def avgpool2d(x, size: int) -> Tensor:
    """Non-overlapping average pooling with a size x size window."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d: need NCHW input, got {x.data.shape}")
    if size < 1 or int(size) != size:
        raise ConfigError(f"avgpool2d: size must be a positive integer, got {size}")
    out_data = avgpool2d_raw(x.data, size)
    out = Tensor(out_data, requires_grad=x.requires_grad, _parents=(x,), op="avgpool2d")
    if x.requires_grad:
        def _bw():
            g = out.grad / (size * size)
            _accumulate(x, np.repeat(np.repeat(g, size, axis=2), size, axis=3))
        out._backward = _bw
    return out


def softmax_t(z, temperature: float) -> Tensor:
    """Temperature softmax along the last axis, max-subtracted for stability."""
    z = as_tensor(z)
    t = float(temperature)
    if t <= 0.0:
        raise ConfigError(f"softmax_t: temperature must be positive, got {temperature}")
    if z.data.shape[-1] < 2:
        raise ShapeError(f"softmax_t: need >= 2 classes, got shape {z.data.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("softmax_t: non-finite logits")
    scaled = z.data / t
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, requires_grad=z.requires_grad, _parents=(z,), op="softmax_t")
    if z.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(z, p * (g - dot) / t)
        out._backward = _bw
    return out


def rescale(x, factor: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``factor``.

    Placed at a branch point with b branches, factor 1/b turns the sum of
    the branches' gradients into their average before it reaches the layers
    below.
    """
    x = as_tensor(x)
    factor = float(factor)
    if not 0.0 < factor <= 1.0:
        raise ConfigError(f"rescale: factor must be in (0, 1], got {factor}")
    # shares the input buffer so the forward value is bit-identical
    out = Tensor(x.data, requires_grad=x.requires_grad, _parents=(x,), op="rescale")
    if x.requires_grad:
        def _bw():
            _accumulate(x, out.grad * factor)
        out._backward = _bw
    return out


def sum_scalars(terms) -> Tensor:
    """Sum of scalar tensors, correctly rounded (order-independent).

    Used for per-head losses so the total is exactly invariant under head
    permutation.
    """
    terms = [as_tensor(t) for t in terms]
    if not terms:
        raise GraphError("sum_scalars: empty term list")
    for t in terms:
        if t.data.size != 1:
            raise ShapeError(f"sum_scalars: non-scalar term of shape {t.data.shape}")
    total = math.fsum(float(t.data) for t in terms)
    req = any(t.requires_grad for t in terms)
    out = Tensor(total, requires_grad=req, _parents=tuple(terms), op="sum_scalars")
    if req:
        def _bw():
            g = out.grad.reshape(())
            for t in terms:
                if t.requires_grad:
                    _accumulate(t, np.broadcast_to(g, t.data.shape))
        out._backward = _bw
    return out


class ParameterStore:
    """Named parameter tensors with stable ordering plus momentum buffers.

    Each shared parameter appears exactly once no matter how many heads
    reference it; iteration order is insertion order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} registered twice")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_size(self) -> int:
        return sum(t.data.size for t in self._params.values())
