"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Tensors wrap numpy buffers (float32 for training, float64 for verification;
a graph keeps one dtype throughout). Each primitive records a backward rule
on a tape; ``backward`` walks the tape in reverse topological order and
accumulates gradients into ``requires_grad`` leaves.

Conventions:
- every primitive screens its output for NaN/Inf and raises NonFiniteValue;
- elementwise binary ops broadcast only by leading-dimension expansion
  (operand shapes equal, or one is a suffix of the other); anything else
  must go through the explicit ``expand`` primitive;
- softmax/logsumexp use a detached max shift, so exponentials never overflow
  for similarity-scaled logits.
"""

import math
from contextlib import contextmanager

import numpy as np

from .errors import NonFiniteValue, NonScalarLoss, ShapeMismatch

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/eval paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _screen_finite(arr, op):
    # NaN/Inf propagate into a sum, so one reduction screens the whole buffer.
    if arr.size and not math.isfinite(float(np.sum(arr))):
        raise NonFiniteValue(f"non-finite value produced by '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars go through the *_scalar primitives
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _node(data, parents, backward, op):
    _screen_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeMismatch(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype} in one graph")


def _check_broadcast(a, b, op):
    # leading-dimension expansion only: shapes equal or one is a suffix of the other
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    k = min(len(sa), len(sb))
    if k == 0 or sa[len(sa) - k:] != sb[len(sb) - k:]:
        raise ShapeMismatch(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def _reduce_to(grad, shape):
    # sum gradient over leading axes introduced by broadcasting
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    _check_broadcast(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def add_scalar(a: Tensor, c) -> Tensor:
    c = float(c)

    def backward(g):
        return (g,)

    return _node(a.data + a.data.dtype.type(c), (a,), backward, "add_scalar")


def mul_scalar(a: Tensor, c) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _node(a.data * a.data.dtype.type(c), (a,), backward, "mul_scalar")


def pow_scalar(a: Tensor, p) -> Tensor:
    p = float(p)
    out_data = a.data ** a.data.dtype.type(p)

    def backward(g):
        return (g * p * a.data ** a.data.dtype.type(p - 1.0),)

    return _node(out_data, (a,), backward, "pow_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeMismatch(f"matmul: operands must be at least 2-D, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {sa} vs {sb}")
    stacked_ok = (len(sa) == len(sb) and sa[:-2] == sb[:-2]) or len(sa) == 2 or len(sb) == 2
    if not stacked_ok:
        raise ShapeMismatch(f"matmul: unsupported stacking {sa} vs {sb}")

    def backward(g):
        if len(sb) == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        elif len(sa) == 2:
            # a is a plain matrix applied to a stacked b: sum grad over stack dims
            lead = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
            ga = np.tensordot(g, b.data, axes=[lead, lead])
            gb = a.data.T @ g
        else:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b (bias broadcast over leading dims); one tape node."""
    _check_same_dtype(x, w, "affine")
    _check_same_dtype(x, b, "affine")
    sx, sw = x.data.shape, w.data.shape
    if len(sw) != 2 or len(sx) < 2 or sx[-1] != sw[0] or b.data.shape != (sw[1],):
        raise ShapeMismatch(f"affine: incompatible shapes {sx} @ {sw} + {b.data.shape}")
    out_data = x.data @ w.data
    out_data += b.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, sw[0]).T @ g.reshape(-1, sw[1])
        gb = g.reshape(-1, sw[1]).sum(axis=0)
        return gx, gw, gb

    return _node(out_data, (x, w, b), backward, "affine")


def relu(a: Tensor) -> Tensor:
    def backward(g):
        return (g * (a.data > 0),)

    return _node(np.maximum(a.data, 0), (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))); fused in-place to
    # avoid temporary churn in the training hot path
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    out_data = t + 1.0
    out_data *= x
    out_data *= 0.5

    def backward(g):
        d = t * t
        np.subtract(1.0, d, out=d)       # sech^2
        tail = x2 * (3 * 0.044715)
        tail += 1.0
        tail *= _GELU_C
        tail *= x
        tail *= d
        tail += 1.0
        tail += t
        tail *= 0.5
        tail *= g
        return (tail,)

    return _node(out_data, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _node(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _node(out_data, (a,), backward, "log")


def tsum(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.data.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.data.shape),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)  # detached shift
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_full = np.log(s) + m
    out_data = out_full if keepdims else np.squeeze(out_full, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (e / s),)

    return _node(out_data, (a,), backward, "logsumexp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    e = a.data - m
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    out_data = e

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        gx = g - dot
        gx *= out_data
        return (gx,)

    return _node(out_data, (a,), backward, "softmax")


def layernorm(x: Tensor, scale: Tensor, shift: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[axis]
    if scale.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeMismatch(f"layernorm: scale/shift must have shape ({d},)")
    _check_same_dtype(x, scale, "layernorm")
    bshape = [1] * x.data.ndim
    bshape[axis] = d
    gamma = scale.data.reshape(bshape)
    beta = shift.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    var += x.data.dtype.type(eps)
    inv = 1.0 / np.sqrt(var)
    xhat = xc
    xhat *= inv
    out_data = xhat * gamma
    out_data += beta

    def backward(g):
        red = tuple(i for i in range(g.ndim) if i != (axis % g.ndim))
        dscale = np.sum(g * xhat, axis=red)
        dshift = np.sum(g, axis=red)
        dxhat = g * gamma
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=axis, keepdims=True)
        dx = dxhat
        dx -= m1
        dx -= xhat * m2
        dx *= inv
        return dx, dscale, dshift

    return _node(out_data, (x, scale, shift), backward, "layernorm")


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    sq = np.sum(a.data * a.data, axis=axis, keepdims=True)
    if np.any(sq == 0):
        raise NonFiniteValue("l2_normalize: zero-norm row")
    n = np.sqrt(sq)
    out_data = a.data / n

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return ((g - out_data * dot) / n,)

    return _node(out_data, (a,), backward, "l2_normalize")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.data.shape),)

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of `a` to `shape` (gradient sums over expanded axes)."""
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeMismatch(f"expand: cannot broadcast {a.data.shape} to {shape}") from e

    def backward(g):
        extra = len(shape) - a.data.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        rep = tuple(i for i, d in enumerate(a.data.shape) if d == 1 and g.shape[i] != 1)
        if rep:
            g = g.sum(axis=rep, keepdims=True)
        return (g,)

    return _node(out_data, (a,), backward, "expand")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along one axis."""
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(start, stop)
    slicer = tuple(slicer)

    def backward(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        return (full,)

    return _node(a.data[slicer].copy(), (a,), backward, "narrow")


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; fills .grad on requires_grad leaves."""
    if loss.data.shape != ():
        raise NonScalarLoss(f"backward expects a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # iterative topological order (graphs can be deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        bwd = node._backward
        if bwd is None or node.grad is None:
            continue  # leaves keep their accumulated gradient
        grads = bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.data.dtype)
            if parent.grad is None:
                # copy: closures may hand the same buffer to several parents
                parent.grad = g.copy() if g.shape == parent.data.shape else \
                    np.broadcast_to(g, parent.data.shape).copy()
            else:
                parent.grad += g
        # free tape bookkeeping and intermediate grads
        node._backward = None
        node._parents = ()
        if node is not loss:
            node.grad = None


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time.

    Evaluate in float64: the O(h^2) truncation error then sits far below the
    1e-3 relative tolerance used by the gradient checks.
    """
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, base)
        flat[i] = orig - h
        fm = _eval_scalar(f, base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_grad_at(f, x: Tensor, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices (for large parameter sets)."""
    base = x.data.astype(np.float64).copy()
    flat = base.reshape(-1)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, base)
        flat[i] = orig - h
        fm = _eval_scalar(f, base)
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def _eval_scalar(f, data):
    val = f(Tensor(data.copy(), requires_grad=False))
    if isinstance(val, Tensor):
        return val.item()
    return float(val)
