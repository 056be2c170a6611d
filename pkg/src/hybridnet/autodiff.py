"""
Dense float64 tensors with reverse-mode differentiation.

Every network block, loss and gradient check in the package is built from
the primitives defined here. Results are bitwise reproducible: reductions
run in a fixed order and BLAS is expected to be pinned to one thread (see
``hybridnet.runtime``).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand dimensions do not fit the operation."""


class SpecError(ValueError):
    """A convolution or pooling setting does not yield an integral output size."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the relu masks and pool winners chosen by forward passes."""
    prev = getattr(_state, "branches", None)
    log = _state.branches = []
    try:
        yield log
    finally:
        _state.branches = prev


def _note_branch(arr: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.packbits(arr).tobytes() if arr.dtype == bool else arr.tobytes())


class Tensor:
    """Immutable dense array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=DTYPE)
        if _check and not np.isfinite(arr).all():
            raise ValueError("tensor values must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)


class Parameter(Tensor):
    """Named learnable tensor whose ``grad`` always matches its dims."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        # parameters are updated in place by the optimizer
        self.data.flags.writeable = True
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, dims={self.dims})"

    def assign(self, values: np.ndarray):
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign {values.shape} to {self.data.shape}")
        self.data[...] = values


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; ``backward_fn(g)`` returns one grad (or None) per parent."""
    t = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=DTYPE)
    out.flags.writeable = False
    t.data = out
    t.grad = None
    t.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and reductions

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.dims), _unbroadcast(g, b.dims)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.dims), _unbroadcast(-g, b.dims)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.dims), _unbroadcast(g * a.data, b.dims)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.dims),
                _unbroadcast(-g * out / b.data, b.dims))
    return make_op(out, (a, b), bw)


def square(x: Tensor) -> Tensor:
    return make_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def safe_sqrt(x: Tensor) -> Tensor:
    """sqrt with subgradient 0 at exactly 0 (keeps constant maps finite)."""
    out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)
    return make_op(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) without overflow; derivative is the logistic sigmoid."""
    out = np.logaddexp(0.0, x.data)

    def bw(g):
        return (g * np.exp(-np.logaddexp(0.0, -x.data)),)
    return make_op(out, (x,), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.dims).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.dims).copy(),)
    return make_op(out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return make_op(x.data.sum() / n, (x,), lambda g: (np.full(x.dims, g / n),))


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    out = x.data.reshape(dims)
    return make_op(out, (x,), lambda g: (g.reshape(x.dims),))


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x.flat[index]`` (index entries must be unique)."""
    index = np.asarray(index, dtype=np.intp)
    flat = x.data.reshape(-1)

    def bw(g):
        full = np.zeros(flat.shape, dtype=DTYPE)
        full[index] = g
        return (full.reshape(x.dims),)
    return make_op(flat[index], (x,), bw)


def index_put(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with ``flat[index]`` replaced by ``values``."""
    index = np.asarray(index, dtype=np.intp)
    out = base.data.reshape(-1).copy()
    out[index] = values.data
    out = out.reshape(base.dims)

    def bw(g):
        flat = g.reshape(-1)
        gb = flat.copy()
        gb[index] = 0.0
        return gb.reshape(base.dims), flat[index]
    return make_op(out, (base, values), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].dims
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.dims, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: dims {t.dims} incompatible with {ref} along axis {axis}")
    sizes = [t.dims[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack N×C×H×W tensors along the channel axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    for t in tensors:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels expects N×C×H×W, got {t.dims}")
    return concat(tensors, axis=1)


# ---------------------------------------------------------------------------
# layers

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x·weightᵀ + bias for x of dims N×F and weight G×F."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"linear: bad ranks {x.dims}, {weight.dims}, {bias.dims}")
    if x.dims[1] != weight.dims[1] or bias.dims[0] != weight.dims[0]:
        raise ShapeError(f"linear: {x.dims} · {weight.dims}ᵀ + {bias.dims}")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)
    return make_op(out, (x, weight, bias), bw)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    span = size + 2 * padding - dilation * (kernel - 1) - 1
    if span < 0 or span % stride:
        raise SpecError(
            f"size {size}, kernel {kernel}, stride {stride}, padding {padding}, "
            f"dilation {dilation} does not give an integral output size")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded, dilated 2-D cross-correlation via im2col + one GEMM."""
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeError(f"conv2d: bad ranks {x.dims}, {weight.dims}, {bias.dims}")
    n, c, h, w = x.dims
    o, cw, kh, kw = weight.dims
    if cw != c or bias.dims[0] != o:
        raise ShapeError(f"conv2d: input {x.dims}, weight {weight.dims}, bias {bias.dims}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise SpecError(f"conv2d: stride={stride} padding={padding} dilation={dilation}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)

    p = padding
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        xp[:, :, p:p + h, p:p + w] = x.data
    else:
        xp = x.data
    # cols laid out (C, kh, kw, N, Ho, Wo) so the GEMM operand is a free reshape
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    windows = []
    for i in range(kh):
        for j in range(kw):
            sy = slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride)
            sx = slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride)
            windows.append((i, j, sy, sx))
            cols[:, i, j] = xp[:, :, sy, sx].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, c * kh * kw)
    out = (w2 @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g2 @ cols2.T).reshape(weight.dims) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i, j, sy, sx in windows:
                gxp[:, :, sy, sx] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb
    return make_op(out, (x, weight, bias), bw)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Window max; ties route the gradient to the first row-major maximum."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects N×C×H×W, got {x.dims}")
    if kernel < 1 or stride < 1:
        raise SpecError(f"max_pool2d: kernel={kernel} stride={stride}")
    n, c, h, w = x.dims
    if kernel == stride:
        if h % stride or w % stride:
            raise ShapeError(f"max_pool2d: {h}×{w} not divisible by stride {stride}")
        ho, wo = h // stride, w // stride
        win = (x.data.reshape(n, c, ho, kernel, wo, kernel)
               .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel))
    else:
        ho = conv_output_size(h, kernel, stride, 0, 1)
        wo = conv_output_size(w, kernel, stride, 0, 1)
        sw = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
        win = sw[:, :, ::stride, ::stride].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    _note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((n, c, ho, wo, kernel * kernel), dtype=DTYPE)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        if kernel == stride:
            gx = (gwin.reshape(n, c, ho, wo, kernel, kernel)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))
        else:
            gx = np.zeros(x.dims, dtype=DTYPE)
            gwin = gwin.reshape(n, c, ho, wo, kernel, kernel)
            for i in range(kernel):
                for j in range(kernel):
                    gx[:, :, i:i + stride * (ho - 1) + 1:stride,
                       j:j + stride * (wo - 1) + 1:stride] += gwin[..., i, j]
        return (gx,)
    return make_op(out, (x,), bw)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape n_out×n_in."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for i in range(n_out):
        src = i * scale
        lo = min(int(np.floor(src)), n_in - 1)
        frac = src - lo
        if lo == n_in - 1 or frac == 0.0:
            m[i, lo] = 1.0
        else:
            m[i, lo] = 1.0 - frac
            m[i, lo + 1] = frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable align-corners bilinear resize of an N×C×H×W tensor."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects N×C×H×W, got {x.dims}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size {out_h}×{out_w}")
    n, c, h, w = x.dims
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return make_op(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


# ---------------------------------------------------------------------------
# verification

def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-4,
               samples_per_param: int | None = None, seed: int = 0) -> float:
    """Worst relative disagreement between backward and central differences.

    Per tensor the error is ``max|a-n| / max(1e-8, max|a| + max|n|)``;
    the maximum over tensors is returned. ``samples_per_param`` restricts
    the finite-difference probe to a seeded subset of elements.
    """
    return grad_check_details(fn, params, epsilon, samples_per_param, seed)[0]


def grad_check_details(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-4,
                       samples_per_param: int | None = None, seed: int = 0) -> tuple[float, int]:
    """Like grad_check, also returning how many probes straddled a kink.

    A probe whose +eps and -eps passes pick different relu masks or pool
    winners is not differentiable across the step; it is skipped and, when
    sampling, replaced by the next element of the seeded order.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst, skipped = 0.0, 0
    for p, a in zip(params, analytic):
        writable = p.data.flags.writeable
        p.data.flags.writeable = True
        flat = p.data.reshape(-1)
        order = np.arange(flat.size)
        want = flat.size
        if samples_per_param is not None and samples_per_param < flat.size:
            order = rng.permutation(flat.size)
            want = samples_per_param
        idx, num = [], []
        with no_grad():
            for i in order:
                if len(idx) == want:
                    break
                orig = flat[i]
                flat[i] = orig + epsilon
                with record_branches() as up_branches:
                    up = fn().item()
                flat[i] = orig - epsilon
                with record_branches() as down_branches:
                    down = fn().item()
                flat[i] = orig
                if up_branches != down_branches:
                    skipped += 1
                    continue
                idx.append(i)
                num.append((up - down) / (2.0 * epsilon))
        p.data.flags.writeable = writable
        if not idx and flat.size:
            return float("inf"), skipped   # nothing left to compare against
        num = np.asarray(num)
        ana = a.reshape(-1)[np.asarray(idx, dtype=np.intp)]
        denom = max(1e-8, float(np.abs(ana).max(initial=0.0) + np.abs(num).max(initial=0.0)))
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0)) / denom)
    return worst, skipped
