"""Dense tensors with recorded-graph reverse-mode automatic differentiation.

The operator set is exactly what the fusion network needs: grouped 2-D
convolution, batched matmul, softmax, sigmoid, leaky ReLU, channel concat,
bilinear up / area down resampling, elementwise arithmetic and a handful of
reductions.  Image tensors use NCHW order.  There is no broadcasting beyond
the convolution bias and scalar scaling; binary ops require equal shapes.

Gradients are accumulated by walking the recorded graph once, in reverse
topological order.  A graph is consumed by ``backward`` and cannot be
replayed; rebuild the forward pass instead.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericalError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf detection (off by default for speed)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    """A dense float32/float64 array, optionally tracked in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; named functions below carry the real contracts
    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_scalar(other) else div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}")
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: operand dtypes {a.dtype} and {b.dtype} differ")


_CONSUMED = object()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar (shape ``()``).  The recorded graph is consumed;
    calling ``backward`` a second time on the same graph raises ``UsageError``.
    Gradients accumulate (+=) into ``.grad``, so zero them between steps.
    """
    if loss.shape != ():
        raise UsageError(f"backward requires a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward root does not require grad; nothing to differentiate")
    if loss._backward_fn is _CONSUMED:
        raise UsageError("backward already called on this graph; rebuild the forward pass")
    if loss._backward_fn is None:
        # a bare leaf: d(leaf)/d(leaf) = 1
        seed = np.ones((), dtype=loss.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        fn = node._backward_fn
        if fn is _CONSUMED:
            raise UsageError("graph reuses a node already consumed by backward; rebuild the forward pass")
        if fn is None:  # leaf (input or parameter)
            if node.requires_grad:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward_fn = _CONSUMED  # consume the graph
        node._parents = ()


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum of two equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        return g, g

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        return g, -g

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product of two equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "div")

    def bw(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _node(a.data / b.data, (a, b), bw)


def scale(x, s: float) -> Tensor:
    """Multiply by a python scalar."""
    x = _as_tensor(x)
    s = float(s)

    def bw(g):
        return (g * s,)

    return _node(x.data * np.asarray(s, dtype=x.dtype), (x,), bw)


def shift(x, c: float) -> Tensor:
    """Add a python scalar."""
    x = _as_tensor(x)

    def bw(g):
        return (g,)

    return _node(x.data + np.asarray(float(c), dtype=x.dtype), (x,), bw)


def absolute(x) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        return (g * np.sign(x.data),)

    return _node(np.abs(x.data), (x,), bw)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        return (g * (0.5 / out),)

    return _node(out, (x,), bw)


def arccos(x) -> Tensor:
    """Inverse cosine; inputs must stay strictly inside (-1, 1) for finite grads."""
    x = _as_tensor(x)

    def bw(g):
        return (-g / np.sqrt(1.0 - x.data * x.data),)

    return _node(np.arccos(x.data), (x,), bw)


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 strictly inside the interval, else 0."""
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data)
    if lo is not None:
        mask = mask * (x.data > lo)
    if hi is not None:
        mask = mask * (x.data < hi)

    def bw(g):
        return (g * mask,)

    return _node(out, (x,), bw)


def sigmoid(x) -> Tensor:
    """Logistic function; outputs lie strictly in (0, 1).

    Saturated values are nudged to the nearest representable number inside
    the open interval so the strict bound survives float rounding.
    """
    x = _as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    info = np.finfo(d.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), bw)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    """max(x, slope*x) with the conventional negative-side slope."""
    x = _as_tensor(x)
    neg = x.data < 0
    out = np.where(neg, x.data * slope, x.data)

    def bw(g):
        return (np.where(neg, g * slope, g),)

    return _node(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (x,), bw)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise UsageError("concat: need at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != axis and t.shape[i] != ref.shape[i] for i in range(ref.ndim)
        ):
            raise DimensionError(
                f"concat: shape {t.shape} incompatible with {ref.shape} on axis {axis}"
            )
        if t.dtype != ref.dtype:
            raise DimensionError("concat: mixed dtypes")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _node(x.data.transpose(axes), (x,), bw)


def channel_slice(x, c0: int, c1: int) -> Tensor:
    """Channel slice of an NCHW tensor: x[:, c0:c1]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"channel_slice expects NCHW, got shape {x.shape}")
    if not 0 <= c0 < c1 <= x.shape[1]:
        raise DimensionError(f"channel window [{c0}:{c1}] outside {x.shape}")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, c0:c1] = g
        return (full,)

    return _node(x.data[:, c0:c1].copy(), (x,), bw)


def crop(x, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Spatial slice of an NCHW tensor: x[:, :, h0:h1, w0:w1]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"crop expects NCHW, got shape {x.shape}")
    if not (0 <= h0 < h1 <= x.shape[2] and 0 <= w0 < w1 <= x.shape[3]):
        raise DimensionError(f"crop window [{h0}:{h1}, {w0}:{w1}] outside {x.shape}")

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, h0:h1, w0:w1] = g
        return (full,)

    return _node(x.data[:, :, h0:h1, w0:w1].copy(), (x,), bw)


def tsum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum over all elements (axis=None, scalar result) or along one axis."""
    x = _as_tensor(x)
    if axis is None:
        def bw(g):
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

        return _node(np.sum(x.data), (x,), bw)

    axis = axis % x.ndim

    def bw_axis(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw_axis)


def tmean(x) -> Tensor:
    """Mean over all elements (scalar result)."""
    x = _as_tensor(x)
    return scale(tsum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation on NCHW input.

    ``weight`` has shape (Cout, Cin/groups, kH, kW); ``bias``, when given,
    shape (Cout,).  With groups=g the channels split into g independent
    blockwise convolutions.  Output extents must come out integral.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: need NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise DimensionError(f"conv2d: groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise DimensionError(f"conv2d: weight expects Cin/groups={cg}, input gives {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw or (hp - kh) % stride or (wp - kw) % stride:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} stride {stride} pad {padding} does not tile input {h}x{w}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    og = cout // groups

    if padding:
        xp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
        xp[:, :, padding:-padding, padding:-padding] = x.data
    else:
        xp = x.data

    if kh == kw == 1 and stride == 1:
        # pointwise fast path: a single batched matmul per group
        xmat = xp.reshape(n, groups, cg, ho * wo).transpose(1, 2, 0, 3).reshape(groups, cg, n * ho * wo)
        fmat = weight.data.reshape(groups, og, cg)
        out = np.matmul(fmat, xmat)  # (g, og, n*ho*wo)
        out = out.reshape(groups, og, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, cout, ho, wo)
        win_mat = None
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win.reshape(n, groups, cg, ho, wo, kh, kw)
        win_mat = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cg * kh * kw)
        fmat = weight.data.reshape(groups, og, cg * kh * kw)
        out = np.matmul(win_mat, fmat.transpose(0, 2, 1))  # (g, n*ho*wo, og)
        out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)

    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gg = g.reshape(n, groups, og, ho, wo)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if kh == kw == 1 and stride == 1:
            gm = gg.transpose(1, 2, 0, 3, 4).reshape(groups, og, n * ho * wo)
            xm = xp.reshape(n, groups, cg, ho * wo).transpose(1, 2, 0, 3).reshape(groups, cg, n * ho * wo)
            dw = np.matmul(gm, xm.transpose(0, 2, 1)).reshape(weight.shape)
            dx = np.matmul(fmat.transpose(0, 2, 1), gm)  # (g, cg, n*ho*wo)
            dxp = dx.reshape(groups, cg, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, cin, hp, wp)
        else:
            gm = gg.transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
            dw = np.matmul(gm.transpose(0, 2, 1), win_mat).reshape(weight.shape)
            dwin = np.matmul(gm, fmat)  # (g, n*ho*wo, cg*kh*kw)
            dwin = dwin.reshape(groups, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
            dwin = dwin.reshape(n, cin, ho, wo, kh, kw)
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dwin[:, :, :, :, ki, kj]
        dx_full = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
        grads = [dx_full, dw]
        if bias is not None:
            grads.append(db)
        return tuple(grads)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product (…, m, k) @ (…, k, n).

    Batch dimensions must match exactly, or one operand may be a plain 2-D
    matrix shared across the other's batch.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ")
    if a.ndim != b.ndim:
        if not (a.ndim == 2 or b.ndim == 2):
            raise DimensionError(f"matmul: batch ranks {a.shape} vs {b.shape} unsupported")
    elif a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} differ")
    if a.dtype != b.dtype:
        raise DimensionError("matmul: mixed dtypes")

    def bw(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if da.shape != a.shape:  # a was a shared 2-D matrix
            da = da.sum(axis=tuple(range(da.ndim - 2)))
        if db.shape != b.shape:
            db = db.sum(axis=tuple(range(db.ndim - 2)))
        return da, db

    return _node(np.matmul(a.data, b.data), (a, b), bw)


_resample_cache: dict[tuple, np.ndarray] = {}


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix, half-pixel centers, edge clamped."""
    key = ("up", n_in, factor, np.dtype(dtype).name)
    m = _resample_cache.get(key)
    if m is None:
        n_out = n_in * factor
        m = np.zeros((n_out, n_in), dtype=np.float64)
        for o in range(n_out):
            u = (o + 0.5) / factor - 0.5
            i0 = int(math.floor(u))
            t = u - i0
            lo, hi = min(max(i0, 0), n_in - 1), min(max(i0 + 1, 0), n_in - 1)
            m[o, lo] += 1.0 - t
            m[o, hi] += t
        m = m.astype(dtype)
        _resample_cache[key] = m
    return m


def upsample(x, factor: int) -> Tensor:
    """Bilinear spatial upsampling of an NCHW tensor by an integer factor."""
    x = _as_tensor(x)
    factor = int(factor)
    if x.ndim != 4:
        raise DimensionError(f"upsample expects NCHW, got shape {x.shape}")
    if factor < 1:
        raise DimensionError(f"upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return scale(x, 1.0)
    n, c, h, w = x.shape
    uh = _bilinear_matrix(h, factor, x.dtype)
    uw = _bilinear_matrix(w, factor, x.dtype)
    out = np.einsum("ai,bj,ncij->ncab", uh, uw, x.data, optimize=True)

    def bw(g):
        return (np.einsum("ai,bj,ncab->ncij", uh, uw, g, optimize=True),)

    return _node(out, (x,), bw)


def downsample(x, factor: int) -> Tensor:
    """Area-average spatial downsampling of an NCHW tensor by an integer factor."""
    x = _as_tensor(x)
    factor = int(factor)
    if x.ndim != 4:
        raise DimensionError(f"downsample expects NCHW, got shape {x.shape}")
    if factor < 1:
        raise DimensionError(f"downsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return scale(x, 1.0)
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"downsample: factor {factor} does not divide spatial extents {h}x{w}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def bw(g):
        gexp = np.broadcast_to(
            g[:, :, :, None, :, None] * np.asarray(inv, dtype=g.dtype),
            (n, c, ho, factor, wo, factor),
        )
        return (gexp.reshape(n, c, h, w).astype(g.dtype, copy=False),)

    return _node(out, (x,), bw)
