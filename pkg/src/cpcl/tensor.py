"""Dense float tensors with tape-based reverse-mode autodiff.

Every differentiable op records a :class:`Node` when gradient tracking is on
and at least one input requires grad. ``backward`` gathers the nodes that are
reachable from a scalar loss and replays them in reverse execution order,
each exactly once.

Storage is float32. float64 tensors are accepted so that test oracles can run
the very same ops in double precision.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UsageError

DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One tape entry: an executed op, its inputs and its vector-Jacobian rule."""

    __slots__ = ("op", "inputs", "_output", "vjp", "seq")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self._output = None
        self.seq = next(_seq)

    # weak, so a graph is freed by refcounting once its loss goes out of scope
    @property
    def output(self) -> Tensor | None:
        return None if self._output is None else self._output()

    @output.setter
    def output(self, t: Tensor) -> None:
        self._output = weakref.ref(t)

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "retains_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.retains_grad = False

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def is_leaf(self) -> bool:
        return self.node is None

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar():
    raise UsageError("item() needs a single-element tensor")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = DTYPE if arr.dtype not in (np.float32, np.float64) else arr.dtype
    return Tensor(arr, dtype=dtype)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data, dtype=None)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), vjp)
        node.output = out
        out.node = node
    return out


def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=ref.dtype), dtype=None)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=ref.dtype), dtype=None)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _result(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, "square", (x,), lambda g: (2 * g * x.data,))


def l2_norm(x: Tensor, axis: int = 1, keepdims: bool = True, eps: float = 1e-8) -> Tensor:
    """``max(||x||_2, eps)`` along ``axis``; zero gradient where the floor is active."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    active = n > eps
    out = np.maximum(n, eps).astype(x.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        scale = np.where(active, g / np.where(active, n, 1), 0).astype(x.dtype)
        return (x.data * scale,)

    return _result(out if keepdims else out.squeeze(axis), "l2_norm", (x,), vjp)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None,
          passthrough: bool = False) -> Tensor:
    """Clip values; the gradient passes only where the input was inside [lo, hi].

    With ``passthrough`` the clip bounds the value but the gradient is the identity.
    """
    out = np.clip(x.data, lo, hi)
    if passthrough:
        return _result(out, "clamp", (x,), lambda g: (g,))
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
    if hi is not None:
        keep &= x.data <= hi
    return _result(out, "clamp", (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.maximum(x.data, 0).astype(x.dtype), "relu", (x,),
                   lambda g: (np.where(pos, g, 0).astype(g.dtype),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(np.array(x.data[index]), "getitem", (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax), "concat", tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (x,), vjp)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (x,), vjp)


def cast(x: Tensor, dtype) -> Tensor:
    """Precision change; the gradient is cast back to the input dtype."""
    src = x.dtype
    return _result(x.data.astype(dtype), "cast", (x,), lambda g: (g.astype(src),))


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient, never recorded on the tape."""
    return Tensor(x.data, requires_grad=False, dtype=None)


# ---------------------------------------------------------------------------
# volumetric ops
# ---------------------------------------------------------------------------

def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``x[N,Cin,D,H,W]`` with ``weight[Cout,Cin,kd,kh,kw]``.

    Lowered to one GEMM per batch item over an im2col matrix.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape}, {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, wcin, kd, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, kernel expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    if min(sd, sh, sw) < 1:
        raise ShapeError("conv3d: stride must be >= 1")
    if kd > d + 2 * pd or kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"conv3d: kernel {weight.shape[2:]} exceeds padded input {x.shape[2:]}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if (pd or ph or pw) else x.data
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    k = cin * kd * kh * kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(n, k, od * oh * ow)
    w2 = weight.data.reshape(cout, k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, od, oh, ow)

    def vjp(g):
        g2 = g.reshape(n, cout, -1)
        gw = np.zeros_like(w2)
        for i in range(n):
            gw += g2[i] @ cols[i].T
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, cin, kd, kh, kw, od, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxp[:, :,
                            a:a + sd * (od - 1) + 1:sd,
                            b:b + sh * (oh - 1) + 1:sh,
                            c:c + sw * (ow - 1) + 1:sw] += gcols[:, :, a, b, c]
            gx = np.ascontiguousarray(gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w])
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv3d", inputs, vjp)


def max_pool3d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2x2 max pooling; ties route the gradient to the first maximum."""
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max_pool3d: spatial dims {x.shape[2:]} must be even")
    blocks = (x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7)
              .reshape(n, c, d // 2, h // 2, w // 2, 8))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(x.shape))
        return (gx,)

    return _result(out, "max_pool3d", (x,), vjp)


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, d, h, w = x.shape
    f = factor
    out = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)

    def vjp(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _result(out, "upsample_nearest3d", (x,), vjp)


def linear_interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row t blends the two source samples around s = (t + 0.5) * n_in / n_out - 0.5."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for t in range(n_out):
        s = min(max((t + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        frac = s - i0
        m[t, i0] += 1.0 - frac
        m[t, i1] += frac
    return m


def trilinear_upsample(x: Tensor, out_dims) -> Tensor:
    """Resize ``x[N,C,d,h,w]`` to ``out_dims`` with half-pixel-centre trilinear weights."""
    if x.ndim != 5:
        raise ShapeError(f"trilinear_upsample expects a 5-D tensor, got {x.shape}")
    od, oh, ow = _triple(out_dims)
    if min(od, oh, ow) < 1:
        raise ShapeError(f"trilinear_upsample: out_dims must be >= 1, got {out_dims}")
    n, c, d, h, w = x.shape
    if (d, h, w) == (od, oh, ow):
        return _result(x.data.copy(), "trilinear_upsample", (x,), lambda g: (g,))
    md = linear_interp_matrix(d, od).astype(x.dtype)
    mh = linear_interp_matrix(h, oh).astype(x.dtype)
    mw = linear_interp_matrix(w, ow).astype(x.dtype)

    y = x.data @ mw.T                                  # n c d h OW
    y = np.matmul(mh, y)                               # n c d OH OW
    y = np.matmul(md, y.reshape(n, c, d, oh * ow))     # n c OD OH*OW
    out = y.reshape(n, c, od, oh, ow)

    def vjp(g):
        gy = np.matmul(md.T, g.reshape(n, c, od, oh * ow)).reshape(n, c, d, oh, ow)
        gy = np.matmul(mh.T, gy)
        return (gy @ mw,)

    return _result(out, "trilinear_upsample", (x,), vjp)


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------

def tape_of(root: Tensor) -> list[Node]:
    """Nodes reachable from ``root``, in execution order."""
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(i for i in node.inputs if i.requires_grad)
    nodes.sort(key=lambda nd: nd.seq)
    return nodes


def backward(loss: Tensor, visit: Callable[[Node], None] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not require grad; nothing was recorded")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.node is None:
        _accumulate(loss, seed)
        return
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape_of(loss)):
        if visit is not None:
            visit(node)
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.retains_grad:
            node.output.grad = g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp.node is None:
                _accumulate(inp, gi)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def first_nonfinite(named: Iterable[tuple[str, Tensor]]) -> str | None:
    for name, t in named:
        if t is not None and not t.is_finite():
            return name
    return None
