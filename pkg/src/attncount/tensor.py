"""Dense tensors with a reverse-mode tape.

Tensors wrap a numpy array in [batch, channels, height, width] layout.  Every
differentiable op records its parents and a closure mapping the output
gradient to parent gradients; :func:`backward` walks the recorded graph in
reverse topological order.  Leaf tensors created with ``requires_grad=True``
accumulate into ``.grad``; intermediate gradients are discarded.

float32 is the working precision.  float64 tensors flow through every op
unchanged, which is what the finite-difference checks rely on.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen networks, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse sweep from a single-element loss; leaf grads accumulate."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _record(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    a = as_tensor(a)
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(b)
        return _record(a.data * s, (a,), lambda g: (g * s,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape product of two tensors."""
    if not isinstance(b, Tensor):
        raise ShapeError("elementwise_mul expects two tensors")
    return mul(a, b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: N,H,W mismatch {t.shape} vs {xs[0].shape}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)))


def take_channels(x: Tensor, index: Sequence[int]) -> Tensor:
    """Gather channels (axis 1) in the given order; works for [N,C] and [N,C,H,W]."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _record(x.data[:, idx], (x,), bw)


def scale_channels(x: Tensor, m: Tensor) -> Tensor:
    """Multiply every channel of x [N,C,H,W] by the single-channel map m [N,1,H,W]."""
    if m.data.ndim != 4 or m.shape[1] != 1 or (m.shape[0], *m.shape[2:]) != (x.shape[0], *x.shape[2:]):
        raise ShapeError(f"scale_channels: map {m.shape} incompatible with {x.shape}")
    xd, md = x.data, m.data
    return _record(xd * md, (x, m), lambda g: (g * md, (g * xd).sum(axis=1, keepdims=True)))


def weighted_channel_sum(f: Tensor, p: Tensor) -> Tensor:
    """Per-sample fusion sum_k f[:, k] * p[:, k] -> [N,1,H,W]."""
    if p.shape != f.shape[:2]:
        raise ShapeError(f"weighted_channel_sum: weights {p.shape} vs maps {f.shape}")
    fd, pd = f.data, p.data
    out = np.einsum("nkhw,nk->nhw", fd, pd)[:, None]

    def bw(g):
        g2 = g[:, 0]
        return (g2[:, None] * pd[:, :, None, None], np.einsum("nhw,nkhw->nk", g2, fd))

    return _record(out.astype(fd.dtype), (f, p), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix [C*kh*kw, N*oh*ow]; the batch is folded into the columns."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    ye, xe = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            cols[:, i, j] = xt[:, :, y0:y0 + ye:stride, x0:x0 + xe:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(gcols: np.ndarray, padded_shape, kh, kw, stride, dilation, oh, ow) -> np.ndarray:
    n, c = padded_shape[:2]
    gxt = np.zeros((c, n) + tuple(padded_shape[2:]), dtype=gcols.dtype)
    g6 = gcols.reshape(c, kh, kw, n, oh, ow)
    ye, xe = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            gxt[:, :, y0:y0 + ye:stride, x0:x0 + xe:stride] += g6[:, i, j]
    return gxt.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must have odd extents")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    oh = conv_out_size(h, kh, stride, padding, dilation)
    ow = conv_out_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel/dilation")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))
    padded_shape = xp.shape

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(w2.T @ g2, padded_shape, kh, kw, stride, dilation, oh, ow)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route gradient to the first in scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _record(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool needs non-empty spatial dims")
    scale = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))
    return _record(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).astype(g.dtype),))


# ---------------------------------------------------------------------------
# classification


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects [N,K>=2], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _record(s, (logits,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def cross_entropy_2class(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood; label 1 selects column 1."""
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"cross_entropy_2class expects [N,2] logits, got {logits.shape}")
    if lab.shape[0] != logits.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {logits.shape[0]} rows")
    if np.any((lab != 0) & (lab != 1)):
        raise ValueError(f"labels must be 0 or 1, got {sorted(set(lab.tolist()))}")
    ld = logits.data
    n = ld.shape[0]
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - ld[rows, lab]).mean(), dtype=ld.dtype)

    def bw(g):
        p = np.exp(ld - lse[:, None])
        p[rows, lab] -= 1.0
        return (p * (g / n),)

    return _record(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [dst, src]."""
    m = np.zeros((dst, src), dtype=np.float64)
    if dst == 1 or src == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target {out_h}x{out_w} must be positive")
    _, _, h, w = x.shape
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _record(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               indices: Iterable[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a single-element tensor.  ``x`` must be float64 and is
    perturbed in place (and restored).  ``indices`` restricts the comparison
    to a subset of flat positions; all elements are checked by default.
    """
    if x.data.dtype != np.float64:
        raise TypeError("grad_check requires a float64 tensor")
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros(x.data.size) if x.grad is None else x.grad.reshape(-1).copy()
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    x.grad = None
    return worst
