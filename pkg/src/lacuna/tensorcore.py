"""Minimal dense arrays with a reverse-mode differentiation tape.

Every operation on :class:`Tensor` objects returns a new tensor that keeps a
reference to its inputs together with a closure mapping the output cotangent
to input cotangents.  :func:`backward` walks the resulting DAG once in reverse
topological order.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
scalar operand.  The few shape-changing patterns the denoiser needs (bias over
channels, per-sample modulation) are separate ops.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("mul", elementwise("sub", self, other), -1.0)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def parameter(data) -> Tensor:
    """Leaf tensor that gradients are computed for."""
    return Tensor(np.array(data, copy=True), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise


def elementwise(op_tag: str, a, b) -> Tensor:
    """Binary elementwise op with equal-shape or scalar broadcasting.

    ``b`` may be a Tensor, an ndarray of the same shape (treated as a
    constant), or a scalar.
    """
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        # constants follow the tensor's precision so float32 graphs stay float32
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.ndim and b.ndim and a.shape != b.shape:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def unbroadcast(g, target):
        return np.asarray(g.sum(), dtype=target.dtype) if target.ndim == 0 and g.ndim else g

    ub = unbroadcast

    if op_tag == "add":
        out = x + y

        def back(g):
            return ub(g, x), ub(g, y)
    elif op_tag == "sub":
        out = x - y

        def back(g):
            return ub(g, x), ub(-g, y)
    elif op_tag == "mul":
        out = x * y

        def back(g):
            return ub(g * y, x), ub(g * x, y)
    elif op_tag == "div":
        out = x / y

        def back(g):
            return ub(g / y, x), ub(-g * x / (y * y), y)
    else:
        raise ConfigError(f"unknown elementwise op {op_tag!r}")
    return _node(out, (a, b), back, op_tag)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def square(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return _node(d * d, (x,), lambda g: (2.0 * g * d,), "square")


def gelu(x) -> Tensor:
    """Tanh-form GELU; smooth everywhere, which keeps finite-difference checks clean."""
    x = as_tensor(x)
    d = x.data
    inner = _SQRT_2_OVER_PI * (d + 0.044715 * d**3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * dinner),)

    return _node(out, (x,), back, "gelu")


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return elementwise("mul", sum(x), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _node(out, ts, back, "concat")


# ---------------------------------------------------------------------------
# layers


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for x of shape (B, n_in), weight (n_in, n_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def back(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, back, "linear")


def modulate(x, scale, shift) -> Tensor:
    """Per-sample channel affine ``x * (1 + scale) + shift``.

    x is (B, C, H, W); scale and shift are (B, C).
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 4 or scale.shape != x.shape[:2] or shift.shape != x.shape[:2]:
        raise ShapeError(f"modulate: x {x.shape}, scale {scale.shape}, shift {shift.shape}")
    s = scale.data[:, :, None, None]
    out = x.data * (1.0 + s) + shift.data[:, :, None, None]

    def back(g):
        return g * (1.0 + s), (g * x.data).sum(axis=(2, 3)), g.sum(axis=(2, 3))

    return _node(out, (x, scale, shift), back, "modulate")


def _check_kernel(kernel_shape):
    if len(kernel_shape) != 4:
        raise ShapeError(f"kernel must be (C_out, C_in, kh, kw), got {kernel_shape}")
    kh, kw = kernel_shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {kh}x{kw}")
    return kh, kw


def conv2d(x, kernel, bias=None, padding="periodic") -> Tensor:
    """Same-size 2-D convolution (cross-correlation).

    ``x`` is (C_in, H, W) or batched (B, C_in, H, W).  ``padding`` is
    ``"periodic"`` (wrap-around, the default for periodic PDE domains) or
    ``"zero"``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    kh, kw = _check_kernel(kernel.shape)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    B, C_in, H, W = xd.shape
    C_out = kernel.shape[0]
    if kernel.shape[1] != C_in:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, input has {C_in}")
    if H < kh or W < kw:
        raise ConfigError(f"spatial size {H}x{W} smaller than kernel {kh}x{kw}")
    if padding not in ("periodic", "zero"):
        raise ConfigError(f"unknown padding {padding!r}")
    ph, pw = kh // 2, kw // 2
    mode = "wrap" if padding == "periodic" else "constant"
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=mode)
    # im2col: (B, H, W, C_in, kh, kw) -> (B*H*W, C_in*kh*kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = np.ascontiguousarray(cols).reshape(B * H * W, C_in * kh * kw)
    kmat = kernel.data.reshape(C_out, -1)
    out = cols @ kmat.T
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (C_out,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({C_out},)")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(B, H, W, C_out).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]

    def back(g):
        g4 = g[None] if unbatched else g
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(B * H * W, C_out)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ kmat).reshape(B, H, W, C_in, kh, kw)
        dxp = np.zeros(xp.shape, dtype=np.result_type(g2, kmat))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + H, j:j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
        if padding == "periodic":
            dx = dxp[:, :, ph:ph + H, :].copy()
            if ph:
                dx[:, :, H - ph:, :] += dxp[:, :, :ph, :]
                dx[:, :, :ph, :] += dxp[:, :, ph + H:, :]
            out_x = dx[:, :, :, pw:pw + W].copy()
            if pw:
                out_x[:, :, :, W - pw:] += dx[:, :, :, :pw]
                out_x[:, :, :, :pw] += dx[:, :, :, pw + W:]
        else:
            out_x = dxp[:, :, ph:ph + H, pw:pw + W]
        grads = [out_x[0] if unbatched else out_x, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class DiffGraph:
    """Topologically ordered view of the computation that produced ``root``."""

    root: Tensor
    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "DiffGraph":
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
        return cls(root, order)

    @property
    def leaves(self):
        return [n for n in self.nodes if not n._parents]


def backward(loss: Tensor, wrt) -> list:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    ``wrt`` may contain parameter leaves or intermediate tensors.  Tensors the
    loss does not depend on get zero gradients.  Nothing is stored on the
    tensors themselves.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.ndim != 0:
        raise ContractError("backward requires a scalar (0-d) loss tensor")
    wrt = list(wrt)
    if not loss.requires_grad:
        return [np.zeros_like(w.data) for w in wrt]
    graph = DiffGraph.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    wanted = {id(w) for w in wrt}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        if id(node) not in wanted:
            del grads[id(node)]
    return [np.asarray(grads.get(id(w), np.zeros_like(w.data))) for w in wrt]


# ---------------------------------------------------------------------------
# spectral helpers


def _check_pow2(shape):
    for n in shape[-2:]:
        if n < 1 or n & (n - 1):
            raise ConfigError(f"FFT size must be a power of two, got {shape[-2:]}")


def fft2(x: np.ndarray) -> np.ndarray:
    """2-D FFT over the last two axes (unnormalized forward transform)."""
    x = np.asarray(x)
    _check_pow2(x.shape)
    return np.fft.fft2(x)


def ifft2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    _check_pow2(x.shape)
    return np.fft.ifft2(x)
