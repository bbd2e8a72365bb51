"""Dense float64 tensors with reverse-mode differentiation.

The engine is a recorded tape: every differentiable operation returns a new
``Tensor`` holding the forward value plus a closure that maps the output
gradient to input gradients.  ``Tensor.backward`` walks the tape in reverse
topological order, accumulates gradients additively into leaf tensors that
have ``requires_grad`` set, and frees the tape afterwards.

Conventions:

- data is always float64, C-contiguous, row-major.  Activations are
  ``(N, C, H, W)``; convolution kernels are ``(out_ch, in_ch, kH, kW)``.
- convolution is cross-correlation (no kernel flip).
- backward closures return freshly allocated arrays, never views into
  shared buffers, so accumulation can mutate them in place.
- tensors are treated as immutable once produced by an operation; only
  optimizer steps write ``.data`` of parameters, between tapes.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

TENSOR_MAGIC = b"ADOD"
TENSOR_FORMAT_VERSION = 1

# Default convolution path.  "im2col" is the fast matmul formulation;
# "naive" is the direct-loop reference the im2col path is pinned against.
_conv_method = "im2col"


def set_conv_method(method: str) -> str:
    """Select the global conv2d path ("im2col" or "naive"); returns the old one."""
    global _conv_method
    if method not in ("im2col", "naive"):
        raise ValueError(f"unknown conv method {method!r}")
    old = _conv_method
    _conv_method = method
    return old


def _as_array(data) -> np.ndarray:
    # asarray rather than ascontiguousarray: the latter promotes 0-d to (1,)
    return np.asarray(data, dtype=np.float64, order="C")


class Tensor:
    """A dense float64 array plus optional gradient and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    @staticmethod
    def _record(data: np.ndarray, prev: tuple["Tensor", ...], backward) -> "Tensor":
        """Create an op output, recording the tape edge iff a parent needs grad."""
        out = Tensor.__new__(Tensor)
        # 0-d arithmetic hands back numpy scalars; keep .data an ndarray
        out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in prev)
        if out.requires_grad:
            out._prev = prev
            out._backward = backward
        else:
            out._prev = ()
            out._backward = None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd -------------------------------------------------------------

    def backward(self, grad=None, free_graph: bool = True) -> None:
        """Accumulate gradients of this (scalar) tensor into leaf ``.grad`` buffers.

        Gradients add onto whatever is already in ``.grad``; call
        ``zero_grad`` between steps.  The tape is released afterwards unless
        ``free_graph`` is False.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)

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
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for child, child_grad in zip(node._prev, node._backward(g)):
                    if child_grad is None or not child.requires_grad:
                        continue
                    acc = grads.get(id(child))
                    if acc is None:
                        grads[id(child)] = child_grad
                    else:
                        acc += child_grad
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g

        if free_graph:
            for node in topo:
                node._prev = ()
                node._backward = None

    # -- operator sugar -------------------------------------------------------

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

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


class Parameter(Tensor):
    """A leaf tensor that is part of a network, addressed by a dotted name."""

    __slots__ = ("name",)

    def __init__(self, data, requires_grad: bool = True, name: str = ""):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    # asarray, not ascontiguousarray: the latter promotes 0-d to (1,)
    return np.asarray(g.reshape(shape), order="C")


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._record(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._record(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._record(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor._record(data, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = axis
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is None:
            return (np.full_like(x.data, float(g)) if g.ndim == 0 else np.broadcast_to(g, x.data.shape).copy(),)
        gg = g
        if not keepdims:
            expand = axes if isinstance(axes, tuple) else (axes,)
            for ax in sorted(a % x.data.ndim for a in expand):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return Tensor._record(np.asarray(data), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = np.asarray(x.data.reshape(shape), order="C")

    def backward(g):
        return (np.asarray(g.reshape(x.data.shape), order="C"),)

    return Tensor._record(data, (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis``."""
    if start < 0 or length < 1 or start + length > x.data.shape[axis]:
        raise ValueError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    sel = [slice(None)] * x.data.ndim
    sel[axis] = slice(start, start + length)
    sel = tuple(sel)
    data = np.ascontiguousarray(x.data[sel])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sel] = g
        return (gx,)

    return Tensor._record(data, (x,), backward)


# -- elementwise maps ---------------------------------------------------------


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: nonfinite input")


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0),)

    return Tensor._record(data, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0,1), got {slope}")
    _check_finite("leaky_relu", x.data)
    data = np.where(x.data > 0, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(x.data > 0, 1.0, slope),)

    return Tensor._record(data, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x.data)
    data = _sigmoid(x.data)

    def backward(g):
        return (g * data * (1.0 - data),)

    return Tensor._record(data, (x,), backward)


def apply_activation(x: Tensor, kind: str, slope: float = 0.1) -> Tensor:
    """Dispatch on activation name: "relu", "leaky_relu" or "sigmoid"."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope=slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return Tensor._record(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return Tensor._record(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / data),)

    return Tensor._record(data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow; gradient is sigmoid(x)."""
    data = np.logaddexp(0.0, x.data)

    def backward(g):
        return (g * _sigmoid(x.data),)

    return Tensor._record(data, (x,), backward)


# -- neural-net kernels -------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    dxp = np.zeros(xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    method: str | None = None,
) -> Tensor:
    """2-D cross-correlation of NCHW input with (Cout, Cin, kH, kW) kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d: need 4-d input and kernel, got input {x.shape} and kernel {weight.shape}"
        )
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if cin != kcin:
        raise ValueError(
            f"conv2d: input channels {cin} (input {x.shape}) do not match kernel channels {kcin} (kernel {weight.shape})"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match out channels {cout}")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: nonpositive output extent {ho}x{wo} for input {x.shape}, kernel {weight.shape}, "
            f"stride {stride}, padding {padding}"
        )
    if method is None:
        method = _conv_method
    if method == "im2col":
        return _conv2d_im2col(x, weight, bias, stride, padding, ho, wo)
    if method == "naive":
        return _conv2d_naive(x, weight, bias, stride, padding, ho, wo)
    raise ValueError(f"unknown conv method {method!r}")


def _conv2d_im2col(x, weight, bias, stride, padding, ho, wo):
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols6 = _im2col(xp, kh, kw, stride, ho, wo)
    cols = np.ascontiguousarray(cols6.reshape(n, cin * kh * kw, ho * wo))
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = np.ascontiguousarray(out.reshape(n, cout, ho, wo))
    prev = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(wmat.T, g2).reshape(n, cin, kh, kw, ho, wo)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
        if padding:
            dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
        else:
            dx = dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Tensor._record(out, prev, backward)


def _conv2d_naive(x, weight, bias, stride, padding, ho, wo):
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for nn in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[nn, ci, oy * stride + ky, ox * stride + kx] * weight.data[co, ci, ky, kx]
                    out[nn, co, oy, ox] = acc
    if bias is not None:
        out += bias.data[None, :, None, None]
    prev = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        for nn in range(n):
            for co in range(cout):
                for oy in range(ho):
                    for ox in range(wo):
                        go = g[nn, co, oy, ox]
                        for ci in range(cin):
                            for ky in range(kh):
                                for kx in range(kw):
                                    dxp[nn, ci, oy * stride + ky, ox * stride + kx] += go * weight.data[co, ci, ky, kx]
                                    dw[co, ci, ky, kx] += go * xp[nn, ci, oy * stride + ky, ox * stride + kx]
        dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w]) if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Tensor._record(out, prev, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise affine map: (N, F) x (O, F)^T + (O,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input {x.shape} incompatible with weight {weight.shape} (features must match)"
        )
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} does not match out features {weight.shape[0]}")
        data = data + bias.data
    prev = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return Tensor._record(np.ascontiguousarray(data), prev, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane: (N, C, H, W) -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: need 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    return Tensor._record(data, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block; backward sums the block."""
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2x: need 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    data = np.ascontiguousarray(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def backward(g):
        return (np.ascontiguousarray(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))),)

    return Tensor._record(data, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch and spatial extents must match."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels: need 4-d inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    data = np.ascontiguousarray(np.concatenate([a.data, b.data], axis=1))

    def backward(g):
        return (
            np.ascontiguousarray(g[:, :ca]),
            np.ascontiguousarray(g[:, ca:]),
        )

    return Tensor._record(data, (a, b), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W), with affine gamma/beta.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place by exponential moving average; eval mode
    normalizes by the running buffers and leaves them untouched.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: need 4-d input, got {x.shape}")
    if eps <= 0:
        raise ValueError(f"batchnorm2d: eps must be positive, got {eps}")
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"batchnorm2d: momentum must be in (0,1), got {momentum}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match channels {c}")

    g4 = reshape(gamma, 1, c, 1, 1)
    b4 = reshape(beta, 1, c, 1, 1)
    if mode == "train":
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        xhat = div(xc, sqrt(add(var, eps)))
        count = n * h * w
        batch_mean = mu.data.reshape(c)
        batch_var = var.data.reshape(c)
        if count > 1:
            batch_var = batch_var * (count / (count - 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var
    else:
        rm = Tensor(running_mean.reshape(1, c, 1, 1))
        rstd = Tensor(1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps))
        xhat = mul(sub(x, rm), rstd)
    return add(mul(g4, xhat), b4)


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward scales the incoming gradient by -lam."""
    if lam < 0:
        raise ValueError(f"gradient_reversal: lambda must be >= 0, got {lam}")

    def backward(g):
        return ((-lam) * g,)

    return Tensor._record(x.data, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: need (N, D) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, d = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= d:
        raise ValueError(f"softmax_cross_entropy: label out of range for {d} classes")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = (m + np.log(sez)).reshape(n)
    loss = float((lse - z[np.arange(n), labels]).mean())

    def backward(g):
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return Tensor._record(np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy from logits: softplus(z) - z*y."""
    t = targets if isinstance(targets, Tensor) else Tensor(targets)
    return sub(softplus(logits), mul(logits, t))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- flat binary serialization ------------------------------------------------


def write_tensor(fh, arr: np.ndarray) -> None:
    """Write one array in the flat format: magic, version, rank, extents, floats."""
    arr = _as_array(arr)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", TENSOR_FORMAT_VERSION))
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    """Read one array written by :func:`write_tensor`."""
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != TENSOR_FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank))
    count = 1
    for extent in shape:
        count *= extent
    raw = _read_exact(fh, count * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError(f"truncated tensor file: wanted {n} bytes, got {len(raw)}")
    return raw


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
