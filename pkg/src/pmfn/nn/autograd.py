"""Reverse-mode autodiff over numpy arrays, specialised to (C, H, W) images.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order. Ops never modify their inputs and
fail loudly on NaN/Inf.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NonFiniteError, ValidationError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValidationError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _result(data, op, parents, backward):
    return Tensor(_check_finite(data, op), _parents=tuple(parents), _backward=backward)


def _require_chw(t, op):
    if t.data.ndim != 3:
        raise ValidationError(f"{op} expects a (C, H, W) tensor, got shape {t.shape}")


def conv2d(x, kernel, bias=None, padding=None):
    """Cross-correlation of a (C, H, W) input with an (O, C, kh, kw) kernel.

    ``padding`` defaults to ``kh // 2`` (zero padding, size preserving for odd
    kernels).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _require_chw(x, "conv2d")
    if kernel.data.ndim != 4:
        raise ValidationError(f"conv2d kernel must be (O, C, kh, kw), got {kernel.shape}")
    c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValidationError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValidationError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    p = kh // 2 if padding is None else int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ValidationError(f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[1:]}")
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, ho, wo, kh, kw)
    cols = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    wmat = kernel.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(o, ho, wo)

    def backward(g):
        g2 = g.reshape(o, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo] += gcols[:, i, j]
            gx = gxp[:, p:p + h, p:p + w] if p else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, "conv2d", parents, backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,),
                   lambda g: (g * mask,))


def _check_even(x, op):
    _require_chw(x, op)
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValidationError(f"{op} needs even spatial dims, got {x.shape[1:]}")


def maxpool2(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first pixel in scan order."""
    x = as_tensor(x)
    _check_even(x, "maxpool2")
    c, h, w = x.shape
    blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        return (gb.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return _result(out, "maxpool2", (x,), backward)


def avgpool2(x):
    x = as_tensor(x)
    _check_even(x, "avgpool2")
    c, h, w = x.shape
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _result(out, "avgpool2", (x,), backward)


def upsample_nearest(x):
    """2x nearest-neighbour upsampling; the backward pass sums each 2x2 group."""
    x = as_tensor(x)
    _require_chw(x, "upsample_nearest")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _result(out, "upsample_nearest", (x,), backward)


def concat_channels(*xs):
    xs = [as_tensor(x) for x in xs]
    for x in xs:
        _require_chw(x, "concat_channels")
    if len({x.shape[1:] for x in xs}) != 1:
        raise ValidationError(
            f"concat_channels spatial mismatch: {[x.shape[1:] for x in xs]}")
    sizes = np.cumsum([x.shape[0] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=0)
    return _result(out, "concat_channels", xs, lambda g: tuple(np.split(g, sizes, axis=0)))


def instance_norm(x, eps=1e-5):
    """Per-channel standardisation over the spatial dims (no affine part)."""
    x = as_tensor(x)
    _require_chw(x, "instance_norm")
    n = x.shape[1] * x.shape[2]
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(1, 2), keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gxm = (g * xhat).sum(axis=(1, 2), keepdims=True) / n
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, "instance_norm", (x,), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValidationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(x, k):
    x = as_tensor(x)
    return _result(x.data * k, "scale", (x,), lambda g: (g * k,))


def sum_all(x):
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), "sum", (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def dot(x, weights):
    """``sum(x * weights)`` for a constant array ``weights``; handy for projections."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ValidationError(f"dot shape mismatch: {x.shape} vs {w.shape}")
    return _result(np.asarray((x.data * w).sum()), "dot", (x,), lambda g: (g * w,))
