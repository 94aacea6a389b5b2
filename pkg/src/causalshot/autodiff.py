"""Small reverse-mode autodiff engine over float64 numpy buffers.

Every op returns a new :class:`Tensor` holding references to its inputs and a
closure that maps the output gradient onto input gradients. Calling
:meth:`Tensor.backward` replays the recorded graph in reverse topological
order. Arrays are always ``float64``; any non-finite forward value raises
:class:`NonFiniteError`.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        _check_finite(self.data, op)

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node.op}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_reduce(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None, op=op)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def _power(a: np.ndarray, p: float) -> np.ndarray:
    if p == 1:
        return a.copy()
    if p == 2:
        return a * a
    return np.power(a, p)


def pow_scalar(x, p: float) -> Tensor:
    """Elementwise ``x ** p`` for a constant exponent."""
    x = as_tensor(x)
    p = float(p)
    if not p.is_integer() and np.any(x.data < 0):
        raise ValueError("pow_scalar: negative base with non-integer exponent")
    if p < 0 and np.any(x.data == 0):
        raise NonFiniteError("pow_scalar: zero base with negative exponent")
    out = _power(x.data, p)

    def backward(g):
        if p == 0:
            return (np.zeros_like(x.data),)
        return (g * p * _power(x.data, p - 1),)

    return _result(out, (x,), backward, f"pow({p:g})")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result(out, (x,), backward, "log")


def sqrt(x) -> Tensor:
    """Square root whose gradient is defined as 0 at exactly 0."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (x,), backward, "sqrt")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def clip(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = out == x.data

    def backward(g):
        return (g * inside,)

    return _result(out, (x,), backward, "clip")


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# -- shape -------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(out, (x,), backward, "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def concat_channels(a, b) -> Tensor:
    """Join two ``[B, C, H, W]`` tensors along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def max_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal element in
    row-major order of the reduced axes."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    kept = tuple(a for a in range(x.ndim) if a not in axes)
    moved = np.transpose(x.data, kept + axes)
    flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape(tuple(1 if a in axes else x.shape[a] for a in range(x.ndim)))

    def backward(g):
        g = g.reshape(idx.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(kept + axes)),)

    return _result(out, (x,), backward, "max")


def logsumexp(x, axis=-1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    total = sum_(exp(sub(x, shift)), axis, keepdims=True)
    out = add(log(total), shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


# -- linear algebra / nn -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape ``[out, in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``weight[O,C,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError("conv2d: kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [B, C, Ho, Wo, kh, kw] -> [B, Ho*Wo, C*kh*kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = np.matmul(cols, wmat.T)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.transpose(0, 2, 1).reshape(B, O, Ho, Wo)

    def backward(g):
        gmat = g.reshape(B, O, Ho * Wo)
        gw = np.einsum("bop,bpk->ok", gmat, cols, optimize=True).reshape(weight.shape)
        gcols = np.matmul(wmat.T, gmat).reshape(B, C, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gcols[:, :, i, j]
        grads = [gxp[:, :, padding:padding + H, padding:padding + W], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling (first-index tie break)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"maxpool2d: spatial size {H}x{W} not divisible by {size}")
    blocks = x.data.reshape(B, C, H // size, size, W // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H // size, W // size, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(B, C, H // size, W // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(B, C, H, W),)

    return _result(out, (x,), backward, "maxpool2d")


def pairwise_distances(rows, rel_tol: float = 1e-12) -> Tensor:
    """Euclidean distances between the rows of ``[..., c, d]``.

    Squared distances below ``rel_tol`` times the squared norms are snapped
    to exactly zero; the gradient at a zero distance is taken as zero.
    """
    x = as_tensor(rows)
    if x.ndim < 2:
        raise ShapeError(f"pairwise_distances needs [..., c, d], got {x.shape}")
    gram = np.matmul(x.data, np.swapaxes(x.data, -1, -2))
    sq = np.diagonal(gram, axis1=-2, axis2=-1)
    scale = sq[..., :, None] + sq[..., None, :]
    d2 = scale - 2.0 * gram
    d2[d2 <= rel_tol * scale] = 0.0
    dist = np.sqrt(d2)

    def backward(g):
        w = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)
        w = w + np.swapaxes(w, -1, -2)
        return (w.sum(axis=-1)[..., None] * x.data - np.matmul(w, x.data),)

    return _result(dist, (x,), backward, "pairwise_distances")


# -- verification ------------------------------------------------------------

def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` at
    ``x`` and a central finite difference.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``eps`` is rounded to the nearest power of two so that steps on dyadic
    inputs are exact.
    Raises :class:`NonFiniteError` if ``f`` produces a non-finite value.
    """
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    step = 2.0 ** np.round(np.log2(eps))
    for i in range(flat.size):
        orig = flat[i]
        h = (orig + step) - orig  # exactly representable at x
        flat[i] = orig + h
        up = f(Tensor(x0)).item()
        flat[i] = orig - h
        down = f(Tensor(x0)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# -- debug dump --------------------------------------------------------------

def dump(t, path) -> None:
    """Write ``path`` (raw little-endian float64) and ``path.json`` (shape)."""
    path = Path(path)
    data = as_tensor(t).data
    path.write_bytes(data.astype("<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"shape": list(data.shape), "dtype": "<f8"}))


def load(path) -> Tensor:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["shape"])
    return Tensor(data.copy())
