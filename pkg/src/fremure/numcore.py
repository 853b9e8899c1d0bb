"""Dense float64 tensors with reverse-mode autodiff, a deterministic RNG and Adam.

Everything downstream (gates, encoders, classification heads, the training
loop) is assembled from the primitives in this module. Three constraints shape
the design:

* all arithmetic is double precision, so central-difference gradient checks
  are meaningful at h ~ 1e-5;
* gradients live on an explicit tape: ``backward()`` accumulates into ``.grad``
  until the caller resets them, which is what the optimizer step expects;
* every random draw comes from :class:`Rng`, a counter-based generator with a
  fully documented output function, so identical seeds give bit-identical
  streams on any platform.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError

# ---------------------------------------------------------------------------
# gradient mode
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves the tape should differentiate; results of
    operations on such tensors carry backward closures. ``grad`` is ``None``
    until the first ``backward()`` reaches the tensor and accumulates across
    subsequent calls until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar; accumulates into ``.grad`` slots."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss tensor")
        order = []
        seen = set()
        stack = [(self, False)]
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
        flow = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = flow.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            parent_grads = node._backward(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None:
                    continue
                acc = flow.get(id(parent))
                flow[id(parent)] = pgrad if acc is None else acc + pgrad


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def pow_(a, exponent: float) -> Tensor:
    a = _wrap(a)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), backward)


def matmul(a, b, scale: float | None = None) -> Tensor:
    """Matrix product with numpy semantics: 1-D operands act as row/column
    vectors with the extra axis dropped from the result; higher ranks batch.
    When `scale` is given the product is multiplied by that constant."""
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data
    if scale is not None:
        out = out * scale
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1

    def backward(g):
        g2 = np.asarray(g)
        if scale is not None:
            g2 = g2 * scale
        if b_vec:
            g2 = np.expand_dims(g2, -1)
        if a_vec:
            g2 = np.expand_dims(g2, -2)
        a2 = np.expand_dims(a.data, 0) if a_vec else a.data
        b2 = np.expand_dims(b.data, -1) if b_vec else b.data
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
        return ga.reshape(a.data.shape), gb.reshape(b.data.shape)

    return _make(out, (a, b), backward)


def affine(x, w, b, act: str | None = None) -> Tensor:
    """x @ w + b in one node, optionally followed by relu (act="relu").
    Expects x of shape (..., n_in), a 2-D weight and a 1-D bias; the bias
    gradient sums over every leading axis."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    out = x.data @ w.data + b.data
    n_in, n_out = w.data.shape
    if act is not None:
        if act != "relu":
            raise ContractError(f"unsupported affine activation '{act}'")
        mask = out > 0
        out = out * mask

    def backward(g):
        if act is not None:
            g = g * mask
        g2 = np.asarray(g).reshape(-1, n_out)
        x2 = x.data.reshape(-1, n_in)
        return g @ w.data.T, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _wrap(a), _wrap(b)
    out = np.maximum(a.data, b.data)
    mask = a.data >= b.data

    def backward(g):
        return (_unbroadcast(g * mask, a.data.shape),
                _unbroadcast(g * ~mask, b.data.shape))

    return _make(out, (a, b), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    """Logistic function, computed on a sign-split branch so no exp overflows."""
    a = _wrap(a)
    out = _sigmoid_np(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    # clamp saturated values back into the open interval so downstream
    # logs and complements stay finite
    return np.clip(out, _SIG_LO, _SIG_HI)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) without overflow; gradient is the sigmoid."""
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g * _sigmoid_np(a.data),)

    return _make(out, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    out = a.data[index]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(out, (a,), backward)


# operator sugar on Tensor
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__pow__ = lambda self, exponent: pow_(self, exponent)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__getitem__ = lambda self, index: getitem(self, index)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.transpose = lambda self, axes: transpose(self, axes)


# ---------------------------------------------------------------------------
# stable composites
# ---------------------------------------------------------------------------

def _axis_extent(data: np.ndarray, axis: int) -> int:
    if not -data.ndim <= axis < data.ndim:
        raise ContractError(f"axis {axis} out of range for ndim {data.ndim}")
    return data.shape[axis]


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along `axis` with max subtraction.

    The shift is treated as a constant: softmax is shift invariant, so the
    gradient is unchanged and exact. Fused into one tape node with the
    analytic Jacobian-vector product.
    """
    a = _wrap(a)
    if _axis_extent(a.data, axis) < 1:
        raise ContractError("softmax axis must have extent >= 1")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if _axis_extent(a.data, axis) < 1:
        raise ContractError("log_softmax axis must have extent >= 1")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along `axis`, shifted by the max so nothing overflows."""
    a = _wrap(a)
    if _axis_extent(a.data, axis) < 1:
        raise ContractError("log_sum_exp axis must have extent >= 1")
    shift = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - shift)
    total = e.sum(axis=axis, keepdims=True)
    kept = np.log(total) + shift
    out = kept if keepdims else np.squeeze(kept, axis=axis)
    soft = e / total

    def backward(g):
        gk = np.asarray(g) if keepdims else np.expand_dims(np.asarray(g), axis)
        return (gk * soft,)

    return _make(out, (a,), backward)


def layer_norm(a, eps: float = 1e-5, residual=None) -> Tensor:
    """Parameter-free normalization over the last axis: zero mean, unit variance.

    No learnable scale or shift. For output y and incoming gradient g, the
    input gradient is inv_std * (g - mean(g) - y * mean(g * y)), the exact
    Jacobian-vector product of the fused form. When `residual` is given the
    node normalizes a + residual and routes the same gradient to both.
    """
    a = _wrap(a)
    x = a.data if residual is None else a.data + residual.data
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("layer_norm needs a last axis of extent >= 1")
    n = x.shape[-1]
    centered = x - x.sum(axis=-1, keepdims=True) / n
    # second centering pass removes the rounding residue left by the first
    # when the row magnitude dwarfs its spread; analytically a no-op, so the
    # gradient formula below is unaffected
    centered -= centered.sum(axis=-1, keepdims=True) / n
    var = (centered * centered).sum(axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g):
        gm = g.sum(axis=-1, keepdims=True) / n
        gy = (g * out).sum(axis=-1, keepdims=True) / n
        gin = inv * (g - gm - out * gy)
        return (gin,) if residual is None else (gin, gin)

    parents = (a,) if residual is None else (a, residual)
    return _make(out, parents, backward)


def split_heads(t, h: int) -> Tensor:
    """(..., n, h*dh) -> (..., h, n, dh): reshape plus axis swap in one node."""
    t = _wrap(t)
    if t.data.ndim < 2 or t.data.shape[-1] % h != 0:
        raise ContractError("split_heads needs (..., n, d) with h dividing d")
    shape = t.data.shape
    dh = shape[-1] // h
    out = np.swapaxes(t.data.reshape(shape[:-1] + (h, dh)), -3, -2)

    def backward(g):
        return (np.swapaxes(g, -3, -2).reshape(shape),)

    return _make(out, (t,), backward)


def merge_heads(t) -> Tensor:
    """(..., h, n, dh) -> (..., n, h*dh): inverse of split_heads."""
    t = _wrap(t)
    if t.data.ndim < 3:
        raise ContractError("merge_heads needs (..., h, n, dh)")
    h, n, dh = t.data.shape[-3:]
    out_shape = t.data.shape[:-3] + (n, h * dh)
    out = np.swapaxes(t.data, -3, -2).reshape(out_shape)

    def backward(g):
        return (np.swapaxes(g.reshape(g.shape[:-1] + (h, dh)), -3, -2),)

    return _make(out, (t,), backward)


def attention(q, k, v, scale: float) -> Tensor:
    """softmax(q @ k^T * scale, last axis) @ v as one node.

    q, k, v: (..., n, dh) with identical shapes; rows attend within the last
    two axes only, leading axes are independent. The softmax shift is exact
    (shift invariance), and the backward pass reuses the stored attention
    matrix, so gradients are analytic rather than composed from pieces.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if not (q.data.shape == k.data.shape == v.data.shape) or q.data.ndim < 2:
        raise ContractError("attention expects three equally shaped (..., n, dh) tensors")
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    att = e / e.sum(axis=-1, keepdims=True)
    out = att @ v.data

    def backward(g):
        gv = np.swapaxes(att, -1, -2) @ g
        gatt = g @ np.swapaxes(v.data, -1, -2)
        gs = (gatt - (gatt * att).sum(axis=-1, keepdims=True)) * att * scale
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# modules and parameters
# ---------------------------------------------------------------------------

class Module:
    """Base class for parameterized components.

    ``parameters()`` walks instance attributes (tensors with requires_grad,
    nested modules, and lists/dicts of modules) and returns a flat
    ``{path: Tensor}`` dict in attribute insertion order, which is what the
    optimizer and the checkpoint format key on.
    """

    def parameters(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            self._collect(name, value, out)
        return out

    def _collect(self, prefix, value, out):
        if isinstance(value, Tensor):
            if value.requires_grad:
                out[prefix] = value
        elif isinstance(value, Module):
            for sub, p in value.parameters().items():
                out[f"{prefix}.{sub}"] = p
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                self._collect(f"{prefix}.{i}", item, out)
        elif isinstance(value, dict):
            for key, item in value.items():
                self._collect(f"{prefix}.{key}", item, out)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


class Linear(Module):
    """Affine map x @ w + b with uniform Glorot-style init; bias optional."""

    def __init__(self, n_in: int, n_out: int, rng: "Rng", scale: float | None = None,
                 bias: bool = True):
        if scale is None:
            scale = math.sqrt(6.0 / (n_in + n_out))
        self.w = Tensor(rng.uniform_range(-scale, scale, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        if self.b is None:
            return matmul(x, self.w)
        return affine(x, self.w, self.b)


# ---------------------------------------------------------------------------
# deterministic random generator
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z) -> np.ndarray:
    """SplitMix64 output function on uint64 arrays (wraps mod 2^64)."""
    z = np.atleast_1d(np.asarray(z, dtype=np.uint64)).copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based deterministic generator (SplitMix64).

    Output function, fixed for reproducibility across implementations:

    * raw stream:      ``out_i = mix64(seed + i * GOLDEN)`` for i = 1, 2, ...
      where mix64 is the SplitMix64 finalizer and GOLDEN = 0x9E3779B97F4A7C15;
    * uniforms:        ``u = ((raw >> 11) + 1) * 2**-53`` in (0, 1];
    * standard normal: Box-Muller on consecutive uniform pairs (u1, u2),
      ``r = sqrt(-2 ln u1)``, emitting ``r*cos(2 pi u2)`` then
      ``r*sin(2 pi u2)``; a trailing odd draw discards the sine term;
    * integers:        ``raw mod bound`` (modulo bias is negligible for the
      small bounds used here);
    * spawn(key):      child seed = ``mix64(seed + (key + 1) * GOLDEN)``,
      giving independent streams per (seed, key).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = self.seed

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._counter) + idx * np.uint64(_GOLDEN)
        self._counter = (self._counter + n * _GOLDEN) & _MASK64
        return _mix64(z)

    def uniforms(self, n: int) -> np.ndarray:
        return ((self.raw(n) >> np.uint64(11)) + np.uint64(1)) * 2.0 ** -53

    def uniform_range(self, lo: float, hi: float, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return (lo + (hi - lo) * self.uniforms(n)).reshape(shape)

    def normals(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(2.0 * np.pi * u2)
        out[1::2] = radius * np.sin(2.0 * np.pi * u2)
        return out[:n].reshape(shape)

    def integers(self, bound: int, n: int = 1) -> np.ndarray:
        if bound <= 0:
            raise ContractError("integer bound must be positive")
        return (self.raw(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by the raw stream.
        order = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.raw(1)[0] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def categorical(self, pmf: np.ndarray, n: int = 1) -> np.ndarray:
        """Inverse-CDF sampling from a probability vector."""
        cdf = np.cumsum(np.asarray(pmf, dtype=np.float64))
        idx = np.searchsorted(cdf, self.uniforms(n), side="left")
        return np.minimum(idx, len(cdf) - 1).astype(np.int64)

    def spawn(self, key: int) -> "Rng":
        child = int(_mix64((self.seed + (key + 1) * _GOLDEN) & _MASK64)[0])
        return Rng(child)


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Update per step t: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2,
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
    Parameters with no gradient are treated as g = 0.
    """

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape "
                                    f"{p.data.shape} for '{key}'")
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for key, p in self.params.items():
            m = np.asarray(state["m"][key], dtype=np.float64)
            v = np.asarray(state["v"][key], dtype=np.float64)
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ContractError(f"optimizer state shape mismatch for '{key}'")
            self.m[key] = m
            self.v[key] = v


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare the tape gradient of a scalar function against central differences.

    Returns max over coordinates of |autodiff - central| / (|central| + 1e-8).
    `f` must map a Tensor to a scalar Tensor and be deterministic.
    """
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError("finite_diff_check expects a scalar-valued function")
    out.backward()
    grad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat = grad.ravel()
    worst = 0.0
    base = np.array(x.data, copy=True)
    with no_grad():
        for i in range(base.size):
            bumped = base.copy()
            bumped.flat[i] += h
            hi = f(Tensor(bumped)).item()
            bumped.flat[i] -= 2 * h
            lo = f(Tensor(bumped)).item()
            central = (hi - lo) / (2.0 * h)
            err = abs(flat[i] - central) / (abs(central) + 1e-8)
            worst = max(worst, err)
    return worst
