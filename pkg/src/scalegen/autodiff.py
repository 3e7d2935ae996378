"""NumPy-backed dense arrays with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major ndarray (float32 for training, float64 for
gradient checking) and records the operation that produced it.  Calling
``backward`` on a scalar walks the recorded graph in reverse and accumulates
exact vector-Jacobian products into every reachable tensor that was created
with ``requires_grad=True``.

Broadcasting is deliberately restricted: ``add`` aligns a suffix of the left
operand's shape (bias vectors, position tables), ``mul`` accepts a python
scalar, and everything else demands exact shape agreement.  Keeping the
surface this small makes every vjp auditable against finite differences.

Tensors are treated as immutable after construction; no op writes into an
operand's buffer, so frozen-weight forward passes are safe to run from
concurrent threads.  Gradient accumulation mutates ``.grad`` and is meant to
stay on a single thread per graph.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data plumbing)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def detach(self):
        """A view of the same values with no recorded history."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, leaves=None):
        return backward(self, leaves)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents):
    """Create a non-leaf tensor, recording parents only when grad is live."""
    out = Tensor(data)
    if _GRAD_ENABLED:
        kept = tuple((p, fn) for p, fn in parents if p.requires_grad or p._parents)
        if kept:
            out._parents = kept
            out.requires_grad = True
    return out


def backward(loss, leaves=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every tensor on the path.  When a
    list of leaf parameters is given, any listed trainable leaf that the loss
    does not reach gets an explicit zero gradient of matching shape, so the
    caller can rely on ``p.grad`` existing for the whole set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg
    if leaves is not None:
        for p in leaves:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {tuple(np.shape(a))} and {tuple(np.shape(b))}")


def _suffix_reduce(g, shape):
    """Sum leading axes of ``g`` down to ``shape`` (suffix-aligned add)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b):
    """Elementwise sum; ``b`` may also be a scalar or a suffix of ``a``'s shape."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    sa, sb = a.data.shape, b.data.shape
    if not (sa == sb or sb == () or sb == sa[len(sa) - len(sb):]):
        raise _shape_error("add", a.data, b.data)
    out = a.data + b.data
    return _make(out, [
        (a, lambda g: g),
        (b, lambda g: _suffix_reduce(g, sb).reshape(sb)),
    ])


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.shape != b.data.shape:
        raise _shape_error("sub", a.data, b.data)
    return _make(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b):
    """Elementwise product with an equal-shape tensor or a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating)):
        c = float(b)
        return _make(a.data * c, [(a, lambda g: g * c)])
    b = _as_tensor(b, like=a)
    if a.data.shape != b.data.shape and b.data.shape != ():
        raise _shape_error("mul", a.data, b.data)
    return _make(a.data * b.data, [
        (a, lambda g: g * b.data),
        (b, lambda g: (g * a.data) if b.data.shape else np.sum(g * a.data)),
    ])


def add_const(a, c):
    """Add a fixed ndarray (attention masks etc.); ``c`` is never differentiated."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=a.dtype)
    return _make(a.data + c, [(a, lambda g: g)])


def matmul(a, b):
    """Matrix product ``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)``."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise _shape_error("matmul", a.data, b.data)
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise _shape_error("matmul", a.data, b.data)
    out = a.data @ b.data

    def grad_a(g):
        return g @ np.swapaxes(b.data, -1, -2)

    def grad_b(g):
        if len(sb) == 2:
            am = a.data.reshape(-1, sa[-1])
            gm = g.reshape(-1, g.shape[-1])
            return am.T @ gm
        return np.swapaxes(a.data, -1, -2) @ g

    return _make(out, [(a, grad_a), (b, grad_b)])


def reshape(a, shape):
    a = _as_tensor(a)
    src = a.data.shape
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(src))])


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def tsum(a):
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), [(a, lambda g: np.broadcast_to(g, a.data.shape).astype(a.dtype))])


def mean(a):
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean(), dtype=a.dtype),
                 [(a, lambda g: np.broadcast_to(g / n, a.data.shape).astype(a.dtype))])


def stop_gradient(a):
    """Identity in the forward pass, zero Jacobian in the backward pass."""
    a = _as_tensor(a)
    return Tensor(a.data)


def gelu(a):
    """Gaussian error linear unit (tanh approximation)."""
    a = _as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    u = c * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = c * (1.0 + 3 * 0.044715 * x ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)

    return _make(out, [(a, vjp)])


def softmax(a, axis=-1):
    """Softmax along ``axis``; rows sum to one, stable under constant shifts."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _make(y, [(a, vjp)])


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a = _as_tensor(a)
    gamma = _as_tensor(gamma, like=a)
    beta = _as_tensor(beta, like=a)
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise _shape_error("layer_norm", a.data, gamma.data)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.dtype))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_x(g):
        gx = g * gamma.data
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    def grad_gamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(out, [(a, grad_x), (gamma, grad_gamma), (beta, grad_beta)])


def embedding_lookup(table, idx):
    """Gather rows ``table[idx]``; gradient scatter-adds back into the table."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"embedding_lookup: integer indices required, got {idx.dtype}")
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ValueError(f"embedding_lookup: index out of range [0, {v})")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return gt

    return _make(out, [(table, vjp)])


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row logits."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.data.shape[0], logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    if targets.shape[0] != flat.shape[0]:
        raise _shape_error("cross_entropy", logits.data, targets)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"cross_entropy: target index out of range [0, {v})")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(flat.shape[0])
    loss = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p / flat.shape[0]).reshape(logits.data.shape).astype(logits.dtype)

    return _make(loss, [(logits, vjp)])


def resize_weights(src, dst, dtype=np.float64):
    """Row matrix of half-pixel-center bilinear weights mapping src -> dst."""
    if src < 1 or dst < 1:
        raise ValueError(f"bilinear_resize: extents must be >= 1, got {src} -> {dst}")
    if src == dst:
        return np.eye(src, dtype=dtype)
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, src - 1)
    w = np.zeros((dst, src), dtype=np.float64)
    np.add.at(w, (np.arange(dst), i0), 1.0 - frac)
    np.add.at(w, (np.arange(dst), i1), frac)
    return w.astype(dtype)


def bilinear_resize(a, size):
    """Resample a ``(..., H, W, C)`` grid to ``(..., h, w, C)``.

    Half-pixel-center (non-corner-aligned) convention; the channel axis is
    untouched.  Exact identity when the target equals the source extents.
    """
    a = _as_tensor(a)
    h, w = int(size[0]), int(size[1])
    if a.data.ndim < 3:
        raise ValueError(f"bilinear_resize: grid must be (..., H, W, C), got {a.data.shape}")
    hs, ws = a.data.shape[-3], a.data.shape[-2]
    if h < 1 or w < 1:
        raise ValueError(f"bilinear_resize: target extents must be >= 1, got ({h}, {w})")
    if (h, w) == (hs, ws):
        return _make(a.data.copy(), [(a, lambda g: g)])
    wr = resize_weights(hs, h, a.dtype)
    wc = resize_weights(ws, w, a.dtype)
    tmp = np.einsum("ph,...hwc->...pwc", wr, a.data)
    out = np.einsum("qw,...pwc->...pqc", wc, tmp)

    def vjp(g):
        t = np.einsum("qw,...pqc->...pwc", wc, g)
        return np.einsum("ph,...pwc->...hwc", wr, t).astype(a.dtype)

    return _make(out.astype(a.dtype), [(a, vjp)])


def conv2d(a, w, b=None, stride=1, pad=0):
    """2-D convolution over ``(B, H, W, Cin)`` with kernel ``(kh, kw, Cin, Cout)``."""
    a = _as_tensor(a)
    w = _as_tensor(w)
    if a.data.ndim != 4 or w.data.ndim != 4 or a.data.shape[3] != w.data.shape[2]:
        raise _shape_error("conv2d", a.data, w.data)
    kh, kw, cin, cout = w.data.shape
    s = int(stride)
    x = a.data
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    bsz, hp, wp, _ = x.shape
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::s, ::s]                       # (B, Ho, Wo, Cin, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(bsz, ho, wo, cout)
    if b is not None:
        b = _as_tensor(b, like=a)
        out = out + b.data

    def grad_w(g):
        gm = g.reshape(-1, cout)
        return (cols.T @ gm).reshape(w.data.shape)

    def grad_a(g):
        gx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                patch = g @ w.data[i, j].T       # (B, Ho, Wo, Cin)
                gx[:, i:i + ho * s:s, j:j + wo * s:s, :] += patch
        if pad:
            gx = gx[:, pad:-pad or None, pad:-pad or None, :]
        return gx

    parents = [(a, grad_a), (w, grad_w)]
    if b is not None:
        parents.append((b, lambda g: g.reshape(-1, cout).sum(axis=0)))
    return _make(out, parents)


def upsample2x(a):
    """Nearest-neighbor 2x upsampling of ``(B, H, W, C)``."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ValueError(f"upsample2x: expected (B, H, W, C), got {a.data.shape}")
    out = a.data.repeat(2, axis=1).repeat(2, axis=2)
    bsz, hh, ww, c = a.data.shape

    def vjp(g):
        return g.reshape(bsz, hh, 2, ww, 2, c).sum(axis=(2, 4))

    return _make(out, [(a, vjp)])


def mse(a, b):
    d = sub(a, b)
    return mean(mul(d, d))


class Module:
    """Minimal parameter container; submodules and tensors register via attributes."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            tag = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Tensor):
                out.append((tag, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(tag))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{tag}.{i}"))
                    elif isinstance(item, Tensor):
                        out.append((f"{tag}.{i}", item))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self):
        return [t for t in self.parameters() if t.requires_grad]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
        return self


def param(rng, shape, scale=None, dtype=np.float32, name=None):
    """Gaussian-initialized trainable tensor; default scale 1/sqrt(fan_in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else max(1, shape[0] if shape else 1)
        scale = 1.0 / math.sqrt(fan_in)
    data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape, dtype=np.float32, name=None):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones_param(shape, dtype=np.float32, name=None):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)
