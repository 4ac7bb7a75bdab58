"""Dense float tensors with reverse-mode automatic differentiation.

Only the operations the two visual streams need are provided.  There is no
general broadcasting: elementwise ops require identical shapes and biases are
added inside the layer ops that own them.
"""
from contextlib import contextmanager

import numpy as np

from . import _kernels

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

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

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf tensor's ``grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)

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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

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
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar for the elementwise ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a, b):
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s):
    s = float(s)
    return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_all(a):
    total = a.data.sum(dtype=np.float64)
    return _result(np.asarray(total, dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean_all(a):
    n = a.data.size
    total = a.data.sum(dtype=np.float64) / n
    return _result(np.asarray(total, dtype=a.dtype), (a,),
                   lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def relu(a):
    mask = a.data > 0
    # subgradient at 0 is 0
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for x (N,D), weight (K,D), bias (K,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


_CHUNK_BYTES = 4 << 20


def _chunks(N, C, H, W, itemsize):
    per = max(1, _CHUNK_BYTES // (C * 9 * H * W * itemsize))
    return [(s, min(N, s + per)) for s in range(0, N, per)]


def conv2d(x, weight, bias):
    """3x3 convolution, stride 1, unit zero padding (same spatial size)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and FCkk kernel")
    N, C, H, W = x.shape
    F = weight.shape[0]
    if weight.shape[1:] != (C, 3, 3):
        raise DimensionError(f"conv2d: kernel {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (F,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs {F} filters")
    wmat = weight.data.reshape(F, C * 9)
    # batch chunks keep the patch matrix cache-resident
    chunks = _chunks(N, C, H, W, x.data.itemsize)
    out = np.empty((N, F, H, W), dtype=np.result_type(x.dtype, weight.dtype))
    for s, e in chunks:
        res = wmat @ _kernels.im2col3x3(x.data[s:e])
        res += bias.data[:, None]
        out[s:e] = res.reshape(F, e - s, H, W).transpose(1, 0, 2, 3)

    def backward(g):
        dw = np.zeros((F, C * 9), dtype=g.dtype) if weight.requires_grad else None
        dx = np.empty(x.shape, dtype=g.dtype) if x.requires_grad else None
        for s, e in chunks:
            gm = np.ascontiguousarray(g[s:e].transpose(1, 0, 2, 3)).reshape(F, -1)
            if dw is not None:
                dw += gm @ _kernels.im2col3x3(x.data[s:e]).T
            if dx is not None:
                dx[s:e] = _kernels.col2im3x3(wmat.T @ gm, e - s, C, H, W)
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return dx, None if dw is None else dw.reshape(weight.shape), db

    return _result(out, (x, weight, bias), backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2; gradient goes to the first maximum."""
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects NCHW input")
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2d: odd spatial size {H}x{W}")
    out, idx = _kernels.maxpool2x2_forward(x.data)
    return _result(out, (x,), lambda g: (_kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx),))


def global_avg_pool(x):
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects NCHW input")
    N, C, H, W = x.shape
    out = x.data.reshape(N, C, H * W).mean(axis=2, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).copy(),)

    return _result(out, (x,), backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise the input and the running
    buffers (updated in place) move towards them by ``momentum``.  Statistics
    are accumulated in float64.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm2d: input {x.shape} vs {gamma.shape[0]} channels")
    N, C, H, W = x.shape
    m = N * H * W
    dt = x.dtype
    if training:
        if m < 2:
            raise DimensionError("batchnorm2d needs at least two values per channel in train mode")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        centred = x.data - mean.astype(dt)[None, :, None, None]
        var = np.einsum("nchw,nchw->c", centred, centred, dtype=np.float64) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centred = x.data - mean.astype(dt)[None, :, None, None]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv.astype(dt)[None, :, None, None]
    out = xhat * gamma.data.astype(dt)[None, :, None, None] + beta.data.astype(dt)[None, :, None, None]

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
        dgamma = np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64)
        scale_ = (gamma.data.astype(np.float64) * inv)
        if training:
            a = scale_.astype(dt)[None, :, None, None]
            dx = a * (g - (dbeta / m).astype(dt)[None, :, None, None]
                      - xhat * (dgamma / m).astype(dt)[None, :, None, None])
        else:
            dx = g * scale_.astype(dt)[None, :, None, None]
        return dx, dgamma.astype(dt), dbeta.astype(dt)

    return _result(out, (x, gamma, beta), backward)


def softmax2d(logits):
    """Softmax over the spatial cells of each (N,1,H,W) map."""
    if logits.ndim != 4 or logits.shape[1] != 1:
        raise DimensionError("softmax2d expects (N,1,H,W) logits")
    N = logits.shape[0]
    flat = logits.data.reshape(N, -1).astype(np.float64)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gf = g.reshape(N, -1).astype(np.float64)
        dz = p * (gf - (gf * p).sum(axis=1, keepdims=True))
        return (dz.reshape(logits.shape).astype(logits.dtype),)

    return _result(p.reshape(logits.shape).astype(logits.dtype), (logits,), backward)


def _resize_matrix(n_in, n_out):
    # half-pixel centres, edge-clamped; identity when n_in == n_out
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    m[np.arange(n_out), lo] += 1 - w
    m[np.arange(n_out), hi] += w
    return m


def resize_bilinear(x, size):
    """Bilinear resize of (N,C,h,w) maps to (N,C,size,size)."""
    N, C, h, w = x.shape
    rh = _resize_matrix(h, size).astype(x.dtype)
    rw = _resize_matrix(w, size).astype(x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", rh, x.data, rw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", rh, g, rw, optimize=True),)

    return _result(np.ascontiguousarray(out), (x,), backward)


def bilinear_sample(img, py, px):
    """Differentiable (w.r.t. ``img``) bilinear sampling at index coordinates.

    img is (N,C,H,W); py, px are (N,P) arrays.  Returns (N,C,P).
    """
    N, C, H, W = img.shape
    out = _kernels.bilinear_gather(img.data, py, px)
    return _result(out, (img,),
                   lambda g: (_kernels.bilinear_scatter(np.ascontiguousarray(g), py, px, H, W),))


def gru_step(x, h, cell):
    """One GRU update.  ``cell`` exposes w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h."""
    z = sigmoid(add(linear(x, cell.w_z, cell.b_z), linear(h, cell.u_z)))
    r = sigmoid(add(linear(x, cell.w_r, cell.b_r), linear(h, cell.u_r)))
    cand = tanh(add(linear(x, cell.w_h, cell.b_h), linear(mul(r, h), cell.u_h)))
    # (1 - z) * h + z * cand
    return add(h, mul(z, sub(cand, h)))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_multilabel_loss(logits, targets):
    """Mean binary cross-entropy with logits over all N*K entries."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} vs logits {logits.shape}")
    x = logits.data.astype(np.float64)
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def backward(g):
        sig = 0.5 * (1 + np.tanh(0.5 * x))
        return (((sig - t) * (float(g) / n)).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_saliency_loss(pred, target, eps=1e-8):
    """Batch mean of sum(target * ln(target / (pred + eps))) over each map."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"target {t.shape} vs prediction {pred.shape}")
    N = pred.shape[0]
    p = pred.data.astype(np.float64)
    pos = t > 0
    tl = np.zeros_like(t)
    tl[pos] = t[pos] * np.log(t[pos])
    loss = (tl - t * np.log(p + eps)).sum() / N

    def backward(g):
        return ((-t / (p + eps) * (float(g) / N)).astype(pred.dtype),)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward)
