"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray, remembers the ops that produced it, and
``backward()`` runs the chain rule over the recorded graph (iterative
topological order, so graph depth is not limited by the Python stack).

Scope is exactly what the models here need: broadcasting elementwise
arithmetic, batched matmul, reductions, shape ops, gather along axis 0,
and fused softmax / layernorm / gelu. Gradients accumulate in ``.grad``
with the same dtype as ``.data``; float32 for training, float64 when a
finite-difference check needs the headroom.

Broadcasting rule for gradients: every op unbroadcasts its upstream
gradient back to the operand's shape by summing the expanded axes, so
parameters shared across a batch receive the summed gradient.
"""

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    """True while graph recording is on (outside no_grad blocks)."""
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # the closure on each node references the node itself; break the
        # cycles so intermediate arrays free by refcount, not gc timing
        for node in topo:
            if node._prev:
                node._backward = None
                node._prev = ()
                node.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _node(self.data + other.data, (self, other))
        if out._prev:
            def back():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.data.shape))
            out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _wrap(other)
        out = _node(self.data * other.data, (self, other))
        if out._prev:
            def back():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.data.shape))
            out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __truediv__(self, other):
        other = _wrap(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return _wrap(other) * self ** -1.0

    def __pow__(self, p):
        p = float(p)
        out = _node(self.data ** p, (self,))
        if out._prev:
            def back():
                self._accum(out.grad * p * self.data ** (p - 1.0))
            out._backward = back
        return out

    def __matmul__(self, other):
        other = _wrap(other)
        out = _node(np.matmul(self.data, other.data), (self, other))
        if out._prev:
            def back():
                if self.requires_grad:
                    g = np.matmul(out.grad, other.data.swapaxes(-1, -2))
                    self._accum(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    g = np.matmul(self.data.swapaxes(-1, -2), out.grad)
                    other._accum(_unbroadcast(g, other.data.shape))
            out._backward = back
        return out

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out = _node(np.exp(self.data), (self,))
        if out._prev:
            def back():
                self._accum(out.grad * out.data)
            out._backward = back
        return out

    def log(self):
        out = _node(np.log(self.data), (self,))
        if out._prev:
            def back():
                self._accum(out.grad / self.data)
            out._backward = back
        return out

    def tanh(self):
        out = _node(np.tanh(self.data), (self,))
        if out._prev:
            def back():
                self._accum(out.grad * (1.0 - out.data * out.data))
            out._backward = back
        return out

    def sigmoid(self):
        # computed via tanh for symmetric stability at both tails
        out = _node(0.5 * (np.tanh(0.5 * self.data) + 1.0), (self,))
        if out._prev:
            def back():
                self._accum(out.grad * out.data * (1.0 - out.data))
            out._backward = back
        return out

    def abs(self):
        out = _node(np.abs(self.data), (self,))
        if out._prev:
            def back():
                self._accum(out.grad * np.sign(self.data))
            out._backward = back
        return out

    def clip(self, lo, hi):
        """Clamp values; gradient passes through only where not clipped."""
        out = _node(np.clip(self.data, lo, hi), (self,))
        if out._prev:
            def back():
                inside = (self.data >= lo) & (self.data <= hi)
                self._accum(out.grad * inside)
            out._backward = back
        return out

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._prev:
            def back():
                g = out.grad
                if not keepdims and axis is not None:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))
            out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        out = _node(self.data.reshape(*shape), (self,))
        if out._prev:
            def back():
                self._accum(out.grad.reshape(self.data.shape))
            out._backward = back
        return out

    def swapaxes(self, a, b):
        out = _node(self.data.swapaxes(a, b), (self,))
        if out._prev:
            def back():
                self._accum(out.grad.swapaxes(a, b))
            out._backward = back
        return out

    def __getitem__(self, key):
        # basic indexing only (ints and slices); views never alias an index
        out = _node(self.data[key], (self,))
        if out._prev:
            def back():
                g = np.zeros_like(self.data)
                g[key] = out.grad
                self._accum(g)
            out._backward = back
        return out


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents):
    # invariant: a tensor needing grad flow has requires_grad set, whether
    # leaf or interior, so closures can test requires_grad alone
    out = Tensor(data)
    if _grad_enabled:
        prev = tuple(p for p in parents if p.requires_grad)
        if prev:
            out.requires_grad = True
            out._prev = prev
    return out


# ---------------------------------------------------------------------------
# Free functions
# ---------------------------------------------------------------------------

def stopgrad(x):
    """Identity forward, zero gradient through (straight-through barrier)."""
    return Tensor(x.data)


def expand(x, shape):
    """Broadcast x.data to `shape`; backward sums the expanded axes."""
    out = _node(np.broadcast_to(x.data, shape), (x,))
    if out._prev:
        def back():
            x._accum(_unbroadcast(out.grad, x.data.shape))
        out._backward = back
    return out


def concat(tensors, axis):
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._prev:
        sizes = [t.data.shape[axis] for t in tensors]
        def back():
            offs = np.cumsum([0] + sizes)
            for t, a, b in zip(tensors, offs[:-1], offs[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(a, b)
                    t._accum(out.grad[tuple(sl)])
        out._backward = back
    return out


def take0(x, idx):
    """Gather rows along axis 0: out[i...] = x[idx[i...]].

    idx may be any integer array; repeated indices accumulate gradient.
    """
    idx = np.asarray(idx)
    out = _node(x.data[idx], (x,))
    if out._prev:
        def back():
            g = np.zeros_like(x.data)
            flat_idx = idx.reshape(-1)
            flat_g = out.grad.reshape((flat_idx.size,) + x.data.shape[1:])
            np.add.at(g, flat_idx, flat_g)
            x._accum(g)
        out._backward = back
    return out


def softmax(x):
    """Softmax over the last axis (fused forward via the kernel layer)."""
    y = kernels.softmax_rows(x.data)
    out = _node(y, (x,))
    if out._prev:
        def back():
            dot = (out.grad * y).sum(axis=-1, keepdims=True)
            x._accum((out.grad - dot) * y)
        out._backward = back
    return out


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    if out._prev:
        def back():
            gy = out.grad * gain.data
            if x.requires_grad:
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                x._accum((gy - m1 - xhat * m2) * inv)
            if gain.requires_grad:
                gain._accum(_unbroadcast(out.grad * xhat, gain.data.shape))
            if bias.requires_grad:
                bias._accum(_unbroadcast(out.grad, bias.data.shape))
        out._backward = back
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh-approximated gaussian error linear unit."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = _node(0.5 * x.data * (1.0 + t), (x,))
    if out._prev:
        def back():
            du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data ** 2)
            dg = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x._accum(out.grad * dg)
        out._backward = back
    return out


# ---------------------------------------------------------------------------
# Optimizer and finite differences
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a dict of named Tensors. State keyed by parameter name."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f(x) with respect to ndarray x.

    Perturbs x in place element by element (restoring it afterwards) and
    passes it to f. Use float64 x for meaningful comparisons.
    """
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = f(x)
        x[i] = orig - eps
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return g


def rel_err(a, b):
    """max_i |a_i - b_i| / max(1e-8, max_i(|a_i|, |b_i|)) over flattened arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(1e-8, float(np.max(np.abs(a)) if a.size else 0.0), float(np.max(np.abs(b)) if b.size else 0.0))
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    return num / denom
