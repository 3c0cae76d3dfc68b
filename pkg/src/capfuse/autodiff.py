"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array and records the operations that produced it;
calling backward() on a scalar output walks the graph in reverse topological
order and accumulates gradients into every tensor that requires them. The
module also provides the Adam optimizer and a finite-difference gradient
checker used as the independent oracle in tests.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError

# Nesting counter for no_grad(); graph recording is active when it is zero.
_GRAD_OFF = 0


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_OFF
        _GRAD_OFF += 1
        return self

    def __exit__(self, *exc):
        global _GRAD_OFF
        _GRAD_OFF -= 1
        return False


def grad_enabled() -> bool:
    return _GRAD_OFF == 0


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise StateError(f"backward() requires a scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data + other.data
            out = _result(out_data, (self, other))
            if out.requires_grad:
                def back(a=self, b=other, o=out):
                    if a.requires_grad:
                        a._accum(_unbroadcast(o.grad, a.data.shape))
                    if b.requires_grad:
                        b._accum(_unbroadcast(o.grad, b.data.shape))
                out._backward = back
            return out
        out = _result(self.data + float(other), (self,))
        if out.requires_grad:
            def back(a=self, o=out):
                a._accum(o.grad)
            out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _result(-self.data, (self,))
        if out.requires_grad:
            def back(a=self, o=out):
                a._accum(-o.grad)
            out._backward = back
        return out

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.data.shape != other.data.shape:
                raise ShapeError(
                    f"elementwise product needs identical shapes, got "
                    f"{self.data.shape} and {other.data.shape}"
                )
            out = _result(self.data * other.data, (self, other))
            if out.requires_grad:
                def back(a=self, b=other, o=out):
                    if a.requires_grad:
                        a._accum(o.grad * b.data)
                    if b.requires_grad:
                        b._accum(o.grad * a.data)
                out._backward = back
            return out
        c = float(other)
        out = _result(self.data * c, (self,))
        if out.requires_grad:
            def back(a=self, o=out, k=c):
                a._accum(o.grad * k)
            out._backward = back
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions and activations --------------------------------------

    def sum(self):
        out = _result(np.asarray(self.data.sum()), (self,))
        if out.requires_grad:
            def back(a=self, o=out):
                a._accum(np.full_like(a.data, float(o.grad)))
            out._backward = back
        return out

    def relu(self):
        mask = self.data > 0.0
        out = _result(np.where(mask, self.data, 0.0), (self,))
        if out.requires_grad:
            def back(a=self, o=out, m=mask):
                a._accum(o.grad * m)
            out._backward = back
        return out

    def sigmoid(self):
        s = _sigmoid(self.data)
        out = _result(s, (self,))
        if out.requires_grad:
            def back(a=self, o=out, v=s):
                a._accum(o.grad * v * (1.0 - v))
            out._backward = back
        return out

    def tanh(self):
        t = np.tanh(self.data)
        out = _result(t, (self,))
        if out.requires_grad:
            def back(a=self, o=out, v=t):
                a._accum(o.grad * (1.0 - v * v))
            out._backward = back
        return out


class Parameter(Tensor):
    """Named, trainable tensor; frozen parameters never receive updates."""

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, data, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def freeze(self):
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _result(data: np.ndarray, parents) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Evaluate on the side that keeps exp() bounded.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- structural operations ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2D x 2D, 1D x 2D, and 2D x 1D operands."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError(f"matmul supports 1D/2D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
    out = _result(ad @ bd, (a, b))
    if out.requires_grad:
        def back(x=a, y=b, o=out):
            g = o.grad
            if x.requires_grad:
                if x.data.ndim == 1:
                    gx = y.data @ g if y.data.ndim == 2 else g * y.data
                else:
                    gx = np.outer(g, y.data) if y.data.ndim == 1 else g @ y.data.T
                x._accum(gx)
            if y.requires_grad:
                if y.data.ndim == 1:
                    gy = x.data.T @ g if x.data.ndim == 2 else g * x.data
                else:
                    gy = np.outer(x.data, g) if x.data.ndim == 1 else x.data.T @ g
                y._accum(gy)
        out._backward = back
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b, with the bias broadcast over leading rows."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"affine input dim {x.data.shape} does not match weight {w.data.shape}")
    if w.data.shape[1] != b.data.shape[-1]:
        raise ShapeError(f"affine bias {b.data.shape} does not match weight {w.data.shape}")
    return matmul(x, w) + b


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; the backward pass splits the gradient."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("concat_last requires at least 1-dimensional tensors")
    if ad.ndim != bd.ndim or ad.shape[:-1] != bd.shape[:-1]:
        raise ShapeError(f"concat_last shapes differ off the last axis: {ad.shape} vs {bd.shape}")
    if ad.shape[-1] == 0 or bd.shape[-1] == 0:
        raise ShapeError("concat_last rejects a zero-sized last axis")
    out = _result(np.concatenate([ad, bd], axis=-1), (a, b))
    if out.requires_grad:
        split = ad.shape[-1]
        def back(x=a, y=b, o=out, k=split):
            if x.requires_grad:
                x._accum(o.grad[..., :k])
            if y.requires_grad:
                y._accum(o.grad[..., k:])
        out._backward = back
    return out


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """View of x restricted to [start, stop) on the last axis."""
    if not (0 <= start <= stop <= x.data.shape[-1]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.shape}")
    out = _result(x.data[..., start:stop], (x,))
    if out.requires_grad:
        def back(a=x, o=out, s=start, e=stop):
            g = np.zeros_like(a.data)
            g[..., s:e] = o.grad
            a._accum(g)
        out._backward = back
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    return a * b


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: split the last axis in half, return a * sigmoid(b)."""
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"glu needs an even last dimension, got {x.shape}")
    h = d // 2
    a = x.data[..., :h]
    gate = _sigmoid(x.data[..., h:])
    out = _result(a * gate, (x,))
    if out.requires_grad:
        def back(t=x, o=out, av=a, gv=gate, k=h):
            g = np.empty_like(t.data)
            g[..., :k] = o.grad * gv
            g[..., k:] = o.grad * av * gv * (1.0 - gv)
            t._accum(g)
        out._backward = back
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (plain numpy)."""
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of a single target against a vector of logits."""
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_xent expects 1D logits, got {logits.shape}")
    v = logits.data.shape[0]
    if v < 2:
        raise ShapeError(f"softmax_xent needs at least 2 classes, got {v}")
    if not (0 <= target < v):
        raise IndexError(f"target {target} out of range for {v} classes")
    logp = log_softmax(logits.data)
    out = _result(np.asarray(-logp[target]), (logits,))
    if out.requires_grad:
        def back(a=logits, o=out, p=np.exp(logp), t=target):
            g = p.copy()
            g[t] -= 1.0
            a._accum(g * float(o.grad))
        out._backward = back
    return out


def softmax_xent_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross-entropy for a batch of logits and integer targets."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_xent_rows expects 2D logits, got {logits.shape}")
    n, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} rows")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target out of range for {v} classes")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    out = _result(-logp[rows, targets], (logits,))
    if out.requires_grad:
        def back(a=logits, o=out, p=np.exp(logp), t=targets, r=rows):
            g = p.copy()
            g[r, t] -= 1.0
            a._accum(g * o.grad[:, None])
        out._backward = back
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: identity at inference, rescaled mask in training."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = _result(x.data * keep, (x,))
    if out.requires_grad:
        def back(a=x, o=out, m=keep):
            a._accum(o.grad * m)
        out._backward = back
    return out


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    out = _result(table.data[ids], (table,))
    if out.requires_grad:
        def back(t=table, o=out, ix=ids):
            g = np.zeros_like(t.data)
            np.add.at(g, ix, o.grad)
            t._accum(g)
        out._backward = back
    return out


# -- optimizer -------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Frozen parameters are skipped entirely, so their values stay bit-identical
    across any number of steps. step() clears all gradients afterwards.
    """

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if not p.frozen and p.grad is None:
                raise StateError(f"parameter {getattr(p, 'name', '?')} has no gradient")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.frozen:
                p.grad = None
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- verification oracle ----------------------------------------------------


def grad_check(f, inputs, step: float = 1e-5) -> float:
    """Compare autodiff gradients of f(*inputs) against central differences.

    Returns the maximum over all input coordinates of
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the given inputs")
    for t in inputs:
        t.grad = None
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]
    worst = 0.0
    for t, g_ad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("function value is not finite during perturbation")
            g_fd = (hi - lo) / (2.0 * step)
            g_a = g_ad.reshape(-1)[i]
            rel = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
            worst = max(worst, rel)
    return worst


def params_checksum(params) -> str:
    """SHA-256 over sorted parameter names, shapes, flags, and raw bytes."""
    h = hashlib.sha256()
    for p in sorted(params, key=lambda q: q.name):
        h.update(p.name.encode())
        h.update(str(p.shape).encode())
        h.update(b"frozen" if p.frozen else b"live")
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
