"""Dense-tensor reverse-mode automatic differentiation.

A Tensor wraps a row-major float array and records the operations that
produced it; calling ``backward`` on a scalar walks the recorded graph in
reverse topological order and accumulates exact analytic gradients into
every reachable tensor with ``requires_grad`` set.

Only the kernel surface the models need is implemented: no broadcasting
beyond leading batch dimensions, no views, 32-bit floats by default with
64-bit graphs available for gradient checking.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, GradCheckError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """An n-dimensional float array participating in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, _children=(), _op=""):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._children = _children
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor.

        Calling twice without zeroing accumulates — gradient accumulation
        across micro-batches relies on this.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype)
        return add(self, smul(other, -1.0))

    def __neg__(self):
        return smul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _toposort(root):
    # iterative post-order: long sequential graphs overflow recursion limits
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def _make(data, children, op, backward):
    out = Tensor(data)
    if _grad_enabled and any(c.requires_grad for c in children):
        out.requires_grad = True
        out._children = tuple(children)
        out._op = op
        out._backward = backward(out)
    return out


def _suffix_compatible(big, small):
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g, shape):
    # sum gradient over the broadcast leading axes
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a smaller operand may broadcast over leading axes."""
    if a.shape != b.shape and not (_suffix_compatible(a.shape, b.shape) or _suffix_compatible(b.shape, a.shape)):
        raise ContractError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(_reduce_to(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_reduce_to(out.grad, b.shape))
        return run

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with the same leading-broadcast rule as add."""
    if a.shape != b.shape and not (_suffix_compatible(a.shape, b.shape) or _suffix_compatible(b.shape, a.shape)):
        raise ContractError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(_reduce_to(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_reduce_to(out.grad * a.data, b.shape))
        return run

    return _make(a.data * b.data, (a, b), "mul", bw)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad * c)
        return run

    return _make(a.data * c, (a,), "smul", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        return run

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError(f"transpose expects a matrix, got shape {a.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad.T)
        return run

    return _make(a.data.T.copy(), (a,), "transpose", bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ContractError(f"reshape: cannot view {a.shape} as {shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad.reshape(a.shape))
        return run

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty input list")
    sizes = [t.shape[axis] for t in tensors]

    def bw(out):
        def run():
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(offset, offset + size)
                    t._accum(out.grad[tuple(idx)])
                offset += size
        return run

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ContractError(f"narrow: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[idx] = out.grad
                a._accum(g)
        return run

    return _make(a.data[idx].copy(), (a,), "narrow", bw)


def take(a: Tensor, flat_indices) -> Tensor:
    """Gather scalar entries by flat (row-major) index."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.size):
        raise ContractError(f"take: index out of range for size {a.data.size}")

    def bw(out):
        def run():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g.reshape(-1), idx, out.grad)
                a._accum(g)
        return run

    return _make(a.data.reshape(-1)[idx], (a,), "take", bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a matrix; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ContractError(f"embedding_lookup expects a matrix table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding_lookup: id out of range for table {table.shape}")

    def bw(out):
        def run():
            if table.requires_grad:
                g = np.zeros_like(table.data)
                np.add.at(g, ids, out.grad)
                table._accum(g)
        return run

    return _make(table.data[ids], (table,), "embedding_lookup", bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            if a.requires_grad:
                g = out.grad
                a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        return run

    return _make(y, (a,), "softmax", bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    val = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    squeezed = np.squeeze(val, axis=axis)

    def bw(out):
        def run():
            if a.requires_grad:
                soft = np.exp(a.data - val)
                a._accum(soft * np.expand_dims(out.grad, axis))
        return run

    return _make(squeezed, (a,), "logsumexp", bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; a constant row maps to zero pre-affine."""
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ContractError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bw(out):
        def run():
            g = out.grad
            if gain.requires_grad:
                gain._accum(_reduce_to(g * xhat, gain.shape))
            if bias.requires_grad:
                bias._accum(_reduce_to(g, bias.shape))
            if a.requires_grad:
                dxhat = g * gain.data
                a._accum(inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)))
        return run

    return _make(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm", bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def bw(out):
        def run():
            if a.requires_grad:
                pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
                a._accum(out.grad * (cdf + a.data * pdf))
        return run

    return _make(a.data * cdf, (a,), "gelu", bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad * (1.0 - y * y))
        return run

    return _make(y, (a,), "tanh", bw)


def sigmoid(a: Tensor) -> Tensor:
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    y = y.astype(a.dtype)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad * y * (1.0 - y))
        return run

    return _make(y, (a,), "sigmoid", bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(np.full_like(a.data, out.grad))
        return run

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum", bw)


def mean_all(a: Tensor) -> Tensor:
    return smul(sum_all(a), 1.0 / a.data.size)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v over 2-d inputs [Tq,d], [Tk,d], [Tk,dv]."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ContractError("scaled_dot_attention expects 2-d q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ContractError(
            f"scaled_dot_attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    scores = smul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


def causal_mask(t: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Additive mask forbidding attention to positions j > i."""
    m = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
    return Tensor(m)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode requires an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# losses


def cross_entropy_label_smoothed(logits: Tensor, gold, eps: float = 0.0) -> Tensor:
    """Mean over positions of -sum_k q_k log p_k with q mixing one-hot and uniform.

    q = (1 - eps) * onehot(gold) + eps / K; eps == 0 reduces to plain
    cross-entropy on the same code path.
    """
    if not (0.0 <= eps < 1.0):
        raise ContractError(f"label smoothing eps must be in [0, 1), got {eps}")
    if logits.data.ndim != 2:
        raise ContractError(f"cross_entropy expects [T, K] logits, got {logits.shape}")
    gold = np.asarray(gold, dtype=np.int64)
    t, k = logits.shape
    if t < 1:
        raise ContractError("cross_entropy needs at least one position")
    if gold.shape != (t,):
        raise ContractError(f"gold ids must have shape ({t},), got {gold.shape}")
    if gold.size and (gold.min() < 0 or gold.max() >= k):
        raise ContractError(f"gold id out of range for {k} classes")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    logp = x - lse
    q = np.full_like(x, eps / k)
    q[np.arange(t), gold] += 1.0 - eps
    loss = -(q * logp).sum() / t

    def bw(out):
        def run():
            if logits.requires_grad:
                p = np.exp(logp)
                logits._accum((p - q) * (out.grad / t))
        return run

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), "ce_ls", bw)


def binary_cross_entropy_multilabel(logits: Tensor, target) -> Tensor:
    """Mean over classes of sigmoid cross-entropy in the stable log-sum-exp form."""
    target = np.asarray(target, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise ContractError(f"bce: shapes {logits.shape} and {target.shape} differ")
    x = logits.data
    loss = (np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))).mean()

    def bw(out):
        def run():
            if logits.requires_grad:
                sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                               np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
                logits._accum((sig - target) * (out.grad / x.size))
        return run

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), "bce", bw)


def backward(loss: Tensor) -> None:
    loss.backward()


# ---------------------------------------------------------------------------
# optimizer and schedules


def lr_factor(step: int, total_steps: int, warmup_frac: float = 0.1) -> float:
    """Piecewise-linear rate multiplier: 0 -> 1 over the warmup span, 1 -> 0 after."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not (0.0 <= warmup_frac <= 1.0):
        raise ContractError("warmup_frac must be in [0, 1]")
    warmup = warmup_frac * total_steps
    if step < warmup:
        return step / warmup
    if total_steps == warmup:
        return 1.0 if step == warmup else 0.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))


class OptimizerState:
    """Adam moments plus the schedule and accumulation bookkeeping."""

    def __init__(self, params, lr=2e-5, total_steps=1, warmup_frac=0.1, accum_steps=1,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 <= warmup_frac <= 1.0):
            raise ContractError("warmup_frac must be in [0, 1]")
        self.params = [p for p in params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.lr = lr
        self.total_steps = total_steps
        self.warmup_frac = warmup_frac
        self.accum_steps = accum_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0


def adam_step(state: OptimizerState, divisor: int | None = None) -> None:
    """One Adam update at the scheduled rate; grads are averaged over the
    accumulation period and zeroed afterwards."""
    div = float(divisor if divisor is not None else state.accum_steps)
    lr = state.lr * lr_factor(state.step, state.total_steps, state.warmup_frac)
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)) / div
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
    state.step += 1


# ---------------------------------------------------------------------------
# gradient verification oracle


def grad_check(f, params, h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    Returns the max over parameter elements of |a - n| / max(|a|, |n|, 1e-8).
    Run the graph in float64: the oracle's resolution is far below float32
    noise.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data).all():
        raise GradCheckError("f must return a finite scalar")
    out.backward()
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            aflat = analytic[pi].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = float(f().data)
                flat[i] = orig - h
                lo = float(f().data)
                flat[i] = orig
                num = (hi - lo) / (2.0 * h)
                if not (math.isfinite(num) and math.isfinite(aflat[i])):
                    raise GradCheckError(f"non-finite gradient at param {pi}, element {i}")
                rel = abs(aflat[i] - num) / max(abs(aflat[i]), abs(num), 1e-8)
                worst = max(worst, rel)
    return worst
