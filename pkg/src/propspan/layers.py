"""Parameter containers shared by the encoder and the task heads."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Parameter
from .errors import ContractError

INIT_STD = 0.02  # projections and embeddings; biases start at zero


def init_matrix(rng, rows, cols, dtype):
    return Parameter(rng.normal(0.0, INIT_STD, (rows, cols)).astype(dtype))


class Linear:
    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        self.w = init_matrix(rng, n_in, n_out, dtype)
        self.b = Parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x):
        return ag.add(ag.matmul(x, self.w), self.b)

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, n, dtype=np.float32):
        self.gain = Parameter(np.ones(n, dtype=dtype))
        self.bias = Parameter(np.zeros(n, dtype=dtype))

    def __call__(self, x):
        return ag.layer_norm(x, self.gain, self.bias)

    def named(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class MultiHeadAttention:
    """Heads share one projection each for q, k, v and mix through an output map."""

    def __init__(self, dim, heads, rng, dtype=np.float32):
        if dim % heads != 0:
            raise ContractError(f"hidden dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, query_x, kv_x, mask=None):
        q = self.wq(query_x)
        k = self.wk(kv_x)
        v = self.wv(kv_x)
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            outs.append(ag.scaled_dot_attention(
                ag.narrow(q, 1, lo, hi), ag.narrow(k, 1, lo, hi),
                ag.narrow(v, 1, lo, hi), mask))
        return self.wo(ag.concat(outs, axis=1))

    def named(self, prefix):
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.named(f"{prefix}.{name}"))
        return out


def collect_params(named: dict) -> list:
    return list(named.values())


def load_named(named: dict, arrays: dict, dtype=np.float32) -> None:
    """Fill parameter tensors from a checkpoint's name -> array map."""
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise ContractError(f"checkpoint mismatch; missing={missing} unexpected={extra}")
    for name, tensor in named.items():
        arr = np.asarray(arrays[name], dtype=dtype)
        if arr.shape != tensor.data.shape:
            raise ContractError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.copy()
        tensor.grad = None
