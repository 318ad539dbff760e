"""Parameterized layers, the parameter registry, and the AdamW optimizer.

Every trainable tensor is registered under a dotted name at construction
time; registry insertion order is the canonical order for initialization
and checkpoint layout, so model construction must be deterministic.
"""

from __future__ import annotations

import collections
import math
from contextlib import contextmanager

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError


class ParamRegistry:
    """Ordered, name-unique map of trainable tensors."""

    def __init__(self):
        self._params: "collections.OrderedDict[str, Tensor]" = collections.OrderedDict()

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __len__(self):
        return len(self._params)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())


# ---------------------------------------------------------------------------
# attention MAC instrumentation

_mac_counter = None


class MacCounter:
    """Collects multiply-accumulate counts of attention matmuls, per role."""

    def __init__(self):
        self.by_role = collections.Counter()

    def add(self, role: str, macs: int) -> None:
        self.by_role[role] += macs

    def total(self) -> int:
        return sum(self.by_role.values())


@contextmanager
def count_attention_macs():
    """Context manager yielding a live MacCounter for the enclosed forward passes."""
    global _mac_counter
    prev = _mac_counter
    _mac_counter = counter = MacCounter()
    try:
        yield counter
    finally:
        _mac_counter = prev


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, in_dim: int, out_dim: int, registry: ParamRegistry,
                 name: str, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = registry.register(
            f"{name}.weight", Tensor(np.zeros((in_dim, out_dim), dtype=dtype)))
        self.bias = registry.register(
            f"{name}.bias", Tensor(np.zeros(out_dim, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.weight), self.bias)


class LayerNorm:
    def __init__(self, dim: int, registry: ParamRegistry, name: str,
                 eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gain = registry.register(f"{name}.gain", Tensor(np.zeros(dim, dtype=dtype)))
        self.bias = registry.register(f"{name}.bias", Tensor(np.zeros(dim, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention:
    """Query / key-value attention with per-head scaled dot products.

    ``scale`` selects the softmax temperature: ``per_head`` divides scores by
    sqrt(dim / heads), ``full_dim`` by sqrt(dim).
    """

    def __init__(self, dim: int, heads: int, registry: ParamRegistry, name: str,
                 scale: str = "per_head", dtype=np.float32):
        if dim % heads != 0:
            raise ConfigError(f"{name}: width {dim} not divisible by {heads} heads")
        if scale not in ("per_head", "full_dim"):
            raise ConfigError(f"{name}: unknown attention scale mode {scale!r}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim if scale == "per_head" else dim)
        self.q_proj = Linear(dim, dim, registry, f"{name}.q", dtype)
        self.k_proj = Linear(dim, dim, registry, f"{name}.k", dtype)
        self.v_proj = Linear(dim, dim, registry, f"{name}.v", dtype)
        self.out_proj = Linear(dim, dim, registry, f"{name}.out", dtype)

    def _split_heads(self, x: Tensor, b: int, length: int) -> Tensor:
        x = ag.reshape(x, (b, length, self.heads, self.head_dim))
        return ag.permute(x, (0, 2, 1, 3))

    def __call__(self, q_seq: Tensor, kv_seq: Tensor, role: str = "attn") -> Tensor:
        if q_seq.shape[-1] != self.dim or kv_seq.shape[-1] != self.dim:
            raise ConfigError(
                f"attention width mismatch: {q_seq.shape[-1]} / {kv_seq.shape[-1]} vs {self.dim}")
        if kv_seq.shape[-2] < 1:
            raise ConfigError("attention needs at least one key/value token")
        b, lq = q_seq.shape[0], q_seq.shape[-2]
        lk = kv_seq.shape[-2]
        q = self._split_heads(self.q_proj(q_seq), b, lq)
        k = self._split_heads(self.k_proj(kv_seq), b, lk)
        v = self._split_heads(self.v_proj(kv_seq), b, lk)
        scores = ag.mul(ag.matmul(q, ag.permute(k, (0, 1, 3, 2))), self.scale)
        if _mac_counter is not None:
            # scores and value mixing each cost b*h*lq*lk*head_dim MACs
            _mac_counter.add(role, 2 * b * self.heads * lq * lk * self.head_dim)
        attn = ag.softmax_lastdim(scores)
        mixed = ag.matmul(attn, v)
        merged = ag.reshape(ag.permute(mixed, (0, 2, 1, 3)), (b, lq, self.dim))
        return self.out_proj(merged)


class FeedForward:
    """Two linear maps with a GELU in between (dim -> hidden -> dim)."""

    def __init__(self, dim: int, hidden: int, registry: ParamRegistry, name: str,
                 dtype=np.float32):
        self.fc1 = Linear(dim, hidden, registry, f"{name}.fc1", dtype)
        self.fc2 = Linear(hidden, dim, registry, f"{name}.fc2", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# initialization


def _truncated_normal(rng: np.random.Generator, shape, std: float, clip: float = 2.0):
    """Normal draws rejected outside +/- clip standard units, then scaled."""
    n = int(np.prod(shape))
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        draw = rng.standard_normal(n - filled)
        keep = draw[np.abs(draw) <= clip]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return (out * std).reshape(shape)


def init_params(registry: ParamRegistry, seed: int) -> None:
    """Seeded init: weights/embeddings truncated-normal std 0.02, biases 0, norm gains 1."""
    rng = np.random.default_rng(seed)
    for name, p in registry.items():
        if name.endswith(".gain"):
            p.data[...] = 1.0
        elif name.endswith(".bias"):
            p.data[...] = 0.0
        else:
            p.data[...] = _truncated_normal(rng, p.shape, std=0.02).astype(p.dtype)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Decay and the moment update both read the pre-step parameter value;
    gradients are left untouched (the caller zeroes them).
    """

    def __init__(self, registry: ParamRegistry, lr: float = 1e-3,
                 weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.registry = registry
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in registry.items()
        }

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.registry.items():
            if p.grad is None:
                raise ContractError(f"adamw: parameter {name} has no gradient")
            g = p.grad
            m, v = self.moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update.astype(p.dtype, copy=False)

    def zero_grads(self) -> None:
        self.registry.zero_grads()

    def state_arrays(self) -> dict:
        """Flat name -> array view of the moment state, for checkpointing."""
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out

    def load_state(self, arrays: dict, step_count: int) -> None:
        for name in self.moments:
            m, v = self.moments[name]
            m[...] = arrays[f"{name}.m"]
            v[...] = arrays[f"{name}.v"]
        self.step_count = step_count
