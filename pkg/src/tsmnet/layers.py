"""Shared parameterized building blocks: linear maps, norms, attention.

Parameters live in one flat dict keyed by dotted names. Each tensor is
initialized from its own named random sub-stream, so the values depend only
on (seed, name, shape) and never on registration order.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .seeding import substream

Params = dict[str, Tensor]

INIT_STD = 0.02
TRUNC_BOUND = 3.0  # resample outside +-3 std


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...],
                 std: float = INIT_STD) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bound = TRUNC_BOUND * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def add_weight(params: Params, name: str, shape: tuple[int, ...], seed: int,
               std: float = INIT_STD) -> None:
    rng = substream(seed, "params", name)
    params[name] = ag.tensor(trunc_normal(rng, shape, std), requires_grad=True)


def add_zeros(params: Params, name: str, shape: tuple[int, ...]) -> None:
    params[name] = ag.tensor(np.zeros(shape), requires_grad=True)


def add_ones(params: Params, name: str, shape: tuple[int, ...]) -> None:
    params[name] = ag.tensor(np.ones(shape), requires_grad=True)


def add_const(params: Params, name: str, value: float) -> None:
    params[name] = ag.tensor(np.array(value), requires_grad=True)


def init_linear(params: Params, name: str, d_in: int, d_out: int, seed: int) -> None:
    add_weight(params, f"{name}.w", (d_in, d_out), seed)
    add_zeros(params, f"{name}.b", (d_out,))


def init_layer_norm(params: Params, name: str, dim: int) -> None:
    add_ones(params, f"{name}.g", (dim,))
    add_zeros(params, f"{name}.b", (dim,))


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return ag.add(ag.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def layer_norm(x: Tensor, params: Params, name: str) -> Tensor:
    return ag.add(ag.mul(ag.layer_norm(x), params[f"{name}.g"]), params[f"{name}.b"])


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    att = ag.softmax(ag.mul(ag.matmul(q, ag.transpose(k)), scale), axis=-1)
    return ag.matmul(att, v)


def init_attention(params: Params, name: str, dim: int, seed: int) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", dim, dim, seed)


def attention(q_tokens: Tensor, kv_tokens: Tensor, params: Params, name: str,
              heads: int) -> Tensor:
    """Multi-head attention of q_tokens over kv_tokens (projected output)."""
    dim = q_tokens.shape[-1]
    if dim % heads:
        raise ValueError(f"attention: dim {dim} not divisible by {heads} heads")
    d = dim // heads
    q = linear(q_tokens, params, f"{name}.q")
    k = linear(kv_tokens, params, f"{name}.k")
    v = linear(kv_tokens, params, f"{name}.v")
    outs = []
    for h in range(heads):
        sl = (slice(None), slice(h * d, (h + 1) * d))
        outs.append(_attend(q[sl], k[sl], v[sl]))
    merged = outs[0] if heads == 1 else ag.concat(outs, axis=1)
    return linear(merged, params, f"{name}.o")


def init_mlp(params: Params, name: str, dim: int, hidden: int, seed: int) -> None:
    init_linear(params, f"{name}.fc1", dim, hidden, seed)
    init_linear(params, f"{name}.fc2", hidden, dim, seed)


def mlp(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(ag.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def init_block(params: Params, name: str, dim: int, seed: int,
               mlp_ratio: int = 4) -> None:
    init_layer_norm(params, f"{name}.ln1", dim)
    init_attention(params, f"{name}.attn", dim, seed)
    init_layer_norm(params, f"{name}.ln2", dim)
    init_mlp(params, f"{name}.mlp", dim, mlp_ratio * dim, seed)


def block(x: Tensor, params: Params, name: str, heads: int) -> Tensor:
    """Pre-norm transformer encoder block."""
    h = layer_norm(x, params, f"{name}.ln1")
    x = ag.add(x, attention(h, h, params, f"{name}.attn", heads))
    return ag.add(x, mlp(layer_norm(x, params, f"{name}.ln2"), params, f"{name}.mlp"))


def init_cross_block(params: Params, name: str, dim: int, seed: int) -> None:
    init_layer_norm(params, f"{name}.lnq", dim)
    init_layer_norm(params, f"{name}.lnkv", dim)
    init_attention(params, f"{name}.attn", dim, seed)


def cross_block(q_tokens: Tensor, kv_tokens: Tensor, params: Params, name: str,
                heads: int) -> Tensor:
    """Cross-attention readout (no residual; callers add their own)."""
    q = layer_norm(q_tokens, params, f"{name}.lnq")
    kv = layer_norm(kv_tokens, params, f"{name}.lnkv")
    return attention(q, kv, params, f"{name}.attn", heads)


def param_count(params: Params) -> int:
    return sum(t.size for t in params.values())


def zero_grads(params: Params) -> None:
    for t in params.values():
        t.grad = None
