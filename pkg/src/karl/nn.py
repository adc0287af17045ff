"""Transformer building blocks on top of the autodiff engine.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``enc.block0.attn.wq`` and so on); model code composes these functions
and owns the naming scheme. All blocks are pre-LN with full bidirectional
self-attention; sequence semantics (what attends to what) are decided by
what the caller concatenates into the sequence.
"""

import numpy as np

from .autodiff import Tensor, gelu, layernorm, softmax


def init_linear(rng, params, prefix, fan_in, fan_out, dtype=np.float32):
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    params[prefix + ".w"] = Tensor(w.astype(dtype), requires_grad=True)
    params[prefix + ".b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def init_layernorm(params, prefix, width, dtype=np.float32):
    params[prefix + ".g"] = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
    params[prefix + ".b"] = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)


def init_embedding(rng, params, name, rows, width, dtype=np.float32, std=0.02):
    e = rng.normal(0.0, std, size=(rows, width))
    params[name] = Tensor(e.astype(dtype), requires_grad=True)


def init_block(rng, params, prefix, width, mlp_ratio=4, dtype=np.float32):
    init_layernorm(params, prefix + ".ln1", width, dtype)
    init_linear(rng, params, prefix + ".wq", width, width, dtype)
    init_linear(rng, params, prefix + ".wk", width, width, dtype)
    init_linear(rng, params, prefix + ".wv", width, width, dtype)
    init_linear(rng, params, prefix + ".wo", width, width, dtype)
    init_layernorm(params, prefix + ".ln2", width, dtype)
    init_linear(rng, params, prefix + ".mlp1", width, width * mlp_ratio, dtype)
    init_linear(rng, params, prefix + ".mlp2", width * mlp_ratio, width, dtype)


def init_transformer(rng, params, prefix, depth, width, mlp_ratio=4, dtype=np.float32):
    for i in range(depth):
        init_block(rng, params, f"{prefix}.block{i}", width, mlp_ratio, dtype)
    init_layernorm(params, prefix + ".lnf", width, dtype)


def linear(x, params, prefix):
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def attention(x, params, prefix, n_heads):
    """Full self-attention over x of shape (B, S, D)."""
    b, s, d = x.shape
    dh = d // n_heads
    q = linear(x, params, prefix + ".wq").reshape(b, s, n_heads, dh).swapaxes(1, 2)
    k = linear(x, params, prefix + ".wk").reshape(b, s, n_heads, dh).swapaxes(1, 2)
    v = linear(x, params, prefix + ".wv").reshape(b, s, n_heads, dh).swapaxes(1, 2)
    att = softmax((q @ k.swapaxes(2, 3)) * (1.0 / np.sqrt(dh)))
    y = (att @ v).swapaxes(1, 2).reshape(b, s, d)
    return linear(y, params, prefix + ".wo")


def block(x, params, prefix, n_heads):
    h = x + attention(
        layernorm(x, params[prefix + ".ln1.g"], params[prefix + ".ln1.b"]),
        params, prefix, n_heads,
    )
    z = layernorm(h, params[prefix + ".ln2.g"], params[prefix + ".ln2.b"])
    return h + linear(gelu(linear(z, params, prefix + ".mlp1")), params, prefix + ".mlp2")


def transformer(x, params, prefix, depth, n_heads):
    for i in range(depth):
        x = block(x, params, f"{prefix}.block{i}", n_heads)
    return layernorm(x, params[prefix + ".lnf.g"], params[prefix + ".lnf.b"])
