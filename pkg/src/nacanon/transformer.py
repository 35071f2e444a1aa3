"""Pre-LayerNorm transformer blocks in numpy with hand-written backward passes.

Activations are ``(B, T, W)``.  Parameters live in a flat ``dict`` keyed by
name (``"b0.wqkv"`` ...) so optimizers, gradient checks and the model files
can treat every model the same way.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def init_blocks(params: dict, rng: np.random.Generator, width: int, n_blocks: int, std: float = 0.05) -> None:
    for b in range(n_blocks):
        p = f"b{b}."
        params[p + "ln1.g"] = np.ones(width)
        params[p + "ln1.b"] = np.zeros(width)
        params[p + "wqkv"] = rng.normal(0.0, std, (width, 3 * width))
        params[p + "bqkv"] = np.zeros(3 * width)
        params[p + "wo"] = rng.normal(0.0, std / np.sqrt(2 * n_blocks), (width, width))
        params[p + "bo"] = np.zeros(width)
        params[p + "ln2.g"] = np.ones(width)
        params[p + "ln2.b"] = np.zeros(width)
        params[p + "w1"] = rng.normal(0.0, std, (width, 4 * width))
        params[p + "b1"] = np.zeros(4 * width)
        params[p + "w2"] = rng.normal(0.0, std / np.sqrt(2 * n_blocks), (4 * width, width))
        params[p + "b2"] = np.zeros(width)
    params["lnf.g"] = np.ones(width)
    params["lnf.b"] = np.zeros(width)


# ---------------------------------------------------------------- primitives


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax(x, axis=-1):
    e = x - np.max(x, axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _linear_grads(x, dy):
    """Weight and bias gradients of ``y = x @ w + b`` over all leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ d2, d2.sum(axis=0)


def _split_heads(x, n_heads):
    B, T, W = x.shape
    return x.reshape(B, T, n_heads, W // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, D = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * D)


# ---------------------------------------------------------------- full pass


def _causal_bias(T: int, past: int = 0) -> np.ndarray:
    """Additive mask: 0 where position i may attend to j, -inf above the diagonal."""
    allowed = np.concatenate([np.ones((T, past), dtype=bool), np.tril(np.ones((T, T), dtype=bool))], axis=1)
    return np.where(allowed, 0.0, -np.inf)


def forward(params: dict, x: np.ndarray, n_blocks: int, n_heads: int, causal: bool):
    """Run all blocks and the final LayerNorm; returns ``(h, cache)``."""
    B, T, W = x.shape
    bias = _causal_bias(T) if causal else None
    scale = 1.0 / np.sqrt(W // n_heads)
    caches = []
    for b in range(n_blocks):
        p = f"b{b}."
        a, ln1 = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = a @ params[p + "wqkv"] + params[p + "bqkv"]
        q, k, v = (_split_heads(part, n_heads) for part in np.split(qkv, 3, axis=-1))
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        if bias is not None:
            scores += bias
        probs = softmax(scores)
        o = _merge_heads(probs @ v)
        x1 = x + o @ params[p + "wo"] + params[p + "bo"]
        c, ln2 = layer_norm(x1, params[p + "ln2.g"], params[p + "ln2.b"])
        pre = c @ params[p + "w1"] + params[p + "b1"]
        hid, t = gelu(pre)
        x2 = x1 + hid @ params[p + "w2"] + params[p + "b2"]
        caches.append((a, ln1, q, k, v, probs, o, c, ln2, pre, hid, t))
        x = x2
    h, lnf = layer_norm(x, params["lnf.g"], params["lnf.b"])
    return h, (caches, lnf, scale, n_heads)


def backward(params: dict, dh: np.ndarray, cache, grads: dict) -> np.ndarray:
    """Accumulate block gradients into ``grads``; returns the gradient w.r.t. the block input."""
    caches, lnf, scale, n_heads = cache
    dx, dg, db = layer_norm_backward(dh, lnf)
    grads["lnf.g"] += dg
    grads["lnf.b"] += db
    for b in reversed(range(len(caches))):
        p = f"b{b}."
        a, ln1, q, k, v, probs, o, c, ln2, pre, hid, t = caches[b]
        # MLP branch
        dw, dbias = _linear_grads(hid, dx)
        grads[p + "w2"] += dw
        grads[p + "b2"] += dbias
        dpre = gelu_backward(dx @ params[p + "w2"].T, pre, t)
        dw, dbias = _linear_grads(c, dpre)
        grads[p + "w1"] += dw
        grads[p + "b1"] += dbias
        dc, dg, db = layer_norm_backward(dpre @ params[p + "w1"].T, ln2)
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx1 = dx + dc
        # attention branch
        dw, dbias = _linear_grads(o, dx1)
        grads[p + "wo"] += dw
        grads[p + "bo"] += dbias
        do = _split_heads(dx1 @ params[p + "wo"].T, n_heads)
        dprobs = do @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ do
        dscores = dprobs
        dscores -= np.einsum("bhij,bhij->bhi", dprobs, probs)[..., None]
        dscores *= probs
        dscores *= scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        dw, dbias = _linear_grads(a, dqkv)
        grads[p + "wqkv"] += dw
        grads[p + "bqkv"] += dbias
        da, dg, db = layer_norm_backward(dqkv @ params[p + "wqkv"].T, ln1)
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx1 + da
    return dx


# ---------------------------------------------------------------- incremental decoding


class KVCache:
    """Per-block keys and values for causal decoding one position at a time."""

    def __init__(self, n_blocks: int):
        self.k = [None] * n_blocks
        self.v = [None] * n_blocks


def forward_cached(params: dict, x: np.ndarray, n_blocks: int, n_heads: int, cache: KVCache) -> np.ndarray:
    """Causal forward of new positions ``x`` (B, t, W) appended after the cached ones."""
    B, T, W = x.shape
    past = 0 if cache.k[0] is None else cache.k[0].shape[2]
    scale = 1.0 / np.sqrt(W // n_heads)
    # new position i may see cached positions and new positions <= i
    bias = _causal_bias(T, past)
    for b in range(n_blocks):
        p = f"b{b}."
        a, _ = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = a @ params[p + "wqkv"] + params[p + "bqkv"]
        q, k, v = (_split_heads(part, n_heads) for part in np.split(qkv, 3, axis=-1))
        if past:
            k = np.concatenate([cache.k[b], k], axis=2)
            v = np.concatenate([cache.v[b], v], axis=2)
        cache.k[b], cache.v[b] = k, v
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        scores += bias
        o = _merge_heads(softmax(scores) @ v)
        x = x + o @ params[p + "wo"] + params[p + "bo"]
        c, _ = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        hid, _ = gelu(c @ params[p + "w1"] + params[p + "b1"])
        x = x + hid @ params[p + "w2"] + params[p + "b2"]
    h, _ = layer_norm(x, params["lnf.g"], params["lnf.b"])
    return h
