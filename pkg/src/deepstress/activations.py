"""Hidden-layer nonlinearities: ReLU, inverted dropout and LWTA blocks.

Each forward helper has a matching ``*_backward`` used by the network code.
"""

from __future__ import annotations

import numpy as np


def relu(v):
    return np.maximum(v, 0.0)


def relu_backward(dout, z):
    # subgradient at 0 is 0
    return dout * (z > 0)


def dropout_mask(shape, rate: float, rng) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout_apply(v, rate: float, rng=None, mode: str = "train", mask=None):
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    v = np.asarray(v, dtype=float)
    if mode == "infer" or rate == 0.0:
        return v
    if mask is None:
        mask = dropout_mask(v.shape, rate, rng)
    return v * mask


def softmax(h, axis: int = -1):
    h = np.asarray(h, dtype=float)
    z = h - np.max(h, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def gumbel(shape, rng) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def _blocks(h, block_size: int):
    h = np.asarray(h, dtype=float)
    if h.shape[-1] % block_size:
        raise ValueError(f"width {h.shape[-1]} is not a multiple of block size {block_size}")
    return h.reshape(h.shape[:-1] + (h.shape[-1] // block_size, block_size))


def winner_probabilities(h, block_size: int):
    """Per-block softmax over the competing units."""
    return softmax(_blocks(h, block_size)).reshape(np.shape(h))


def lwta_forward(h, block_size: int, tau: float = 0.67, rng=None, mode: str = "infer",
                 noise=None):
    """Local winner-takes-all over consecutive blocks of ``block_size`` units.

    Infer mode keeps each block's largest unit (lowest index on ties) and
    zeroes the rest. Train mode uses the relaxed selection
    ``xi = softmax(h / tau + G)`` with Gumbel noise G, so that the output
    ``h * xi`` is differentiable and collapses onto the argmax as tau -> 0.

    Returns ``(output, xi)``; ``xi`` is needed by :func:`lwta_backward`.
    """
    hb = _blocks(h, block_size)
    if mode == "infer":
        win = np.argmax(hb, axis=-1)
        xi = np.zeros_like(hb)
        np.put_along_axis(xi, win[..., None], 1.0, axis=-1)
    else:
        if not tau > 0:
            raise ValueError("tau must be positive in train mode")
        if noise is None:
            noise = gumbel(hb.shape, rng)
        xi = softmax(hb / tau + np.reshape(noise, hb.shape))
    xi = xi.reshape(np.shape(h))
    return np.asarray(h) * xi, xi


def lwta_backward(dout, h, xi, block_size: int, tau: float | None, mode: str):
    if mode == "infer":
        return dout * xi
    g = _blocks(dout * h, block_size)
    xb = _blocks(xi, block_size)
    inner = np.sum(g * xb, axis=-1, keepdims=True)
    dsel = (xb * (g - inner) / tau).reshape(np.shape(h))
    return dout * xi + dsel


def relaxed_winners(h, block_size: int, tau: float, rng) -> np.ndarray:
    """Index of the largest relaxed weight per block (for agreement checks)."""
    _, xi = lwta_forward(h, block_size, tau, rng, mode="train")
    return np.argmax(_blocks(xi, block_size), axis=-1)
