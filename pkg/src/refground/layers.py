"""Parameter initialisation and the attention block shared by every module."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import WidthMismatch
from .tensor import Tensor

ACTIVATIONS = {"gelu": T.gelu, "relu": T.relu, "linear": T.identity}


def dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return T.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return T.parameter(np.zeros(shape))


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def grid_sinusoidal(side: int, d: int) -> np.ndarray:
    """(1 + side**2, d) codes for a row-major patch grid: column in the first
    half of the width, row in the second; row 0 (the CLS slot) is zero."""
    half = sinusoidal(side, d // 2)
    rows, cols = np.divmod(np.arange(side * side), side)
    out = np.zeros((1 + side * side, d))
    out[1:, : d // 2] = half[cols]
    out[1:, d // 2 :] = half[rows]
    return out


def init_attention(rng, prefix: str, d: int) -> dict:
    return {f"{prefix}.{name}": dense_init(rng, d, d) for name in ("wq", "wk", "wv", "wo")}


def attention(xq: Tensor, xkv: Tensor, params: dict, prefix: str, heads: int, key_valid=None):
    """Scaled dot-product attention, queries from ``xq``, keys/values from ``xkv``.

    ``key_valid`` is a boolean (B, m) array; invalid keys get exactly zero
    weight. Returns the projected output (B, n, d) and the attention
    weights, shaped (B, n, m) for one head and (B, h, n, m) otherwise.
    """
    B, n, d = xq.shape
    m = xkv.shape[1]
    if xkv.shape[2] != d:
        raise WidthMismatch(f"query width {d} != key width {xkv.shape[2]}")
    q = T.matmul(xq, params[f"{prefix}.wq"])
    k = T.matmul(xkv, params[f"{prefix}.wk"])
    v = T.matmul(xkv, params[f"{prefix}.wv"])
    dh = d // heads
    if heads == 1:
        mask = None if key_valid is None else np.broadcast_to(key_valid[:, None, :], (B, n, m))
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
        a = T.softmax(scores, -1, mask)
        out = T.matmul(a, v)
    else:
        q = T.transpose(T.reshape(q, (B, n, heads, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (B, m, heads, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, (B, m, heads, dh)), (0, 2, 1, 3))
        mask = None if key_valid is None else np.broadcast_to(key_valid[:, None, None, :], (B, heads, n, m))
        a = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh)), -1, mask)
        out = T.reshape(T.transpose(T.matmul(a, v), (0, 2, 1, 3)), (B, n, d))
    return T.matmul(out, params[f"{prefix}.wo"]), a
