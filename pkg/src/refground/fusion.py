"""Authenticity-conditioned cross-attention between a query and its reference.

Text: query tokens attend to the reference caption; the attention map is
supervised toward a target built from exact token matches. Vision: rowwise
feature differences go through a learned transform. A final cross-attention
lets every text row read the visual discrepancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import PAD_ID, TextFeatures, VisualFeatures
from .errors import EmptyValidSet, ShapeMismatch, WidthMismatch
from .layers import ACTIVATIONS, attention, dense_init, grid_sinusoidal, init_attention, sinusoidal, zeros
from .tensor import Tensor


@dataclass
class FusionOutput:
    text_diff: Tensor  # (B, 1 + L, d)
    visual_diff: Tensor  # (B, 1 + P, d)
    fused: Tensor  # (B, 1 + L, d)
    attention: Tensor  # (B, 1 + L, 1 + L_ref), pre-residual text attention


def init_fusion_params(rng: np.random.Generator, d: int) -> dict:
    p = {"acca.v.w": dense_init(rng, d, d), "acca.v.b": zeros(d)}
    p.update(init_attention(rng, "acca.t", d))
    p.update(init_attention(rng, "acca.f", d))
    p.update(init_attention(rng, "acca.j", d))
    return p


def visual_positions(n: int, d: int) -> np.ndarray:
    side = int(round((n - 1) ** 0.5))
    return grid_sinusoidal(side, d) if side * side == n - 1 and d % 4 == 0 else sinusoidal(n, d)


def text_cross_attention(tq: TextFeatures, tref: TextFeatures, params: dict, heads: int = 1):
    """Returns ``(text_diff, A)``; reference pad columns get zero attention.

    The reference CLS column is masked too (its target mass is zero) unless
    the reference has no tokens at all, in which case it is the only key.
    """
    if tq.tokens.shape[-1] != tref.tokens.shape[-1]:
        raise WidthMismatch(f"query width {tq.tokens.shape[-1]} != reference width {tref.tokens.shape[-1]}")
    keys = tref.valid.copy()
    keys[:, 0] = tref.pad_mask.all(axis=1)
    out, a = attention(tq.tokens, tref.tokens, params, "acca.t", heads, keys)
    if heads > 1:
        a = T.mean_pool(a, axis=1)
    return T.add(tq.tokens, out), a


def build_rgas_target(q_ids: np.ndarray, r_ids: np.ndarray, manipulated: np.ndarray) -> np.ndarray:
    """Attention target G of shape (1 + L, 1 + L_ref) for one query/reference pair.

    Authentic query tokens put uniform mass on reference columns holding the
    same id. Manipulated tokens, unmatched tokens, and the CLS row spread
    mass uniformly over every non-pad reference token. Pad rows stay zero.
    """
    q_ids = np.asarray(q_ids)
    r_ids = np.asarray(r_ids)
    manipulated = np.asarray(manipulated, dtype=bool)
    L, Lr = len(q_ids), len(r_ids)
    G = np.zeros((1 + L, 1 + Lr))
    r_valid = r_ids != PAD_ID
    if not r_valid.any():
        return G
    broad = np.concatenate([[0.0], r_valid / r_valid.sum()])
    G[0] = broad
    for i, tok in enumerate(q_ids):
        if tok == PAD_ID:
            continue
        matches = (r_ids == tok) & r_valid
        if manipulated[i] or not matches.any():
            G[1 + i] = broad
        else:
            G[1 + i, 1:] = matches / matches.sum()
    return G


def rgas_valid(q_ids: np.ndarray, r_ids: np.ndarray) -> np.ndarray:
    """Rows of A that enter the loss: CLS and non-pad query tokens (needs a non-empty reference)."""
    q_ids = np.atleast_2d(q_ids)
    r_ids = np.atleast_2d(r_ids)
    has_ref = (r_ids != PAD_ID).any(axis=1, keepdims=True)
    rows = np.concatenate([np.ones((q_ids.shape[0], 1), bool), q_ids != PAD_ID], axis=1)
    return rows & has_ref


def rgas_loss(A: Tensor, G: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean over valid rows of KL(G_i || A_i); batched inputs average per sample first."""
    G = np.asarray(G, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if A.shape != G.shape:
        raise ShapeMismatch(f"attention {A.shape} vs target {G.shape}")
    if A.ndim == 2:
        A = T.reshape(A, (1,) + A.shape)
        G, valid = G[None], valid[None]
    counts = valid.sum(axis=1)
    if not counts.any():
        raise EmptyValidSet("no valid query rows for attention supervision")
    row_w = np.where(valid, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / (counts > 0).sum()
    support = (G > 0) & valid[:, :, None]
    # log A only where the target has mass; elsewhere the term is 0 * log(1)
    safe = T.add(T.mul(A, T.constant(support.astype(float))), T.constant((~support).astype(float)))
    log_g = np.where(support, np.log(np.where(support, G, 1.0)), 0.0)
    kl_rows = T.tsum(T.mul(T.sub(T.constant(log_g), T.log(safe)), T.constant(np.where(support, G, 0.0))), axis=-1)
    return T.tsum(T.mul(kl_rows, T.constant(row_w)))


def visual_discrepancy(vq: VisualFeatures, vref: VisualFeatures, params: dict, activation: str = "gelu") -> Tensor:
    if vq.tokens.shape != vref.tokens.shape:
        raise ShapeMismatch(f"visual features {vq.tokens.shape} vs {vref.tokens.shape}")
    diff = T.sub(vq.tokens, vref.tokens)
    return ACTIVATIONS[activation](T.linear(diff, params["acca.v.w"], params["acca.v.b"]))


def cross_modal_fuse(text_diff: Tensor, visual_diff: Tensor, params: dict, heads: int = 1) -> Tensor:
    """Text rows query the visual discrepancy rows (plus their 2-D grid positions)."""
    if text_diff.shape[-1] != visual_diff.shape[-1]:
        raise WidthMismatch(f"text width {text_diff.shape[-1]} != visual width {visual_diff.shape[-1]}")
    n, d = visual_diff.shape[1], visual_diff.shape[2]
    keys = T.add_bias(visual_diff, T.constant(visual_positions(n, d)))
    out, _ = attention(text_diff, keys, params, "acca.f", heads)
    return T.add(text_diff, out)


def joint_reasoning(x: Tensor, params: dict, heads: int, valid: np.ndarray) -> Tensor:
    """Self-attention over the fused rows so the CLS row can gather token-level evidence."""
    out, _ = attention(x, x, params, "acca.j", heads, valid)
    return T.add(x, out)


def acca_forward(tq, tref, vq, vref, params: dict, acca_heads: int = 1, fuse_heads: int = 1,
                 activation: str = "gelu", joint_heads: int = 0):
    """Full fusion; ``joint_heads = 0`` skips the closing self-attention block."""
    text_diff, a = text_cross_attention(tq, tref, params, acca_heads)
    visual_diff = visual_discrepancy(vq, vref, params, activation)
    fused = cross_modal_fuse(text_diff, visual_diff, params, fuse_heads)
    if joint_heads:
        fused = joint_reasoning(fused, params, joint_heads, tq.valid)
    return FusionOutput(text_diff, visual_diff, fused, a)
