"""Toy visual and text encoders.

Both follow the same recipe: embed patches or tokens, add sinusoidal
positions, prepend a learned CLS row, run one self-attention block with a
residual, then a linear head. Query and reference share the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .errors import BadGridShape, TokenOutOfVocab
from .layers import attention, dense_init, init_attention, sinusoidal, zeros
from .tensor import Tensor

PAD_ID = 0


@dataclass
class VisualFeatures:
    tokens: Tensor  # (B, 1 + P, d): CLS row then patch rows
    embedding: Tensor  # (B, d), unit-norm copy of the CLS row


@dataclass
class TextFeatures:
    tokens: Tensor  # (B, 1 + L, d)
    pad_mask: np.ndarray  # (B, L) bool, True where id == PAD_ID

    @property
    def valid(self) -> np.ndarray:
        """(B, 1 + L) bool: CLS plus non-pad tokens."""
        return np.concatenate([np.ones((self.pad_mask.shape[0], 1), bool), ~self.pad_mask], axis=1)


def init_encoder_params(rng: np.random.Generator, cfg: ExperimentConfig) -> dict:
    d = cfg.d
    patch_dim = cfg.patch_size**2 * cfg.channels
    p = {
        "img.patch.w": dense_init(rng, patch_dim, d),
        "img.patch.b": zeros(d),
        "img.cls": T.parameter(rng.normal(0.0, 1.0, size=d)),
        "img.head.w": dense_init(rng, d, d),
        "img.head.b": zeros(d),
        "txt.emb": T.parameter(rng.normal(0.0, 1.0, size=(cfg.vocab, d))),
        "txt.cls": T.parameter(rng.normal(0.0, 1.0, size=d)),
        "txt.head.w": dense_init(rng, d, d),
        "txt.head.b": zeros(d),
    }
    p.update(init_attention(rng, "img.attn", d))
    p.update(init_attention(rng, "txt.attn", d))
    return p


def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, num_patches, patch*patch*C), row-major patch order."""
    B, H, W, C = grids.shape
    if H % patch or W % patch:
        raise BadGridShape(f"grid {H}x{W} not divisible by patch size {patch}")
    g = grids.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(B, (H // patch) * (W // patch), patch * patch * C)


def _unit_rows(x: Tensor) -> Tensor:
    norm = T.sqrt(T.tsum(T.mul(x, x), axis=-1, keepdims=True))
    return T.div(x, T.expand(norm, x.shape))


def _block(x: Tensor, params: dict, prefix: str, heads: int, key_valid, use_attention: bool) -> Tensor:
    if use_attention:
        out, _ = attention(x, x, params, f"{prefix}.attn", heads, key_valid)
        x = T.add(x, out)
    return T.linear(x, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])


def encode_images(grids: np.ndarray, params: dict, cfg: ExperimentConfig, use_attention: bool = True) -> VisualFeatures:
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 4 or grids.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise BadGridShape(f"expected (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {grids.shape}")
    B = grids.shape[0]
    patches = patchify(grids, cfg.patch_size)
    if patches.shape[1] != cfg.P:
        raise BadGridShape(f"grid yields {patches.shape[1]} patches, expected {cfg.P}")
    pos = sinusoidal(1 + cfg.P, cfg.d)
    x = T.linear(T.constant(patches), params["img.patch.w"], params["img.patch.b"])
    x = T.add_bias(x, T.constant(pos[1:]))
    cls = T.expand(T.add(params["img.cls"], T.constant(pos[0])), (B, 1, cfg.d))
    x = T.concat([cls, x], axis=1)
    tokens = _block(x, params, "img", cfg.heads, None, use_attention)
    embedding = _unit_rows(T.reshape(tokens[:, 0, :], (B, cfg.d)))
    return VisualFeatures(tokens, embedding)


def encode_texts(ids: np.ndarray, params: dict, cfg: ExperimentConfig, use_attention: bool = True) -> TextFeatures:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != cfg.L:
        raise TokenOutOfVocab(f"expected (B, {cfg.L}) token ids, got {ids.shape}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise TokenOutOfVocab(f"token ids must lie in [0, {cfg.vocab})")
    B = ids.shape[0]
    pad_mask = ids == PAD_ID
    valid = np.concatenate([np.ones((B, 1), bool), ~pad_mask], axis=1)
    pos = sinusoidal(1 + cfg.L, cfg.d)
    x = T.add_bias(T.getitem(params["txt.emb"], ids), T.constant(pos[1:]))
    cls = T.expand(T.add(params["txt.cls"], T.constant(pos[0])), (B, 1, cfg.d))
    x = T.concat([cls, x], axis=1)
    out = _block(x, params, "txt", cfg.heads, valid, use_attention)
    # pad rows carry the pad embedding itself
    keep = np.broadcast_to(valid[:, :, None], out.shape).astype(np.float64)
    pad_vec = T.expand(T.getitem(params["txt.emb"], PAD_ID), out.shape)
    tokens = T.add(T.mul(out, T.constant(keep)), T.mul(pad_vec, T.constant(1.0 - keep)))
    return TextFeatures(tokens, pad_mask)


def encode_image(img: np.ndarray, params: dict, cfg: ExperimentConfig, use_attention: bool = True) -> VisualFeatures:
    """Single-image convenience wrapper; tensors keep a leading batch axis of 1."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise BadGridShape(f"expected (H, W, C) image, got shape {img.shape}")
    return encode_images(img[None], params, cfg, use_attention)


def encode_text(ids: np.ndarray, params: dict, cfg: ExperimentConfig, use_attention: bool = True) -> TextFeatures:
    return encode_texts(np.asarray(ids)[None], params, cfg, use_attention)
