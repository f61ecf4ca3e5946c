"""Full detector: encoders -> reference fusion -> task experts, plus the teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .encoders import TextFeatures, VisualFeatures, encode_images, encode_texts, init_encoder_params
from .fusion import FusionOutput, acca_forward, build_rgas_target, init_fusion_params, rgas_loss, rgas_valid
from .moe import TASKS, init_pool_params, init_teacher_params, moe_forward, task_heads, teacher_forward, distill_loss
from .objectives import LossBundle, Predictions, Targets, task_losses, token_loss, zero_loss
from .rng import stream
from .store import vrc_loss
from .tensor import Tensor


def init_params(cfg: ExperimentConfig) -> dict:
    p = {}
    p.update(init_encoder_params(stream(cfg.seed, "init-encoders"), cfg))
    p.update(init_fusion_params(stream(cfg.seed, "init-fusion"), cfg.d))
    outs = {"BIC": 2, "IMG": 4, "MLC": cfg.num_classes, "TMG": 2}
    for task in TASKS:
        p.update(init_pool_params(stream(cfg.seed, f"init-moe-{task}"), task, cfg.d, cfg.N_experts, outs[task]))
    p.update(init_teacher_params(stream(cfg.seed, "init-teacher"), cfg.d))
    return p


def is_teacher_param(name: str) -> bool:
    return name.startswith("teacher.")


@dataclass
class Batch:
    q_images: np.ndarray  # (B, H, W, C)
    q_ids: np.ndarray  # (B, L)
    r_images: np.ndarray
    r_ids: np.ndarray
    labels: np.ndarray  # (B,)
    classes: np.ndarray  # (B, C)
    boxes: np.ndarray  # (B, 4), NaN where absent
    token_mask: np.ndarray  # (B, L) bool

    @property
    def size(self) -> int:
        return self.q_ids.shape[0]

    def targets(self) -> Targets:
        return Targets(self.labels, self.classes, self.boxes, self.token_mask, self.q_ids != 0)


def make_batch(samples, references) -> Batch:
    return Batch(
        q_images=np.stack([s.image for s in samples]),
        q_ids=np.stack([s.caption for s in samples]),
        r_images=np.stack([r.image for r in references]),
        r_ids=np.stack([r.caption for r in references]),
        labels=np.array([s.binary_label for s in samples], dtype=np.int64),
        classes=np.stack([np.asarray(s.class_vector, dtype=np.int64) for s in samples]),
        boxes=np.array([s.box if s.box is not None else (np.nan,) * 4 for s in samples], dtype=np.float64),
        token_mask=np.stack([np.asarray(s.token_mask, bool) for s in samples]),
    )


@dataclass
class ForwardOutput:
    preds: Predictions
    fusion: FusionOutput
    z_teacher: Tensor
    query_embedding: Tensor
    reference_embedding: Tensor
    routing: dict


def _blank_text(like: TextFeatures) -> TextFeatures:
    return TextFeatures(T.constant(np.zeros(like.tokens.shape)), np.zeros_like(like.pad_mask))


def forward(params: dict, cfg: ExperimentConfig, batch: Batch) -> ForwardOutput:
    vq = encode_images(batch.q_images, params, cfg)
    tq = encode_texts(batch.q_ids, params, cfg)
    if cfg.use_reference:
        vr = encode_images(batch.r_images, params, cfg)
        tr = encode_texts(batch.r_ids, params, cfg)
    else:
        # reference features zeroed: the detector sees only the query
        vr = VisualFeatures(T.constant(np.zeros(vq.tokens.shape)), vq.embedding)
        tr = _blank_text(tq)
    fusion = acca_forward(tq, tr, vq, vr, params, cfg.acca_heads, cfg.fuse_heads, cfg.activation, cfg.joint_heads)
    x = fusion.fused
    x_cls, x_tok = x[:, 0:1, :], x[:, 1:, :]
    outs, routing = {}, {}
    for task in TASKS:
        y, decision = moe_forward(x_tok if task == "TMG" else x_cls, task, params, cfg.K_experts, cfg.activation)
        outs[task] = task_heads(y, task, params, cfg.L)
        routing[task] = decision
    preds = Predictions(outs["BIC"], outs["MLC"], outs["IMG"], outs["TMG"])
    frozen_q = TextFeatures(tq.tokens.detach(), tq.pad_mask)
    frozen_r = TextFeatures(tr.tokens.detach(), tr.pad_mask)
    z_teacher = teacher_forward(frozen_q, frozen_r, params, cfg.heads)
    return ForwardOutput(preds, fusion, z_teacher, vq.embedding, vr.embedding, routing)


def compute_losses(out: ForwardOutput, batch: Batch, cfg: ExperimentConfig, teacher_logits=None):
    """Returns ``(bundle, teacher_loss)``.

    ``teacher_logits`` overrides the teacher output used for distillation
    (finite-difference checks freeze it to honour the stop-gradient).
    """
    tgt = batch.targets()
    l_bic, l_mlc, l_img, l_tmg = task_losses(out.preds, tgt, cfg.lambda_l1, cfg.lambda_giou, cfg.w_pos)
    if cfg.use_reference:
        l_vrc = vrc_loss(out.query_embedding, out.reference_embedding, cfg.temperature_vrc)
        G = np.stack([build_rgas_target(q, r, m) for q, r, m in zip(batch.q_ids, batch.r_ids, batch.token_mask)])
        l_rgas = rgas_loss(out.fusion.attention, G, rgas_valid(batch.q_ids, batch.r_ids))
    else:
        l_vrc, l_rgas = zero_loss(), zero_loss()
    zt = out.z_teacher.data if teacher_logits is None else teacher_logits
    l_distill = distill_loss(zt, out.preds.tmg, cfg.tau, tgt.token_valid)
    bundle = LossBundle(l_bic, l_mlc, l_img, l_tmg, l_vrc, l_rgas, l_distill, cfg.alpha, cfg.beta, cfg.tau)
    teacher = token_loss(out.z_teacher, tgt.token_mask, tgt.token_valid, cfg.w_pos)
    return bundle, teacher
