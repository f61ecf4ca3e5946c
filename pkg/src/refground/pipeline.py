"""Inference: embed, retrieve a reference per query, predict, score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .encoders import encode_images
from .metrics import accuracy, grounding_metrics, multilabel_metrics, rank_metrics, token_metrics
from .model import forward, make_batch
from .objectives import image_manipulated
from .store import Gallery, ReferenceRecord, build_gallery, retrieve_topk

EVAL_BATCH = 64


def embed_images(params: dict, cfg: ExperimentConfig, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(encode_images(images[i : i + batch_size], params, cfg).embedding.data)
    return np.concatenate(out) if out else np.zeros((0, cfg.d))


def build_reference_gallery(params: dict, cfg: ExperimentConfig, records) -> Gallery:
    records = list(records)
    emb = embed_images(params, cfg, np.stack([r.image for r in records]))
    embedded = [ReferenceRecord(r.id, r.image, r.caption, e, r.partition) for r, e in zip(records, emb)]
    return build_gallery(embedded, cfg.index_kind, cfg.num_partitions, cfg.seed)


@dataclass
class Prediction:
    sample_id: int
    score: float  # probability of "manipulated"
    verdict: int
    class_probs: np.ndarray
    box: np.ndarray
    token_mask: np.ndarray
    retrieved: list  # [(id, similarity)]
    anchor_id: int


@dataclass
class EvalResult:
    metrics: dict
    predictions: list = field(default_factory=list)


def predict(params: dict, cfg: ExperimentConfig, samples, gallery: Gallery, skip_top: int | None = None) -> list:
    """One :class:`Prediction` per sample; the anchor is rank ``skip_top`` of the retrieved list."""
    skip = cfg.skip_top if skip_top is None else skip_top
    emb = embed_images(params, cfg, np.stack([s.image for s in samples]))
    hits = [retrieve_topk(gallery, e, cfg.K_retrieval, cfg.probes if cfg.index_kind == "partitioned" else None) for e in emb]
    anchors = [h.ids[min(skip, len(h) - 1)] for h in hits]
    preds = []
    with T.no_grad():
        for i in range(0, len(samples), EVAL_BATCH):
            chunk = samples[i : i + EVAL_BATCH]
            refs = [gallery.record(a) for a in anchors[i : i + EVAL_BATCH]]
            out = forward(params, cfg, make_batch(chunk, refs)).preds
            bic = out.bic.data
            p_manip = np.exp(bic[:, 1] - np.logaddexp(bic[:, 0], bic[:, 1]))
            cls = 1.0 / (1.0 + np.exp(-out.mlc.data))
            tok = out.tmg.data[..., 1] > out.tmg.data[..., 0]
            for j, s in enumerate(chunk):
                h = hits[i + j]
                preds.append(
                    Prediction(
                        sample_id=s.id,
                        score=float(p_manip[j]),
                        verdict=int(p_manip[j] > 0.5),
                        class_probs=cls[j],
                        box=out.img.data[j],
                        token_mask=tok[j] & (s.caption != 0),
                        retrieved=list(zip(h.ids, h.similarities)),
                        anchor_id=anchors[i + j],
                    )
                )
    return preds


def score(samples, preds) -> dict:
    labels = np.array([s.binary_label for s in samples])
    scores = np.array([p.score for p in preds])
    m = {"n_samples": len(samples), "ACC": accuracy([p.verdict for p in preds], labels)}
    if labels.any() and not labels.all():
        m["AUC"], m["EER"] = rank_metrics(scores, labels)
    classes = np.stack([np.asarray(s.class_vector, bool) for s in samples])
    if classes.any():
        m["mAP"], m["CF1"], m["OF1"] = multilabel_metrics(np.stack([p.class_probs for p in preds]), classes)
    img = image_manipulated(classes)
    if img.any():
        idx = np.nonzero(img)[0]
        m["IoU_m"], m["IoU_50"], m["IoU_75"] = grounding_metrics(
            [preds[i].box for i in idx], [samples[i].box for i in idx]
        )
    valid = np.stack([s.caption != 0 for s in samples])
    prf = token_metrics(np.stack([p.token_mask for p in preds]), np.stack([s.token_mask for s in samples]), valid)
    m["Precision"], m["Recall"], m["F1"] = prf.precision, prf.recall, prf.f1
    if prf.undefined:
        m["token_undefined"] = ",".join(sorted(prf.undefined))
    m["ACC_tok"] = float((np.stack([p.token_mask for p in preds]) == np.stack([s.token_mask for s in samples]))[valid].mean())
    m["retrieval_top1_source"] = float(np.mean([p.retrieved[0][0] == s.source_reference_id for s, p in zip(samples, preds)]))
    return m


def evaluate(params: dict, cfg: ExperimentConfig, samples, gallery: Gallery, skip_top: int | None = None) -> EvalResult:
    preds = predict(params, cfg, samples, gallery, skip_top)
    return EvalResult(score(samples, preds), preds)
