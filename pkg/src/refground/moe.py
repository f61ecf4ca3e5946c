"""Task-decoupled mixture-of-experts prediction head.

Each task owns a private pool of feed-forward experts, a task embedding and
a linear gate. The gate reads the mean-pooled input concatenated with the
task embedding; the top-K experts run and their outputs are mixed with the
renormalised gate probabilities.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import TextFeatures
from .errors import NonPositiveTemperature, ShapeMismatch, TaskShapeMismatch, WidthMismatch
from .layers import ACTIVATIONS, attention, dense_init, init_attention, zeros
from .tensor import Tensor

TASKS = ("BIC", "IMG", "MLC", "TMG")
HEAD_OUT = {"BIC": 2, "IMG": 4, "MLC": None, "TMG": 2}  # MLC width = num_classes

# how often each (task, expert) was selected; monitors expert collapse
selection_counts: Counter = Counter()


@dataclass
class RoutingDecision:
    p: Tensor  # (B, N) gate distribution
    selected: np.ndarray  # (B, K) expert indices, descending probability
    weights: Tensor  # (B, N) renormalised over selected, zero elsewhere


def init_pool_params(rng: np.random.Generator, task: str, d: int, n_experts: int, n_out: int) -> dict:
    pre = f"moe.{task}"
    p = {
        f"{pre}.task_emb": T.parameter(rng.normal(0.0, 1.0, size=d // 4)),
        f"{pre}.gate.w": dense_init(rng, d + d // 4, n_experts),
        f"{pre}.gate.b": zeros(n_experts),
        f"head.{task}.w": dense_init(rng, d, n_out),
        f"head.{task}.b": zeros(n_out),
    }
    for n in range(n_experts):
        p[f"{pre}.e{n}.w1"] = dense_init(rng, d, 4 * d)
        p[f"{pre}.e{n}.b1"] = zeros(4 * d)
        p[f"{pre}.e{n}.w2"] = dense_init(rng, 4 * d, d)
        p[f"{pre}.e{n}.b2"] = zeros(d)
    return p


def init_teacher_params(rng: np.random.Generator, d: int) -> dict:
    p = {
        "teacher.segment": T.parameter(rng.normal(0.0, 1.0, size=(2, d))),
        "teacher.head.w": dense_init(rng, d, 2),
        "teacher.head.b": zeros(2),
    }
    p.update(init_attention(rng, "teacher.attn", d))
    return p


def n_experts_of(params: dict, task: str) -> int:
    return params[f"moe.{task}.gate.b"].shape[0]


def topk_select(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def route(x: Tensor, task: str, params: dict, k: int) -> RoutingDecision:
    B, _, d = x.shape
    emb = params[f"moe.{task}.task_emb"]
    if params[f"moe.{task}.gate.w"].shape[0] != d + emb.shape[0]:
        raise WidthMismatch(f"{task} gate expects width {params[f'moe.{task}.gate.w'].shape[0] - emb.shape[0]}, got {d}")
    h = T.concat([T.mean_pool(x, axis=1), T.expand(emb, (B, emb.shape[0]))], axis=1)
    p = T.softmax(T.linear(h, params[f"moe.{task}.gate.w"], params[f"moe.{task}.gate.b"]), axis=-1)
    selected = topk_select(p.data, k)
    mask = np.zeros(p.shape)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    kept = T.mul(p, T.constant(mask))
    weights = T.div(kept, T.expand(T.tsum(kept, axis=-1, keepdims=True), kept.shape))
    return RoutingDecision(p, selected, weights)


def expert_forward(x: Tensor, task: str, n: int, params: dict, activation: str = "gelu") -> Tensor:
    pre = f"moe.{task}.e{n}"
    h = ACTIVATIONS[activation](T.linear(x, params[f"{pre}.w1"], params[f"{pre}.b1"]))
    return T.linear(h, params[f"{pre}.w2"], params[f"{pre}.b2"])


def moe_forward(x: Tensor, task: str, params: dict, k: int, activation: str = "gelu"):
    """Returns ``(Y, decision)``; only experts selected by some sample execute."""
    decision = route(x, task, params, k)
    B = x.shape[0]
    out = None
    for n in range(n_experts_of(params, task)):
        rows = np.nonzero((decision.selected == n).any(axis=1))[0]
        if rows.size == 0:
            continue
        selection_counts[(task, n)] += int(rows.size)
        xs = x if rows.size == B else T.getitem(x, rows)
        y = expert_forward(xs, task, n, params, activation)
        w = T.getitem(decision.weights, (rows, n))
        contrib = T.mul(y, T.expand(T.reshape(w, (rows.size, 1, 1)), y.shape))
        if rows.size != B:
            contrib = T.scatter_rows(contrib, rows, B)
        out = contrib if out is None else T.add(out, contrib)
    return out, decision


def task_heads(y: Tensor, task: str, params: dict, L: int | None = None) -> Tensor:
    """BIC (B,2) logits, MLC (B,C) logits, IMG (B,4) sigmoid box, TMG (B,L,2) logits."""
    rows = y.shape[1]
    if task == "TMG":
        if L is not None and rows != L:
            raise TaskShapeMismatch(f"TMG expects {L} token rows, got {rows}")
        return T.linear(y, params["head.TMG.w"], params["head.TMG.b"])
    if rows != 1:
        raise TaskShapeMismatch(f"{task} expects a single CLS row, got {rows}")
    out = T.linear(T.reshape(y, (y.shape[0], y.shape[2])), params[f"head.{task}.w"], params[f"head.{task}.b"])
    return T.sigmoid(out) if task == "IMG" else out


def teacher_forward(tq: TextFeatures, tref: TextFeatures, params: dict, heads: int = 4) -> Tensor:
    """Per-query-token logits (B, L, 2) from joint attention over [T_q; T_ref]."""
    if tq.tokens.shape[-1] != tref.tokens.shape[-1]:
        raise WidthMismatch("teacher inputs differ in width")
    B, n, d = tq.tokens.shape
    seg = params["teacher.segment"]
    xq = T.add_bias(tq.tokens, T.getitem(seg, 0))
    xr = T.add_bias(tref.tokens, T.getitem(seg, 1))
    x = T.concat([xq, xr], axis=1)
    valid = np.concatenate([tq.valid, tref.valid], axis=1)
    out, _ = attention(x, x, params, "teacher.attn", heads, valid)
    h = T.add(x, out)
    return T.linear(h[:, 1:n, :], params["teacher.head.w"], params["teacher.head.b"])


def distill_loss(z_teacher, z_student: Tensor, tau: float, valid: np.ndarray | None = None) -> Tensor:
    """tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau)), averaged over valid tokens then batch.

    The teacher side is a constant: no gradient reaches it.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    zt = z_teacher.data if isinstance(z_teacher, Tensor) else np.asarray(z_teacher, dtype=np.float64)
    if zt.shape != z_student.shape:
        raise ShapeMismatch(f"teacher {zt.shape} vs student {z_student.shape}")
    zs = z_student
    if zs.ndim == 2:
        zt, zs = zt[None], T.reshape(zs, (1,) + zs.shape)
        valid = None if valid is None else np.asarray(valid)[None]
    B, L = zt.shape[:2]
    valid = np.ones((B, L), bool) if valid is None else np.asarray(valid, bool)
    zt_t = zt / tau
    log_pt = zt_t - np.max(zt_t, axis=-1, keepdims=True)
    log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.scale(zs, 1.0 / tau), axis=-1)
    kl = T.tsum(T.mul(T.sub(T.constant(log_pt), log_ps), T.constant(pt)), axis=-1)  # (B, L)
    counts = valid.sum(axis=1)
    used = counts > 0
    if not used.any():
        return T.scale(T.tsum(kl), 0.0)
    w = np.where(valid, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / used.sum()
    return T.scale(T.tsum(T.mul(kl, T.constant(w))), tau * tau)
