"""Optimisers, the training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .data import Dataset, pairing_map
from .errors import BadMagic, ConfigHashMismatch, PartitionViolation, TruncatedFile, VersionMismatch
from .model import compute_losses, forward, init_params, make_batch
from .objectives import total_loss
from .pipeline import embed_images
from .rng import stream
from .store import MemoryBank

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RVCK"
CKPT_VERSION = 1


class Optimizer:
    """SGD with momentum, or Adam; state is a dict of named float64 buffers."""

    def __init__(self, params: dict, kind: str = "sgd", lr: float = 3e-3, momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip: float = 0.0, weight_decay: float = 0.0):
        self.params = params
        self.kind, self.lr, self.momentum, self.clip = kind, lr, momentum, clip
        self.weight_decay = weight_decay
        self.betas, self.eps = betas, eps
        self.step_count = 0
        self.state = {}

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values() if p.grad is not None)))

    def step(self):
        self.step_count += 1
        factor = 1.0
        if self.clip > 0:
            norm = self.grad_norm()
            if norm > self.clip:
                factor = self.clip / norm
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            g = g * factor
            if self.weight_decay and p.data.ndim >= 2:
                # decoupled decay on weight matrices only
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            if self.kind == "sgd":
                buf = self.state.get(f"{name}.m")
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.state[f"{name}.m"] = buf
                p.data = p.data - self.lr * buf
            else:
                b1, b2 = self.betas
                m = self.state.get(f"{name}.m", np.zeros_like(g))
                v = self.state.get(f"{name}.v", np.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[f"{name}.m"], self.state[f"{name}.v"] = m, v
                mhat = m / (1 - b1**self.step_count)
                vhat = v / (1 - b2**self.step_count)
                p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def audit_isolation(dataset: Dataset) -> list:
    bank = MemoryBank(dataset.references, pairing_map(dataset.train))
    return bank.audit()


@dataclass
class TrainState:
    params: dict
    optimizer: Optimizer
    epoch: int = 0
    history: list = field(default_factory=list)  # one dict of mean losses per epoch


def new_state(cfg: ExperimentConfig) -> TrainState:
    params = init_params(cfg)
    return TrainState(params, Optimizer(params, cfg.optimizer, cfg.lr, cfg.momentum, clip=cfg.grad_clip, weight_decay=cfg.weight_decay))


def train_step(state: TrainState, cfg: ExperimentConfig, batch) -> dict:
    out = forward(state.params, cfg, batch)
    bundle, teacher = compute_losses(out, batch, cfg)
    loss = total_loss(bundle)
    objective = loss + teacher
    state.optimizer.zero_grad()
    T.backward(objective)
    state.optimizer.step()
    row = bundle.components()
    row["l_teacher"] = float(teacher.data)
    row["total"] = float(loss.data)
    return row


def scheduled_lr(cfg: ExperimentConfig, progress: float) -> float:
    """Learning rate at ``progress`` epochs into training (fractional)."""
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress / max(cfg.epochs, 1), 1.0)))
    return cfg.lr


def run_epochs(state: TrainState, cfg: ExperimentConfig, dataset: Dataset, until: int | None = None,
               on_epoch=None) -> TrainState:
    """Train from ``state.epoch`` up to ``until`` (default ``cfg.epochs``)."""
    bank = MemoryBank(dataset.references, pairing_map(dataset.train))
    problems = bank.audit()
    if problems:
        raise PartitionViolation(f"{len(problems)} training samples break reference isolation; first: {problems[0]}")
    samples = dataset.train
    until = cfg.epochs if until is None else until
    while state.epoch < until:
        started = time.perf_counter()
        bank.refresh(lambda imgs: embed_images(state.params, cfg, imgs))
        order = stream(cfg.seed, f"shuffle-epoch-{state.epoch}").permutation(len(samples))
        rows = []
        for i in range(0, len(order), cfg.batch_size):
            chunk = [samples[j] for j in order[i : i + cfg.batch_size]]
            if len(chunk) < 2:
                continue
            state.optimizer.lr = scheduled_lr(cfg, state.epoch + i / len(order))
            batch = make_batch(chunk, [bank.pair(s.id) for s in chunk])
            rows.append(train_step(state, cfg, batch))
        summary = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        summary["epoch"] = state.epoch + 1
        summary["seconds"] = time.perf_counter() - started
        state.history.append(summary)
        state.epoch += 1
        log.info("epoch %d total %.4f (%.1fs)", state.epoch, summary["total"], summary["seconds"])
        if on_epoch is not None:
            on_epoch(state, summary)
    return state


def train(cfg: ExperimentConfig, dataset: Dataset, on_epoch=None) -> TrainState:
    return run_epochs(new_state(cfg), cfg, dataset, on_epoch=on_epoch)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState, cfg: ExperimentConfig) -> None:
    names = sorted(state.params)
    opt_names = sorted(state.optimizer.state)
    header = {
        "params": [[n, list(state.params[n].shape)] for n in names],
        "optimizer": {
            "kind": state.optimizer.kind,
            "step": state.optimizer.step_count,
            "buffers": [[n, list(state.optimizer.state[n].shape)] for n in opt_names],
        },
        "epoch": state.epoch,
        "history": state.history,
        "config": cfg.to_dict(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(bytes.fromhex(cfg.arch_hash()))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state.params[n].data, dtype="<f8").tobytes())
        for n in opt_names:
            fh.write(np.ascontiguousarray(state.optimizer.state[n], dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint_config(path) -> ExperimentConfig:
    """The config stored in a checkpoint header, without loading any arrays."""
    with open(path, "rb") as fh:
        head = fh.read(48)
        if len(head) < 48:
            raise TruncatedFile(f"{path}: truncated header")
        if head[:4] != CKPT_MAGIC:
            raise BadMagic(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<Q", head[40:48])
        blob = fh.read(hlen)
    if len(blob) < hlen:
        raise TruncatedFile(f"{path}: truncated header")
    return ExperimentConfig.from_dict(json.loads(blob)["config"])


def load_checkpoint(path, cfg: ExperimentConfig) -> TrainState:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"{path}: truncated at byte {len(buf)}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise BadMagic(f"{path} is not a checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    stored_hash = take(32).hex()
    if stored_hash != cfg.arch_hash():
        raise ConfigHashMismatch("checkpoint was written under a different model configuration")
    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(take(hlen))

    def read_array(shape):
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    params = {n: T.parameter(read_array(shape)) for n, shape in header["params"]}
    opt_h = header["optimizer"]
    opt = Optimizer(params, opt_h["kind"], cfg.lr, cfg.momentum, clip=cfg.grad_clip, weight_decay=cfg.weight_decay)
    opt.step_count = opt_h["step"]
    opt.state = {n: read_array(shape) for n, shape in opt_h["buffers"]}
    if pos != len(buf):
        raise TruncatedFile(f"{path}: {len(buf) - pos} trailing bytes")
    return TrainState(params, opt, header["epoch"], header.get("history", []))
