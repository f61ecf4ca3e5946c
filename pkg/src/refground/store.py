"""Authentic reference library: training memory bank and inference gallery.

Embeddings are held at float32 precision (stored in float64 arrays) so a
gallery written to disk and read back is bitwise identical to the one in
memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    BadMagic,
    BatchTooSmall,
    DuplicateId,
    EmptyGallery,
    EmptyLibrary,
    NaNQuery,
    PartitionViolation,
    TruncatedFile,
    UnknownSample,
    UnnormalizedInput,
    VersionMismatch,
)
from .rng import stream
from .tensor import Tensor

GALLERY_MAGIC = b"RVGL"
GALLERY_VERSION = 1
KMEANS_ITERS = 25
NORM_TOL = 1e-5


@dataclass
class ReferenceRecord:
    id: int
    image: np.ndarray  # (H, W, C)
    caption: np.ndarray  # (L,) token ids
    embedding: np.ndarray | None = None  # (d,) unit norm
    partition: str = "train"


@dataclass
class RetrievalResult:
    ids: list
    similarities: list

    def __len__(self):
        return len(self.ids)


@dataclass
class Gallery:
    matrix: np.ndarray  # (count, d), row i belongs to records[i]
    records: list
    index_kind: str = "flat"
    centroids: np.ndarray | None = None
    members: list = field(default_factory=list)  # row indices per partition
    _unit: np.ndarray | None = None
    _ids: np.ndarray | None = None

    def __post_init__(self):
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        self._unit = self.matrix / np.where(norms > 0, norms, 1.0)
        self._ids = np.array([r.id for r in self.records], dtype=np.int64)
        self._by_id = {r.id: r for r in self.records}

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def record(self, rid: int) -> ReferenceRecord:
        return self._by_id[rid]


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = KMEANS_ITERS):
    """Lloyd's k-means with a fixed seed; returns (centroids, assignment)."""
    rng = stream(seed, "gallery-kmeans")
    centroids = x[np.sort(rng.choice(len(x), size=k, replace=False))].copy()
    assign = np.zeros(len(x), dtype=np.int64)
    for _ in range(iters):
        assign = _nearest(x, centroids)
        for c in range(k):
            rows = assign == c
            if rows.any():
                centroids[c] = x[rows].mean(axis=0)
    return centroids, _nearest(x, centroids)


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(1)[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def build_gallery(records, index_kind: str = "flat", num_partitions: int = 8, seed: int = 0) -> Gallery:
    records = sorted(records, key=lambda r: r.id)
    if not records:
        raise EmptyLibrary("cannot index an empty reference library")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DuplicateId("reference ids must be unique")
    matrix = _f32(np.stack([r.embedding for r in records]))
    if np.abs(np.linalg.norm(matrix, axis=1) - 1.0).max() > NORM_TOL:
        raise UnnormalizedInput("gallery embeddings must be L2-normalised")
    records = [replace(r, embedding=row) for r, row in zip(records, matrix)]
    if index_kind == "flat":
        return Gallery(matrix, records, "flat")
    k = min(num_partitions, len(records))
    centroids, assign = kmeans(matrix, k, seed)
    members = [np.nonzero(assign == c)[0] for c in range(k)]
    return Gallery(matrix, records, "partitioned", centroids, members)


def retrieve_topk(gallery: Gallery, query, K: int = 4, probes: int | None = None) -> RetrievalResult:
    """Top-K cosine neighbours; similarity ties resolve to the smaller id."""
    if gallery is None or gallery.count == 0:
        raise EmptyGallery("gallery holds no records")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(q)
    if not np.isfinite(q).all() or norm == 0:
        raise NaNQuery("query embedding is non-finite or zero")
    q = q / norm
    if gallery.index_kind == "partitioned" and probes is not None and probes < len(gallery.members):
        d2 = ((gallery.centroids - q) ** 2).sum(1)
        near = np.argsort(d2, kind="stable")[:probes]
        rows = np.sort(np.concatenate([gallery.members[c] for c in near]))
    else:
        rows = np.arange(gallery.count)
    sims = np.clip(gallery._unit[rows] @ q, -1.0, 1.0)
    ids = gallery._ids[rows]
    order = np.lexsort((ids, -sims))[: max(int(K), 1)]
    return RetrievalResult([int(i) for i in ids[order]], [float(s) for s in sims[order]])


def retrieve_batch(gallery: Gallery, queries: np.ndarray, K: int, probes: int | None = None) -> list:
    return [retrieve_topk(gallery, q, K, probes) for q in queries]


# ---------------------------------------------------------------- training memory bank


class MemoryBank:
    """Training-time reference store with a fixed sample -> authentic-record pairing."""

    def __init__(self, records, pairing: dict):
        self.records = {r.id: r for r in records}
        self.pairing = dict(pairing)

    def pair(self, sample_id: int) -> ReferenceRecord:
        return pair_training_reference(self, sample_id)

    def refresh(self, embed_fn, batch_size: int = 256):
        """Recompute cached embeddings of train-partition records with the current encoder."""
        train = [r for r in self.records.values() if r.partition == "train"]
        for i in range(0, len(train), batch_size):
            chunk = train[i : i + batch_size]
            emb = embed_fn(np.stack([r.image for r in chunk]))
            for r, e in zip(chunk, emb):
                r.embedding = e

    def audit(self) -> list:
        """Every (sample_id, problem) pair whose pairing leaves the train partition."""
        problems = []
        for sid in sorted(self.pairing):
            try:
                pair_training_reference(self, sid)
            except (UnknownSample, PartitionViolation) as exc:
                problems.append((sid, str(exc)))
        return problems


def pair_training_reference(bank: MemoryBank, sample_id: int) -> ReferenceRecord:
    if sample_id not in bank.pairing:
        raise UnknownSample(f"sample {sample_id} has no registered reference")
    rid = bank.pairing[sample_id]
    if rid not in bank.records:
        raise UnknownSample(f"sample {sample_id} points at missing record {rid}")
    record = bank.records[rid]
    if record.partition != "train":
        raise PartitionViolation(f"sample {sample_id} paired with {record.partition}-partition record {rid}")
    return record


# ---------------------------------------------------------------- contrastive loss


def vrc_loss(query: Tensor, positive: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric in-batch InfoNCE between row-aligned query and positive embeddings."""
    B = query.shape[0]
    if B < 2:
        raise BatchTooSmall("contrastive loss needs at least two pairs")
    for x in (query, positive):
        if np.abs(np.linalg.norm(x.data, axis=1) - 1.0).max() > 1e-6:
            raise UnnormalizedInput("contrastive inputs must be unit rows")
    logits = T.scale(T.matmul(query, T.swap_last(positive)), 1.0 / temperature)
    diag = (np.arange(B), np.arange(B))
    q2p = T.neg(T.mean_pool(T.log_softmax(logits, axis=1)[diag]))
    p2q = T.neg(T.mean_pool(T.log_softmax(logits, axis=0)[diag]))
    return T.scale(T.add(q2p, p2q), 0.5)


# ---------------------------------------------------------------- gallery files


def save_gallery(gallery: Gallery, path) -> None:
    count, dim = gallery.matrix.shape
    meta = bytearray()
    for r in gallery.records:
        img = np.asarray(r.image, dtype="<f4")
        cap = np.asarray(r.caption, dtype="<u2")
        meta += struct.pack("<QIII", r.id, *img.shape)
        meta += img.tobytes()
        meta += struct.pack("<I", cap.size) + cap.tobytes()
    with open(path, "wb") as fh:
        fh.write(GALLERY_MAGIC)
        fh.write(struct.pack("<IIQ", GALLERY_VERSION, dim, count))
        fh.write(np.asarray(gallery.matrix, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(bytes(meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_gallery(path, index_kind: str = "flat", num_partitions: int = 8, seed: int = 0) -> Gallery:
    rd = _Reader(Path(path).read_bytes())
    if rd.take(4) != GALLERY_MAGIC:
        raise BadMagic(f"{path} is not a gallery file")
    version, dim, count = rd.unpack("<IIQ")
    if version != GALLERY_VERSION:
        raise VersionMismatch(f"gallery format version {version}, expected {GALLERY_VERSION}")
    matrix = np.frombuffer(rd.take(4 * dim * count), dtype="<f4").reshape(count, dim).astype(np.float64)
    (meta_len,) = rd.unpack("<Q")
    meta = _Reader(rd.take(meta_len))
    records = []
    for row in matrix:
        rid, h, w, c = meta.unpack("<QIII")
        img = np.frombuffer(meta.take(4 * h * w * c), dtype="<f4").reshape(h, w, c).astype(np.float64)
        (n,) = meta.unpack("<I")
        cap = np.frombuffer(meta.take(2 * n), dtype="<u2").astype(np.int64)
        records.append(ReferenceRecord(int(rid), img, cap, row.copy(), "gallery"))
    if not records:
        raise EmptyLibrary(f"{path} holds no records")
    return build_gallery(records, index_kind, num_partitions, seed)
