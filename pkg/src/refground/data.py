"""Deterministic synthetic image-caption pairs with manipulation ground truth.

Every authentic pair shows one of 32 domain entities (a smooth colour
prototype blended with a per-pair scene) and carries the caption
``<first> <last> <verb> <adjective> <noun> at <place>``. A manipulated query
is derived from exactly one authentic pair by editing an image rectangle,
the caption, or both.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import BadRate, CaptionTooShort, ConfigError, FileFormatError
from .rng import stream
from .store import ReferenceRecord

CLASS_NAMES = ("image-swap", "image-attribute", "text-swap", "text-attribute")
N_ENTITIES = 32
N_LAST = 16
NAME_BASE = 75
NAME_STRIDE = N_ENTITIES + N_LAST
AT = 1
CATEGORIES = {
    "verb": range(11, 27),
    "color": range(27, 35),
    "size": range(35, 43),
    "noun": range(43, 59),
    "place": range(59, 75),
}
DOMAIN_INDEX = {"A": 0, "B": 1, "C": 2}
QUERY_NOISE = 0.02
ENTITY_WEIGHT = 0.6


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def smooth_pattern(rng: np.random.Generator, size: int = 16, channels: int = 3, waves: int = 4) -> np.ndarray:
    """Sum of low-frequency plane waves per channel, scaled into [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size, channels))
    for c in range(channels):
        for _ in range(waves):
            fx, fy = rng.uniform(-2.0, 2.0, size=2)
            amp = rng.uniform(0.3, 1.0)
            out[:, :, c] += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return out / np.abs(out).max()


@dataclass(frozen=True)
class DomainParams:
    tag: str
    index: int
    size: int = 16
    channels: int = 3

    @property
    def first_names(self) -> np.ndarray:
        start = NAME_BASE + NAME_STRIDE * self.index
        return np.arange(start, start + N_ENTITIES)

    @property
    def last_names(self) -> np.ndarray:
        start = NAME_BASE + NAME_STRIDE * self.index + N_ENTITIES
        return np.arange(start, start + N_LAST)

    def entity_tokens(self, e: int) -> tuple:
        return int(self.first_names[e]), int(self.last_names[e % N_LAST])

    def prototypes(self) -> np.ndarray:
        return _prototypes(self.index, self.size, self.channels)

    @property
    def id_offset(self) -> int:
        return 1_000_000 * self.index


@lru_cache(maxsize=8)
def _prototypes(index: int, size: int, channels: int) -> np.ndarray:
    rng = stream(7919 + index, "entity-prototypes")
    protos = np.stack([smooth_pattern(rng, size, channels) for _ in range(N_ENTITIES)])
    protos.setflags(write=False)
    return protos


def domain_params(tag: str = "A", size: int = 16, channels: int = 3) -> DomainParams:
    if tag not in DOMAIN_INDEX:
        raise ConfigError(f"unknown domain {tag!r}; choose from {sorted(DOMAIN_INDEX)}")
    return DomainParams(tag, DOMAIN_INDEX[tag], size, channels)


def category_of(token: int):
    for name, ids in CATEGORIES.items():
        if token in ids:
            return name
    return None


@dataclass
class QuerySample:
    id: int
    image: np.ndarray
    caption: np.ndarray
    binary_label: int  # 0 authentic, 1 manipulated
    class_vector: np.ndarray  # (4,) bool, order of CLASS_NAMES
    box: tuple | None  # (cx, cy, w, h) normalised
    token_mask: np.ndarray  # (L,) bool
    source_reference_id: int
    domain_tag: str
    split: str = "train"
    entity: int = -1

    def check(self):
        """Raise AssertionError if the ground-truth fields contradict each other."""
        cv = np.asarray(self.class_vector, bool)
        if self.binary_label == 0:
            assert not cv.any() and self.box is None and not self.token_mask.any()
        else:
            assert cv.any()
        if cv[:2].any():
            assert self.box is not None
        if cv[2:].any():
            assert self.token_mask.any()
        assert not (self.token_mask & (self.caption == 0)).any()


# ---------------------------------------------------------------- manipulations


def _changed_bbox(a: np.ndarray, b: np.ndarray):
    diff = (a != b).any(axis=2)
    if not diff.any():
        return None
    ys, xs = np.nonzero(diff)
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1


def apply_image_manipulation(img: np.ndarray, kind: str, rng: np.random.Generator, donor=None, delta=None):
    """Edit one rectangle; returns ``(edited, (cx, cy, w, h))``.

    ``swap`` copies the rectangle from ``donor`` (another entity's image);
    ``attribute`` shifts the rectangle's channels by ``delta``. Draws that
    would leave any edge row/column of the rectangle untouched are resampled,
    so the returned box is exactly the bounding box of changed pixels.
    """
    if kind not in ("swap", "attribute"):
        raise ValueError(f"unknown image manipulation {kind!r}")
    img = np.asarray(img, dtype=np.float64)
    H, W, C = img.shape
    if kind == "swap" and donor is None:
        donor = _f32(smooth_pattern(rng, H, C))
    lo_w, hi_w = math.ceil(0.2 * W), math.floor(0.5 * W)
    lo_h, hi_h = math.ceil(0.2 * H), math.floor(0.5 * H)
    while True:
        w, h = int(rng.integers(lo_w, hi_w + 1)), int(rng.integers(lo_h, hi_h + 1))
        x0, y0 = int(rng.integers(0, W - w + 1)), int(rng.integers(0, H - h + 1))
        out = img.copy()
        if kind == "swap":
            out[y0 : y0 + h, x0 : x0 + w] = donor[y0 : y0 + h, x0 : x0 + w]
        else:
            shift = np.asarray(delta, dtype=np.float64) if delta is not None else rng.uniform(-0.6, 0.6, size=C)
            delta = None
            out[y0 : y0 + h, x0 : x0 + w] = np.clip(out[y0 : y0 + h, x0 : x0 + w] + shift, -1.0, 1.0)
        out = _f32(out)
        if _changed_bbox(img, out) == (x0, y0, x0 + w, y0 + h):
            return out, ((x0 + w / 2) / W, (y0 + h / 2) / H, w / W, h / H)


def apply_text_manipulation(caption: np.ndarray, kind: str, rng: np.random.Generator, domain: DomainParams):
    """Returns ``(edited caption, token_mask)`` with the mask true exactly where ids changed."""
    caption = np.asarray(caption, dtype=np.int64)
    valid = caption != 0
    if valid.sum() < 2:
        raise CaptionTooShort("caption needs at least two tokens")
    out = caption.copy()
    if kind == "swap":
        firsts = np.nonzero(np.isin(caption, domain.first_names))[0]
        if firsts.size == 0:
            raise ValueError("caption carries no entity name of this domain")
        i = int(firsts[0])
        current = int(caption[i] - domain.first_names[0])
        while True:
            e = int(rng.integers(N_ENTITIES))
            if e != current:
                break
        first, last = domain.entity_tokens(e)
        out[i] = first
        if i + 1 < len(out) and caption[i + 1] in domain.last_names:
            out[i + 1] = last
    elif kind == "attribute":
        slots = [i for i, t in enumerate(caption) if t and category_of(int(t)) is not None]
        if not slots:
            raise ValueError("caption has no descriptor token")
        i = slots[int(rng.integers(len(slots)))]
        choices = [t for t in CATEGORIES[category_of(int(caption[i]))] if t != caption[i]]
        out[i] = choices[int(rng.integers(len(choices)))]
    else:
        raise ValueError(f"unknown text manipulation {kind!r}")
    return out, out != caption


# ---------------------------------------------------------------- generation


def make_caption(rng: np.random.Generator, domain: DomainParams, entity: int, L: int = 16) -> np.ndarray:
    if L < 7:
        raise ConfigError("captions need L >= 7")
    first, last = domain.entity_tokens(entity)
    adj_cat = CATEGORIES["color"] if rng.random() < 0.5 else CATEGORIES["size"]
    words = [
        first,
        last,
        rng.choice(CATEGORIES["verb"]),
        rng.choice(adj_cat),
        rng.choice(CATEGORIES["noun"]),
        AT,
        rng.choice(CATEGORIES["place"]),
    ]
    out = np.zeros(L, dtype=np.int64)
    out[: len(words)] = words
    return out


def generate_dataset(
    seed: int,
    n_authentic: int,
    manipulation_rate: float,
    domain: DomainParams | None = None,
    test_fraction: float = 0.2,
    mixed: bool = False,
    L: int = 16,
):
    """Returns ``(samples, reference_records)``.

    The last ``test_fraction`` of authentic pairs form the gallery partition;
    queries derived from them are the test split. Exactly
    ``round(rate * n)`` queries are manipulated.
    """
    domain = domain or domain_params("A")
    if n_authentic < 8:
        raise ConfigError("need at least 8 authentic pairs")
    if not 0.0 <= manipulation_rate <= 1.0:
        raise BadRate(f"manipulation rate {manipulation_rate} outside [0, 1]")
    protos = domain.prototypes()
    H, C = domain.size, domain.channels
    tag = domain.tag
    base = stream(seed, f"pairs-{tag}")
    n_gallery = int(round(test_fraction * n_authentic))
    n_manip = int(round(manipulation_rate * n_authentic))
    manipulated = np.zeros(n_authentic, bool)
    manipulated[stream(seed, f"which-{tag}").permutation(n_authentic)[:n_manip]] = True

    records, samples = [], []
    for k in range(n_authentic):
        entity = int(base.integers(N_ENTITIES))
        scene = smooth_pattern(base, H, C)
        image = _f32(np.clip(ENTITY_WEIGHT * protos[entity] + (1 - ENTITY_WEIGHT) * scene, -1, 1))
        caption = make_caption(base, domain, entity, L)
        partition = "gallery" if k >= n_authentic - n_gallery else "train"
        rid = domain.id_offset + k
        records.append(ReferenceRecord(rid, image, caption, None, partition))

        rng = stream(seed, f"query-{tag}-{k}")
        q_img, q_cap = image, caption
        classes = np.zeros(4, bool)
        box, mask = None, np.zeros(L, bool)
        if manipulated[k]:
            if mixed:
                kinds = [int(rng.integers(2)), 2 + int(rng.integers(2))]
            else:
                kinds = [int(rng.integers(4))]
            for kind in kinds:
                classes[kind] = True
                if kind < 2:
                    other = (entity + 1 + int(rng.integers(N_ENTITIES - 1))) % N_ENTITIES
                    donor = _f32(np.clip(ENTITY_WEIGHT * protos[other] + (1 - ENTITY_WEIGHT) * scene, -1, 1))
                    q_img, box = apply_image_manipulation(q_img, ("swap", "attribute")[kind], rng, donor)
                else:
                    q_cap, mask = apply_text_manipulation(q_cap, ("swap", "attribute")[kind - 2], rng, domain)
        noise = rng.normal(0.0, QUERY_NOISE, size=q_img.shape)
        q_img = _f32(np.clip(q_img + noise, -1, 1))
        samples.append(
            QuerySample(
                id=domain.id_offset + k,
                image=q_img,
                caption=q_cap,
                binary_label=int(manipulated[k]),
                class_vector=classes,
                box=box,
                token_mask=mask,
                source_reference_id=rid,
                domain_tag=tag,
                split="test" if partition == "gallery" else "train",
                entity=entity,
            )
        )
    return samples, records


def pairing_map(samples) -> dict:
    return {s.id: s.source_reference_id for s in samples if s.split == "train"}


# ---------------------------------------------------------------- JSON lines


def _enc_image(img: np.ndarray) -> dict:
    arr = np.asarray(img, dtype="<f4")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _dec_image(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["shape"]).astype(np.float64)


def sample_to_json(s: QuerySample) -> dict:
    return {
        "id": s.id,
        "image": _enc_image(s.image),
        "caption": [int(t) for t in s.caption],
        "binary_label": s.binary_label,
        "class_vector": [bool(c) for c in s.class_vector],
        "box": None if s.box is None else [float(v) for v in s.box],
        "token_mask": [bool(m) for m in s.token_mask],
        "domain_tag": s.domain_tag,
        "source_reference_id": s.source_reference_id,
        "split": s.split,
        "entity": s.entity,
    }


def sample_from_json(obj: dict) -> QuerySample:
    return QuerySample(
        id=int(obj["id"]),
        image=_dec_image(obj["image"]),
        caption=np.asarray(obj["caption"], dtype=np.int64),
        binary_label=int(obj["binary_label"]),
        class_vector=np.asarray(obj["class_vector"], bool),
        box=None if obj["box"] is None else tuple(obj["box"]),
        token_mask=np.asarray(obj["token_mask"], bool),
        source_reference_id=int(obj["source_reference_id"]),
        domain_tag=obj["domain_tag"],
        split=obj.get("split", "train"),
        entity=int(obj.get("entity", -1)),
    )


def record_to_json(r: ReferenceRecord) -> dict:
    return {
        "id": r.id,
        "image": _enc_image(r.image),
        "caption": [int(t) for t in r.caption],
        "partition": r.partition,
    }


def record_from_json(obj: dict) -> ReferenceRecord:
    return ReferenceRecord(
        int(obj["id"]), _dec_image(obj["image"]), np.asarray(obj["caption"], dtype=np.int64), None, obj["partition"]
    )


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list:
    rows = []
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    rows.append(json.loads(line))
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    return rows


@dataclass
class Dataset:
    train: list
    test: list
    references: list
    meta: dict = field(default_factory=dict)

    def records(self, partition: str) -> list:
        return [r for r in self.references if r.partition == partition]


def save_dataset(directory, samples, records, meta: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_jsonl(d / "train.jsonl", (sample_to_json(s) for s in samples if s.split == "train"))
    write_jsonl(d / "test.jsonl", (sample_to_json(s) for s in samples if s.split == "test"))
    write_jsonl(d / "references.jsonl", (record_to_json(r) for r in records))
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        train = [sample_from_json(o) for o in read_jsonl(d / "train.jsonl")]
        test = [sample_from_json(o) for o in read_jsonl(d / "test.jsonl")]
        refs = [record_from_json(o) for o in read_jsonl(d / "references.jsonl")]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"malformed dataset in {d}: {exc}") from exc
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Dataset(train, test, refs, meta)
