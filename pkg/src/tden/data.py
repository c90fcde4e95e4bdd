"""Synthetic paired scenes standing in for detector features and captions.

A *world* fixes one latent prototype per object class and one offset per
attribute.  A region's feature is ``prototype[class] + offset[attr]`` plus
Gaussian noise.  Offsets are orthogonal to the span of the prototypes, and
the detector scores classes inside that span: its distribution is a tempered
softmax over negative distances to the prototypes there, so it does not see
attributes.  Captions follow the template
``the <attr> <class> [<pred> the <attr> <class>]`` describing the largest
region (and, half the time, its relation to the second largest).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .structures import N_SPECIAL, BoxGeometry, RegionSet, TokenSeq

FORMAT_MAGIC = b"TDEN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIII")

PREDICATES = ("left", "right", "above", "below")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class DataConfig:
    n_object_classes: int = 24
    n_attributes: int = 24
    d_region_feat: int = 32
    max_regions: int = 12
    min_regions: int = 2
    vocab_size: int = 128
    max_seq_len: int = 20
    noise: float = 0.1
    attr_scale: float = 1.5
    temperature: float = 0.5
    relation_prob: float = 0.5
    world_seed: int = 1234


@dataclass(frozen=True)
class Vocab:
    """Word-id layout: specials, "the", classes, attributes, predicates."""

    n_classes: int
    n_attributes: int
    size: int

    @property
    def the(self) -> int:
        return N_SPECIAL

    def class_word(self, c: int) -> int:
        return N_SPECIAL + 1 + c

    def attr_word(self, a: int) -> int:
        return N_SPECIAL + 1 + self.n_classes + a

    def pred_word(self, p: int) -> int:
        return N_SPECIAL + 1 + self.n_classes + self.n_attributes + p

    def word_class(self, w: int) -> int | None:
        c = w - N_SPECIAL - 1
        return c if 0 <= c < self.n_classes else None

    def word_attr(self, w: int) -> int | None:
        a = w - N_SPECIAL - 1 - self.n_classes
        return a if 0 <= a < self.n_attributes else None

    def __post_init__(self):
        if self.pred_word(len(PREDICATES) - 1) >= self.size:
            raise ValueError("vocabulary too small for the caption grammar")


@dataclass
class SceneObject:
    class_id: int
    attr_id: int
    box: BoxGeometry


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    relation: tuple[int, int, int] | None = None  # (subject idx, predicate id, object idx)


@dataclass
class World:
    cfg: DataConfig
    prototypes: np.ndarray
    attr_offsets: np.ndarray
    vocab: Vocab = field(init=False)
    class_basis: np.ndarray = field(init=False)  # orthonormal columns spanning the prototypes

    def __post_init__(self):
        self.vocab = Vocab(self.cfg.n_object_classes, self.cfg.n_attributes, self.cfg.vocab_size)
        self.class_basis = _span_basis(self.prototypes)

    @classmethod
    def create(cls, cfg: DataConfig | None = None) -> "World":
        cfg = cfg or DataConfig()
        rng = np.random.default_rng(cfg.world_seed)
        protos = rng.normal(0.0, 1.0, (cfg.n_object_classes, cfg.d_region_feat))
        offsets = rng.normal(0.0, cfg.attr_scale, (cfg.n_attributes, cfg.d_region_feat))
        Q = _span_basis(protos)
        if Q.shape[1] < cfg.d_region_feat:
            offsets = offsets - (offsets @ Q) @ Q.T
        return cls(cfg, protos, offsets)

    def detector_dist(self, features: np.ndarray) -> np.ndarray:
        Q = self.class_basis
        if Q.shape[1] < Q.shape[0]:
            features = (features @ Q) @ Q.T
        d = np.linalg.norm(features[:, None, :] - self.prototypes[None], axis=-1)
        z = -d / self.cfg.temperature
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def _span_basis(vectors: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    u, s, _ = np.linalg.svd(vectors.T, full_matrices=False)
    return u[:, s > tol * s.max()]


def _random_box(rng: np.random.Generator, min_side: float = 0.05) -> BoxGeometry:
    x = np.sort(rng.uniform(0, 1, 2))
    y = np.sort(rng.uniform(0, 1, 2))
    if x[1] - x[0] < min_side:
        x = np.array([min(x[0], 1 - min_side), min(x[0], 1 - min_side) + min_side])
    if y[1] - y[0] < min_side:
        y = np.array([min(y[0], 1 - min_side), min(y[0], 1 - min_side) + min_side])
    return BoxGeometry(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def _predicate(subj: BoxGeometry, obj: BoxGeometry) -> int:
    dx = (obj.x1 + obj.x2 - subj.x1 - subj.x2) / 2
    dy = (obj.y1 + obj.y2 - subj.y1 - subj.y2) / 2
    if abs(dx) >= abs(dy):
        return 0 if dx > 0 else 1
    return 2 if dy > 0 else 3


def gen_scene(rng: np.random.Generator, world: World) -> SceneSpec:
    cfg = world.cfg
    n = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    classes = rng.choice(cfg.n_object_classes, size=n, replace=False)
    attrs = rng.integers(0, cfg.n_attributes, size=n)
    objects = [SceneObject(int(c), int(a), _random_box(rng)) for c, a in zip(classes, attrs)]
    relation = None
    if n >= 2 and rng.random() < cfg.relation_prob:
        order = np.argsort([-o.box.area for o in objects], kind="stable")
        s, o = int(order[0]), int(order[1])
        relation = (s, _predicate(objects[s].box, objects[o].box), o)
    return SceneSpec(objects, relation)


def subject_index(scene: SceneSpec) -> int:
    """The region a caption describes first: the largest box."""
    if scene.relation is not None:
        return scene.relation[0]
    return int(np.argmax([o.box.area for o in scene.objects]))


def gen_caption(scene: SceneSpec, world: World, rng: np.random.Generator | None = None) -> np.ndarray:
    """Template caption (word ids, no specials) describing the scene truthfully."""
    v = world.vocab
    s = scene.objects[subject_index(scene)]
    words = [v.the, v.attr_word(s.attr_id), v.class_word(s.class_id)]
    if scene.relation is not None:
        _, pred, oi = scene.relation
        o = scene.objects[oi]
        words += [v.pred_word(pred), v.the, v.attr_word(o.attr_id), v.class_word(o.class_id)]
    return np.array(words, dtype=np.int64)


def render_regions(scene: SceneSpec, world: World, rng: np.random.Generator) -> RegionSet:
    cls = np.array([o.class_id for o in scene.objects])
    att = np.array([o.attr_id for o in scene.objects])
    feats = world.prototypes[cls] + world.attr_offsets[att]
    feats = feats + rng.normal(0.0, world.cfg.noise, feats.shape)
    boxes = np.stack([o.box.as_array() for o in scene.objects])
    return RegionSet(feats, boxes, world.detector_dist(feats), None, cls, att)


@dataclass
class Record:
    regions: RegionSet
    caption: np.ndarray

    def pair(self) -> tuple[TokenSeq, RegionSet]:
        return TokenSeq.wrap(self.caption), self.regions


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def gen_record(world: World, seed: int, index: int) -> tuple[Record, SceneSpec]:
    rng = record_rng(seed, index)
    scene = gen_scene(rng, world)
    regions = render_regions(scene, world, rng)
    return Record(regions, gen_caption(scene, world, rng)), scene


def gen_dataset(world: World, n: int, seed: int, offset: int = 0) -> list[Record]:
    return [gen_record(world, seed, offset + i)[0] for i in range(n)]


def gen_splits(world: World, seed: int, sizes=(2048, 256, 256)) -> dict[str, list[Record]]:
    names = ("train", "val", "test")
    out, start = {}, 0
    for name, size in zip(names, sizes):
        out[name] = gen_dataset(world, size, seed, start)
        start += size
    return out


# ---------------------------------------------------------------- file format


def _record_dtype(max_regions: int, d_feat: int, n_classes: int, max_caption: int) -> np.dtype:
    return np.dtype([
        ("n_regions", "<u4"),
        ("caption_len", "<u4"),
        ("features", "<f8", (max_regions, d_feat)),
        ("boxes", "<f8", (max_regions, 5)),
        ("dists", "<f8", (max_regions, n_classes)),
        ("class_ids", "<i4", (max_regions,)),
        ("attr_ids", "<i4", (max_regions,)),
        ("caption", "<i4", (max_caption,)),
    ])


def write_dataset(path, records: list[Record], cfg: DataConfig | None = None) -> None:
    cfg = cfg or DataConfig()
    max_caption = cfg.max_seq_len - 2
    dtype = _record_dtype(cfg.max_regions, cfg.d_region_feat, cfg.n_object_classes, max_caption)
    arr = np.zeros(len(records), dtype=dtype)
    for i, rec in enumerate(records):
        n, m = len(rec.regions), len(rec.caption)
        if n > cfg.max_regions or m > max_caption:
            raise ValueError(f"record {i} exceeds the configured maxima")
        row = arr[i]
        row["n_regions"], row["caption_len"] = n, m
        row["features"][:n] = rec.regions.features
        row["boxes"][:n] = rec.regions.boxes
        row["dists"][:n] = rec.regions.dists
        if rec.regions.class_ids is not None:
            row["class_ids"][:n] = rec.regions.class_ids
        if rec.regions.attr_ids is not None:
            row["attr_ids"][:n] = rec.regions.attr_ids
        row["caption"][:m] = rec.caption
    header = _HEADER.pack(
        FORMAT_MAGIC, FORMAT_VERSION, 0, len(records), cfg.max_regions,
        cfg.d_region_feat, cfg.n_object_classes, max_caption,
    )
    Path(path).write_bytes(header + arr.tobytes())


def read_dataset(path) -> list[Record]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, _, n, max_regions, d_feat, n_classes, max_caption = _HEADER.unpack_from(blob)
    if magic != FORMAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(max_regions, d_feat, n_classes, max_caption) == 0:
        raise FormatError("zero dimension in header", 12)
    dtype = _record_dtype(max_regions, d_feat, n_classes, max_caption)
    expected = _HEADER.size + n * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"file holds {len(blob)} bytes, header implies {expected}", min(len(blob), expected)
        )
    arr = np.frombuffer(blob, dtype=dtype, count=n, offset=_HEADER.size)
    records = []
    for i, row in enumerate(arr):
        k, m = int(row["n_regions"]), int(row["caption_len"])
        if not (1 <= k <= max_regions) or m > max_caption:
            raise FormatError(f"record {i} has invalid counts", _HEADER.size + i * dtype.itemsize)
        regions = RegionSet(
            row["features"][:k].astype(np.float64),
            row["boxes"][:k].astype(np.float64),
            row["dists"][:k].astype(np.float64),
            None,
            row["class_ids"][:k].astype(np.int64),
            row["attr_ids"][:k].astype(np.int64),
        )
        records.append(Record(regions, row["caption"][:m].astype(np.int64)))
    return records


def unigram_entropy_bits(captions) -> float:
    counts = np.bincount(np.concatenate([np.asarray(c) for c in captions]))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def nearest_prototype_accuracy(world: World, records: list[Record]) -> float:
    hits = total = 0
    for rec in records:
        d = np.linalg.norm(rec.regions.features[:, None] - world.prototypes[None], axis=-1)
        hits += int((d.argmin(axis=1) == rec.regions.class_ids).sum())
        total += len(rec.regions)
    return hits / total
