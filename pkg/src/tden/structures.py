"""Containers for sentences, region sets and their padded minibatch forms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# special word ids; every vocabulary starts with these four
CLS, SEP, MASK, IMG = 0, 1, 2, 3
SPECIAL_IDS = (CLS, SEP, MASK, IMG)
N_SPECIAL = len(SPECIAL_IDS)


@dataclass(frozen=True)
class BoxGeometry:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(f"invalid normalized box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2, self.area])


@dataclass
class TokenSeq:
    """Word ids wrapped as ``[CLS] w_1 .. w_N [SEP]``."""

    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) < 2 or self.ids[0] != CLS or self.ids[-1] != SEP:
            raise ValueError("token sequence must start with [CLS] and end with [SEP]")

    @classmethod
    def wrap(cls, words) -> "TokenSeq":
        return cls(np.concatenate([[CLS], np.asarray(words, dtype=np.int64), [SEP]]))

    @property
    def words(self) -> np.ndarray:
        return self.ids[1:-1]

    @property
    def n_words(self) -> int:
        return len(self.ids) - 2

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RegionSet:
    """Detected regions of one image.

    ``boxes`` rows are ``(x1, y1, x2, y2, area)``; ``dists`` are the detector
    class distributions; ``masked`` flags regions whose features were blanked.
    """

    features: np.ndarray
    boxes: np.ndarray
    dists: np.ndarray
    masked: np.ndarray = None
    class_ids: np.ndarray = None
    attr_ids: np.ndarray = None

    def __post_init__(self):
        n = len(self.features)
        if n == 0:
            raise ValueError("region set is empty")
        if self.masked is None:
            self.masked = np.zeros(n, dtype=bool)
        if len(self.boxes) != n or len(self.dists) != n or len(self.masked) != n:
            raise ValueError("region arrays disagree on the number of regions")

    def __len__(self) -> int:
        return len(self.features)

    def permuted(self, order) -> "RegionSet":
        order = np.asarray(order)
        pick = lambda a: None if a is None else a[order]
        return RegionSet(
            self.features[order], self.boxes[order], self.dists[order], self.masked[order],
            pick(self.class_ids), pick(self.attr_ids),
        )


@dataclass
class WordBatch:
    ids: np.ndarray  # B x L, padded with [SEP]
    lengths: np.ndarray

    @classmethod
    def collate(cls, seqs: list[TokenSeq]) -> "WordBatch":
        lengths = np.array([len(s) for s in seqs])
        ids = np.full((len(seqs), lengths.max()), SEP, dtype=np.int64)
        for b, s in enumerate(seqs):
            ids[b, : len(s)] = s.ids
        return cls(ids, lengths)

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return len(self.lengths)


@dataclass
class RegionBatch:
    features: np.ndarray  # B x N x F, zero padded
    boxes: np.ndarray
    dists: np.ndarray
    masked: np.ndarray
    counts: np.ndarray

    @classmethod
    def collate(cls, sets: list[RegionSet]) -> "RegionBatch":
        counts = np.array([len(r) for r in sets])
        B, N = len(sets), counts.max()
        F, C = sets[0].features.shape[1], sets[0].dists.shape[1]
        feats = np.zeros((B, N, F))
        boxes = np.zeros((B, N, 5))
        dists = np.zeros((B, N, C))
        masked = np.zeros((B, N), dtype=bool)
        for b, r in enumerate(sets):
            n = len(r)
            feats[b, :n], boxes[b, :n], dists[b, :n], masked[b, :n] = (
                r.features, r.boxes, r.dists, r.masked,
            )
        return cls(feats, boxes, dists, masked, counts)

    @property
    def valid(self) -> np.ndarray:
        """Validity of the N+1 visual rows, [IMG] first."""
        n = self.features.shape[1] + 1
        return np.arange(n)[None, :] < (self.counts[:, None] + 1)

    def __len__(self) -> int:
        return len(self.counts)


@dataclass
class MaskedBatch:
    """A minibatch after masking both modalities.

    Word positions index rows of the padded word batch; region positions are
    region indices (visual row = position + 1, behind [IMG]).
    """

    tokens: list[TokenSeq]
    originals: list[TokenSeq]
    regions: list[RegionSet]
    word_mask_positions: list[np.ndarray]
    word_targets: list[np.ndarray]
    region_mask_positions: list[np.ndarray]
    region_targets: list[np.ndarray]
    clean_regions: list[RegionSet] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> WordBatch:
        return WordBatch.collate(self.tokens)

    @property
    def region_batch(self) -> RegionBatch:
        return RegionBatch.collate(self.regions)

    def word_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (item, row, target) triples of every masked word."""
        bi = np.concatenate([np.full(len(p), b) for b, p in enumerate(self.word_mask_positions)])
        rows = np.concatenate(self.word_mask_positions)
        tgt = np.concatenate(self.word_targets)
        return bi.astype(np.int64), rows.astype(np.int64), tgt.astype(np.int64)

    def region_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (item, visual row, target distribution) triples of masked regions."""
        bi = np.concatenate([np.full(len(p), b) for b, p in enumerate(self.region_mask_positions)])
        rows = np.concatenate(self.region_mask_positions) + 1
        C = self.regions[0].dists.shape[1]
        tgt = np.concatenate([t.reshape(-1, C) for t in self.region_targets])
        return bi.astype(np.int64), rows.astype(np.int64), tgt

    def with_words(self, tokens: list[TokenSeq]) -> "MaskedBatch":
        """Same masks and targets over a replacement word sequence per item."""
        return MaskedBatch(
            tokens, self.originals, self.regions, self.word_mask_positions,
            self.word_targets, self.region_mask_positions, self.region_targets,
            self.clean_regions,
        )
