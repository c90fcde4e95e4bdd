"""Masking procedures and the four pretraining objectives (MLM, MOC, ISM, MSG)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import EncodedPair, TdenModel
from .structures import MASK, MaskedBatch, RegionBatch, RegionSet, TokenSeq, WordBatch

MASK_PROB = 0.15
ALL_LOSSES = ("mlm", "moc", "ism", "msg")


def _bernoulli_at_least_one(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if n == 0 or p <= 0:
        return np.zeros(n, dtype=bool)
    while True:
        hit = rng.random(n) < p
        if hit.any():
            return hit


def mask_words(tokens: TokenSeq, rng: np.random.Generator, p: float = MASK_PROB):
    """Replace each real word by [MASK] with probability ``p``.

    At least one word is masked whenever ``p > 0`` (the draw is repeated).
    Returns the corrupted sequence, the masked row indices and their
    original ids.
    """
    hit = _bernoulli_at_least_one(tokens.n_words, p, rng)
    positions = np.flatnonzero(hit) + 1
    ids = tokens.ids.copy()
    targets = ids[positions].copy()
    ids[positions] = MASK
    return TokenSeq(ids), positions, targets


def mask_regions(regions: RegionSet, rng: np.random.Generator, p: float = MASK_PROB):
    """Blank region features with probability ``p``; geometry is kept.

    Returns the corrupted set (``masked`` flags set, features zeroed), the
    masked region indices and their detector distributions.
    """
    hit = _bernoulli_at_least_one(len(regions), p, rng)
    positions = np.flatnonzero(hit)
    features = regions.features.copy()
    features[positions] = 0.0
    masked = regions.masked.copy()
    masked[positions] = True
    out = RegionSet(features, regions.boxes, regions.dists, masked, regions.class_ids, regions.attr_ids)
    return out, positions, regions.dists[positions].copy()


def make_masked_batch(
    pairs: list[tuple[TokenSeq, RegionSet]],
    rng: np.random.Generator,
    word_p: float = MASK_PROB,
    region_p: float = MASK_PROB,
) -> MaskedBatch:
    tokens, wpos, wtgt, regions, rpos, rtgt = [], [], [], [], [], []
    for seq, reg in pairs:
        t, p, y = mask_words(seq, rng, word_p)
        r, q, z = mask_regions(reg, rng, region_p)
        tokens.append(t), wpos.append(p), wtgt.append(y)
        regions.append(r), rpos.append(q), rtgt.append(z)
    return MaskedBatch(
        tokens, [s for s, _ in pairs], regions, wpos, wtgt, rpos, rtgt,
        clean_regions=[r for _, r in pairs],
    )


# ---------------------------------------------------------------- losses from states


def mlm_from_states(model: TdenModel, cross_out: Tensor, batch: MaskedBatch):
    """Cross-entropy at masked word rows of the cross-encoder output."""
    bi, rows, targets = batch.word_index()
    if len(bi) == 0:
        raise ValueError("MLM needs at least one masked word in the batch")
    logits = model.logits_words(cross_out[bi, rows])
    return ad.cross_entropy(logits, targets), logits


def moc_from_states(model: TdenModel, cross_out: Tensor, batch: MaskedBatch, n_word_rows: int):
    """KL divergence at masked visual rows (which follow the word rows)."""
    bi, rows, targets = batch.region_index()
    if len(bi) == 0:
        raise ValueError("MOC needs at least one masked region in the batch")
    logits = model.logits_objects(cross_out[bi, rows + n_word_rows])
    return ad.kl_divergence(logits, targets)


def msg_targets(originals: WordBatch):
    """(item, input row, target id) for next-word prediction, [SEP] last."""
    B, L = originals.ids.shape
    rows = np.arange(L - 1)[None, :].repeat(B, axis=0)
    keep = rows + 1 < originals.lengths[:, None]
    bi = np.nonzero(keep)[0]
    r = rows[keep]
    return bi, r, originals.ids[bi, r + 1]


def msg_from_states(model: TdenModel, dec_out: Tensor, originals: WordBatch):
    """Mean next-word NLL; decoder row j predicts original word j+1."""
    bi, rows, targets = msg_targets(originals)
    logits = model.logits_generation(dec_out[bi, rows])
    return ad.cross_entropy(logits, targets), logits, (bi, rows)


def ism_from_pooled(u: Tensor, v: Tensor, margin: float) -> Tensor:
    """Bidirectional hinge over all in-batch mismatched pairs, averaged.

    ``u``/``v`` are unit sentence/image vectors; s(i, j) = u_i . v_j.
    """
    B = u.shape[0]
    if B < 2:
        raise ValueError("ISM needs a batch of at least two pairs")
    sim = u @ v.transpose(1, 0)
    diag = np.eye(B, dtype=bool)
    pos = (sim * np.eye(B)).sum(axis=1, keepdims=True)  # s(i, i) as a column
    pos_row = pos.reshape(1, B)
    off = (~diag).astype(float)
    sent_to_img = ad.relu(sim - pos + margin) * off  # row i: caption i vs image j
    img_to_sent = ad.relu(sim - pos_row + margin) * off  # column j: image j vs caption i
    n_pairs = 2 * B * (B - 1)
    return (sent_to_img.sum() + img_to_sent.sum()) * (1.0 / n_pairs)


def ism_from_states(model: TdenModel, pair: EncodedPair, margin: float | None = None) -> Tensor:
    margin = model.cfg.ism_margin if margin is None else margin
    u, v = model.ism_similarity(pair.H_S, pair.s_valid, pair.H_I, pair.i_valid)
    return ism_from_pooled(u, v, margin)


def ism_cross(model: TdenModel, pair: EncodedPair, positive_out: Tensor | None = None) -> Tensor:
    """ISM on cross-encoder outputs; the ablation variant.

    Each caption i is paired with image i+1 (cyclically) as its negative,
    which also serves as the negative for image i+1.
    """
    B = len(pair.words)
    if B < 2:
        raise ValueError("ISM needs a batch of at least two pairs")
    Ls = pair.H_S.shape[1]
    margin = model.cfg.ism_margin
    if positive_out is None:
        positive_out = model.cross_encode(pair)
    shift = np.roll(np.arange(B), -1)
    rolled = RegionBatch(
        pair.regions.features[shift], pair.regions.boxes[shift], pair.regions.dists[shift],
        pair.regions.masked[shift], pair.regions.counts[shift],
    )
    negative = EncodedPair(pair.H_S, pair.H_I[shift], pair.words, rolled)
    negative_out = model.cross_encode(negative)

    def score(out: Tensor, i_valid: np.ndarray) -> Tensor:
        u, v = model.ism_similarity(out[:, :Ls], pair.s_valid, out[:, Ls:], i_valid)
        return (u * v).sum(axis=1)

    s_pos = score(positive_out, pair.i_valid)
    s_neg = score(negative_out, rolled.valid)
    s_pos_next = s_pos[shift]
    hinge = ad.relu(s_neg - s_pos + margin) + ad.relu(s_neg - s_pos_next + margin)
    return hinge.sum() * (1.0 / (2 * B))


# ---------------------------------------------------------------- single pass


@dataclass
class PassOutputs:
    """First-pass word distributions at the masked word positions."""

    item: np.ndarray
    rows: np.ndarray
    enc_word_dists: np.ndarray | None = None
    dec_word_dists: np.ndarray | None = None


@dataclass
class PassResult:
    terms: dict[str, Tensor]
    outputs: PassOutputs
    H_I: Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def total(self) -> Tensor:
        return sum_terms(self.terms)


def sum_terms(terms: dict[str, Tensor]) -> Tensor:
    total = None
    for value in terms.values():
        total = value if total is None else total + value
    if total is None:
        raise ValueError("no loss terms enabled")
    return total


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def understanding_pass(model, batch, words: WordBatch, H_I: Tensor, regions: RegionBatch, H_S=None):
    """MLM and MOC through the cross-modal encoder for word sequence ``words``."""
    if H_S is None:
        H_S = model.encode_sentence(words)
    pair = EncodedPair(H_S, H_I, words, regions)
    cross_out = model.cross_encode(pair)
    mlm, logits = mlm_from_states(model, cross_out, batch)
    moc = moc_from_states(model, cross_out, batch, words.ids.shape[1])
    return mlm, moc, _softmax_rows(logits.data), pair, cross_out


def generation_pass(model, batch, words: WordBatch, H_I: Tensor, regions: RegionBatch):
    """MSG through the cross-modal decoder for word sequence ``words``.

    Also returns the decoder's distribution at each masked word position
    (read off the row before it).
    """
    G = model.encode_sentence(words, causal=True)
    dec_out = model.cross_decode(G, words.valid, H_I, regions.valid)
    msg, _, _ = msg_from_states(model, dec_out, WordBatch.collate(batch.originals))
    bi, rows, _ = batch.word_index()
    dists = _softmax_rows(model.logits_generation(dec_out[bi, rows - 1]).data) if len(bi) else None
    return msg, dists


def loss_tden(batch: MaskedBatch, model: TdenModel, losses=ALL_LOSSES) -> PassResult:
    """Single-pass pretraining loss: sum of the enabled proxy objectives."""
    losses = tuple(losses)
    unknown = set(losses) - set(ALL_LOSSES)
    if unknown:
        raise ValueError(f"unknown losses {sorted(unknown)}")
    words, regions = batch.words, batch.region_batch
    H_I = model.encode_objects(regions)
    H_S = model.encode_sentence(words)
    pair = EncodedPair(H_S, H_I, words, regions)
    bi, rows, _ = batch.word_index()
    outputs = PassOutputs(bi, rows)
    terms: dict[str, Tensor] = {}
    cross_out = None
    if "mlm" in losses or "moc" in losses:
        mlm, moc, enc_dists, _, cross_out = understanding_pass(model, batch, words, H_I, regions, H_S)
        outputs.enc_word_dists = enc_dists
        if "mlm" in losses:
            terms["mlm"] = mlm
        if "moc" in losses:
            terms["moc"] = moc
    if "ism" in losses:
        if model.cfg.ism_placement == "cross":
            terms["ism"] = ism_cross(model, pair, cross_out)
        else:
            terms["ism"] = ism_from_states(model, pair)
    if "msg" in losses:
        terms["msg"], outputs.dec_word_dists = generation_pass(model, batch, words, H_I, regions)
    ordered = {k: terms[k] for k in ALL_LOSSES if k in terms}
    return PassResult(ordered, outputs, H_I)


# ---------------------------------------------------------------- standalone losses


def loss_mlm(batch: MaskedBatch, model: TdenModel) -> Tensor:
    words, regions = batch.words, batch.region_batch
    H_I = model.encode_objects(regions)
    return understanding_pass(model, batch, words, H_I, regions)[0]


def loss_moc(batch: MaskedBatch, model: TdenModel) -> Tensor:
    words, regions = batch.words, batch.region_batch
    H_I = model.encode_objects(regions)
    return understanding_pass(model, batch, words, H_I, regions)[1]


def loss_ism(batch: MaskedBatch, model: TdenModel) -> Tensor:
    words, regions = batch.words, batch.region_batch
    pair = model.encode_pair(words, regions)
    if model.cfg.ism_placement == "cross":
        return ism_cross(model, pair)
    return ism_from_states(model, pair)


def loss_msg(batch: MaskedBatch, model: TdenModel) -> Tensor:
    """MSG on the (possibly masked) word inputs; targets are the original words."""
    regions = batch.region_batch
    H_I = model.encode_objects(regions)
    return generation_pass(model, batch, batch.words, H_I, regions)[0]


def clean_batch(batch: MaskedBatch) -> MaskedBatch:
    """The uncorrupted pairs, keeping the mask positions as supervision targets."""
    return MaskedBatch(
        batch.originals, batch.originals, batch.clean_regions or batch.regions,
        batch.word_mask_positions, batch.word_targets,
        batch.region_mask_positions, batch.region_targets, batch.clean_regions,
    )
