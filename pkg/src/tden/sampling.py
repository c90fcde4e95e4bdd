"""Two-pass pretraining with scheduled sampling.

The first pass runs on masked inputs.  Every [MASK] is then replaced by a
token sampled from the first-pass word distribution of the cross-modal
encoder (giving ``S_E``) or decoder (giving ``S_D``), and a second,
mask-free pass is run.  Sampled ids are plain integers, so no gradient
reaches the first pass through them.

Schemes:

* ``two_pass_a``: second pass runs MLM+MOC on ``S_E`` and MSG on ``S_D``.
* ``two_pass_b``: the sequences are exchanged (MSG on ``S_E``, MLM+MOC on ``S_D``).
* ``two_pass_c``: a fair coin picks one cross-modal stack for the masked
  first pass; the other stack runs the second pass.  ISM runs once on the
  uncorrupted pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .model import EncodedPair, TdenModel
from .proxy import (
    ALL_LOSSES,
    PassOutputs,
    generation_pass,
    ism_cross,
    ism_from_states,
    loss_tden,
    sum_terms,
    understanding_pass,
)
from .structures import SPECIAL_IDS, MaskedBatch, RegionBatch, TokenSeq, WordBatch

SCHEMES = ("none", "two_pass_a", "two_pass_b", "two_pass_c")


@dataclass
class SampledSequences:
    S_E: list[TokenSeq] | None
    S_D: list[TokenSeq] | None


@dataclass
class StepResult:
    loss: Tensor
    terms: dict[str, Tensor]
    pass1: PassOutputs
    sampled: SampledSequences | None = None
    alpha: int | None = None


def _draw(dists: np.ndarray, rng: np.random.Generator, argmax: bool) -> np.ndarray:
    if not np.isfinite(dists).all():
        raise FloatingPointError("word distribution contains NaN or Inf")
    p = dists.copy()
    p[:, list(SPECIAL_IDS)] = 0.0
    mass = p.sum(axis=1, keepdims=True)
    if (mass <= 0).any():
        raise ValueError("word distribution has no mass outside the special ids")
    p /= mass
    if argmax:
        return p.argmax(axis=1)
    u = rng.random(len(p))
    cdf = np.cumsum(p, axis=1)
    ids = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(ids, p.shape[1] - 1)


def _fill(originals: list[TokenSeq], item, rows, ids) -> list[TokenSeq]:
    out = [s.ids.copy() for s in originals]
    for b, r, t in zip(item, rows, ids):
        out[b][r] = t
    return [TokenSeq(x) for x in out]


def sample_replacements(
    pass1: PassOutputs,
    originals: list[TokenSeq],
    rng: np.random.Generator,
    argmax: bool = False,
) -> SampledSequences:
    """Fill each masked position with an id drawn from the first-pass distributions.

    Special ids are never drawn, so the results contain no [MASK].  A
    sequence is ``None`` when its source distribution was not computed.
    """
    seqs = []
    for dists in (pass1.enc_word_dists, pass1.dec_word_dists):
        if dists is None:
            seqs.append(None)
            continue
        ids = _draw(dists, rng, argmax) if len(dists) else np.zeros(0, dtype=np.int64)
        seqs.append(_fill(originals, pass1.item, pass1.rows, ids))
    return SampledSequences(*seqs)


Sampler = Callable[[PassOutputs, list, np.random.Generator], SampledSequences]


def _second_understanding(model, batch: MaskedBatch, seqs, H_I, regions) -> tuple[Tensor, Tensor]:
    b2 = batch.with_words(seqs)
    mlm, moc, *_ = understanding_pass(model, b2, b2.words, H_I, regions)
    return mlm, moc


def _second_generation(model, batch: MaskedBatch, seqs, H_I, regions) -> Tensor:
    b2 = batch.with_words(seqs)
    return generation_pass(model, b2, b2.words, H_I, regions)[0]


def step_single(batch: MaskedBatch, model: TdenModel, rng=None, losses=ALL_LOSSES) -> StepResult:
    r = loss_tden(batch, model, losses)
    return StepResult(r.total, r.terms, r.outputs)


def _two_pass_ab(batch, model, rng, sampler, exchange: bool) -> StepResult:
    sampler = sampler or sample_replacements
    first = loss_tden(batch, model)
    sampled = sampler(first.outputs, batch.originals, rng)
    regions = batch.region_batch
    enc_seqs, dec_seqs = (sampled.S_D, sampled.S_E) if exchange else (sampled.S_E, sampled.S_D)
    terms = dict(first.terms)
    if exchange:
        terms["msg_2"] = _second_generation(model, batch, dec_seqs, first.H_I, regions)
        terms["mlm_2"], terms["moc_2"] = _second_understanding(model, batch, enc_seqs, first.H_I, regions)
    else:
        terms["mlm_2"], terms["moc_2"] = _second_understanding(model, batch, enc_seqs, first.H_I, regions)
        terms["msg_2"] = _second_generation(model, batch, dec_seqs, first.H_I, regions)
    return StepResult(sum_terms(terms), terms, first.outputs, sampled)


def step_two_pass_a(batch: MaskedBatch, model: TdenModel, rng, sampler: Sampler | None = None) -> StepResult:
    """L_TDEN + MLM(S_E) + MOC(S_E) + MSG(S_D)."""
    return _two_pass_ab(batch, model, rng, sampler, exchange=False)


def step_two_pass_b(batch: MaskedBatch, model: TdenModel, rng, sampler: Sampler | None = None) -> StepResult:
    """L_TDEN + MSG(S_E) + MLM(S_D) + MOC(S_D)."""
    return _two_pass_ab(batch, model, rng, sampler, exchange=True)


def draw_alpha(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2))


def step_two_pass_c(
    batch: MaskedBatch,
    model: TdenModel,
    rng,
    sampler: Sampler | None = None,
    alpha: int | None = None,
) -> StepResult:
    """One cross-modal stack per pass, chosen by ``alpha`` (1: encoder first)."""
    sampler = sampler or sample_replacements
    if alpha is None:
        alpha = draw_alpha(rng)
    if alpha not in (0, 1):
        raise ValueError("alpha must be 0 or 1")
    words, regions = batch.words, batch.region_batch
    H_I = model.encode_objects(regions)
    bi, rows, _ = batch.word_index()
    pass1 = PassOutputs(bi, rows)
    terms: dict[str, Tensor] = {}
    if alpha == 1:
        terms["mlm"], terms["moc"], pass1.enc_word_dists, *_ = understanding_pass(
            model, batch, words, H_I, regions
        )
        sampled = sampler(pass1, batch.originals, rng)
        terms["msg_2"] = _second_generation(model, batch, sampled.S_E, H_I, regions)
    else:
        terms["msg"], pass1.dec_word_dists = generation_pass(model, batch, words, H_I, regions)
        sampled = sampler(pass1, batch.originals, rng)
        terms["mlm_2"], terms["moc_2"] = _second_understanding(model, batch, sampled.S_D, H_I, regions)
    terms["ism"] = clean_ism(batch, model)
    return StepResult(sum_terms(terms), terms, pass1, sampled, alpha)


def clean_ism(batch: MaskedBatch, model: TdenModel) -> Tensor:
    """ISM on the uncorrupted sentences and regions."""
    words = WordBatch.collate(batch.originals)
    regions = RegionBatch.collate(batch.clean_regions or batch.regions)
    pair = EncodedPair(model.encode_sentence(words), model.encode_objects(regions), words, regions)
    if model.cfg.ism_placement == "cross":
        return ism_cross(model, pair)
    return ism_from_states(model, pair)


def run_step(scheme: str, batch: MaskedBatch, model: TdenModel, rng, losses=ALL_LOSSES) -> StepResult:
    if scheme == "none":
        return step_single(batch, model, rng, losses)
    if tuple(sorted(losses)) != tuple(sorted(ALL_LOSSES)):
        raise ValueError("two-pass schemes need all four proxy losses")
    if scheme == "two_pass_a":
        return step_two_pass_a(batch, model, rng)
    if scheme == "two_pass_b":
        return step_two_pass_b(batch, model, rng)
    if scheme == "two_pass_c":
        return step_two_pass_c(batch, model, rng)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
