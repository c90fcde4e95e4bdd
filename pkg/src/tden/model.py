"""Two-stream decoupled encoder-decoder.

Object and sentence encoders are shared by both paths.  The cross-modal
encoder (unrestricted attention over ``[sentence, visual]``) serves the
understanding heads; the cross-modal decoder (causal words, cross-attention
to visual tokens) serves generation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (
    AttentionPool,
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    ModelConfig,
    Module,
    RegionEmbedding,
    WordEmbedding,
    causal_mask,
    full_mask,
)
from .structures import RegionBatch, WordBatch


class EncoderStack(Module):
    def __init__(self, n_blocks: int, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(n_blocks)]
        self.final_ln = LayerNorm(cfg.d_model, cfg.ln_eps)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        for block in self.blocks:
            x = block(x, mask)
        return self.final_ln(x)


class DecoderStack(Module):
    def __init__(self, n_blocks: int, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(n_blocks)]
        self.final_ln = LayerNorm(cfg.d_model, cfg.ln_eps)

    def __call__(self, words, visual, causal, cross) -> Tensor:
        for block in self.blocks:
            words = block(words, visual, causal, cross)
        return self.final_ln(words)


class IsmHead(Module):
    """Attention pooling per modality for image-sentence similarity."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.sentence = AttentionPool(cfg.d_model, rng, cfg.init_std)
        self.image = AttentionPool(cfg.d_model, rng, cfg.init_std)


@dataclass
class EncodedPair:
    """Single-modality encoder outputs of a minibatch of pairs."""

    H_S: Tensor
    H_I: Tensor
    words: WordBatch
    regions: RegionBatch

    def __post_init__(self):
        if self.H_S.shape[-1] != self.H_I.shape[-1]:
            raise ValueError("sentence and visual states differ in width")

    @property
    def s_valid(self) -> np.ndarray:
        return self.words.valid

    @property
    def i_valid(self) -> np.ndarray:
        return self.regions.valid


class TdenModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        std = cfg.init_std
        self.word_embedding = WordEmbedding(cfg, rng)
        self.region_embedding = RegionEmbedding(cfg, rng)
        self.object_encoder = EncoderStack(cfg.K_I, cfg, rng)
        self.sentence_encoder = EncoderStack(cfg.K_S, cfg, rng)
        self.cross_encoder = EncoderStack(cfg.K_E, cfg, rng)
        self.cross_decoder = DecoderStack(cfg.K_D, cfg, rng)
        self.word_classifier = Linear(cfg.d_model, cfg.vocab_size, rng, std)
        self.msg_classifier = (
            None if cfg.tie_word_classifier else Linear(cfg.d_model, cfg.vocab_size, rng, std)
        )
        self.object_classifier = Linear(cfg.d_model, cfg.n_object_classes, rng, std)
        self.ism_pool = IsmHead(cfg, rng)
        # cross-modal stack invocations, for cost accounting
        self.calls: Counter = Counter()

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append((name, p))
        return groups

    # -- single-modality encoders

    def encode_objects(self, regions: RegionBatch) -> Tensor:
        x = self.region_embedding(regions.features, regions.boxes, regions.masked, regions.counts)
        valid = regions.valid
        return self.object_encoder(x, full_mask(valid, valid))

    def encode_sentence(self, words: WordBatch, causal: bool = False) -> Tensor:
        """Sentence encoder states; ``causal=True`` gives the left-to-right view
        fed to the decoder, so no row sees later words."""
        x = self.word_embedding(words.ids)
        valid = words.valid
        mask = causal_mask(valid) if causal else full_mask(valid, valid)
        return self.sentence_encoder(x, mask)

    def encode_pair(self, words: WordBatch, regions: RegionBatch) -> EncodedPair:
        return EncodedPair(self.encode_sentence(words), self.encode_objects(regions), words, regions)

    # -- cross-modal stacks

    def cross_encode(self, pair: EncodedPair) -> Tensor:
        """``[H_S, H_I]`` through the cross-modal encoder; sentence rows come first."""
        self.calls["cross_encoder"] += 1
        x = ad.concat([pair.H_S, pair.H_I], axis=1)
        valid = np.concatenate([pair.s_valid, pair.i_valid], axis=1)
        return self.cross_encoder(x, full_mask(valid, valid))

    def cross_decode(
        self, word_states: Tensor, s_valid: np.ndarray, visual_states: Tensor, i_valid: np.ndarray
    ) -> Tensor:
        self.calls["cross_decoder"] += 1
        causal = causal_mask(s_valid)
        cross = full_mask(s_valid, i_valid)
        return self.cross_decoder(word_states, visual_states, causal, cross)

    # -- output heads

    def logits_words(self, states: Tensor) -> Tensor:
        return self.word_classifier(states)

    def logits_generation(self, states: Tensor) -> Tensor:
        head = self.word_classifier if self.msg_classifier is None else self.msg_classifier
        return head(states)

    def logits_objects(self, states: Tensor) -> Tensor:
        return self.object_classifier(states)

    def ism_similarity(
        self, H_S: Tensor, s_valid: np.ndarray, H_I: Tensor, i_valid: np.ndarray
    ) -> tuple[Tensor, Tensor]:
        """Unit-normalized pooled sentence and image vectors, each B x d."""
        u = unit_rows(self.ism_pool.sentence(H_S, s_valid))
        v = unit_rows(self.ism_pool.image(H_I, i_valid))
        return u, v


def unit_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ad.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / norm
