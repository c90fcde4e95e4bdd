"""Transformer blocks and position-aware embeddings for words and regions.

All layers take batched ``B x L x d`` inputs together with boolean attention
masks of shape ``B x Lq x Lk`` (true = may attend).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .structures import N_SPECIAL

NEG_INF = -1e9


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    K_I: int = 2
    K_S: int = 2
    K_E: int = 2
    K_D: int = 2
    vocab_size: int = 128
    n_object_classes: int = 24
    d_region_feat: int = 32
    max_seq_len: int = 20
    max_regions: int = 12
    d_ff: int = 0  # 0 means 4 * d_model
    init_std: float = 0.02
    ln_eps: float = 1e-5
    tie_word_classifier: bool = True
    ism_placement: str = "encoder"
    ism_margin: float = 0.2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.K_I, self.K_S, self.K_E, self.K_D) < 1:
            raise ValueError("every stack needs at least one block")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size must leave room beyond the special ids")
        if self.ism_placement not in ("encoder", "cross"):
            raise ValueError(f"unknown ism_placement {self.ism_placement!r}")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The smallest configuration used for gradient checks."""
    base = dict(d_model=8, n_heads=2, K_I=1, K_S=1, K_E=1, K_D=1, vocab_size=24,
                n_object_classes=5, d_region_feat=6, max_seq_len=10, max_regions=4)
    base.update(overrides)
    return ModelConfig(**base)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = _param(rng.normal(0.0, std, (n, d)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.weight.shape[0]:
            raise IndexError(f"id {ids.max()} out of range for table of {self.weight.shape[0]}")
        return self.weight[ids]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def full_mask(valid_q: np.ndarray, valid_k: np.ndarray) -> np.ndarray:
    """B x Lq x Lk mask letting every query see every valid key."""
    return np.broadcast_to(valid_k[:, None, :], (len(valid_k), valid_q.shape[1], valid_k.shape[1]))


def causal_mask(valid: np.ndarray) -> np.ndarray:
    L = valid.shape[1]
    return np.tril(np.ones((L, L), dtype=bool))[None] & valid[:, None, :]


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, std: float = 0.02):
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, std)
        self.k = Linear(d, d, rng, std)
        self.v = Linear(d, d, rng, std)
        self.out = Linear(d, d, rng, std)

    def __call__(self, queries: Tensor, keys_values: Tensor, mask: np.ndarray) -> Tensor:
        return multi_head_attention(queries, keys_values, mask, self)


def multi_head_attention(
    queries: Tensor, keys_values: Tensor, mask: np.ndarray, params: MultiHeadAttention
) -> Tensor:
    """Scaled dot-product attention per head, concatenated and projected."""
    queries, squeeze = _batched(queries)
    keys_values, _ = _batched(keys_values)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    B, Lq, d = queries.shape
    Lk = keys_values.shape[1]
    mask = np.broadcast_to(mask, (B, Lq, Lk))
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask leaves a query row with no permitted key")
    h = params.n_heads
    dh = d // h

    def heads(t: Tensor, L: int) -> Tensor:
        return t.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

    q = heads(params.q(queries), Lq)
    k = heads(params.k(keys_values), Lk)
    v = heads(params.v(keys_values), Lk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    scores = ad.masked_fill(scores, ~mask[:, None, :, :], NEG_INF)
    weights = ad.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    out = params.out(ctx)
    return out.reshape(Lq, d) if squeeze else out


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, std: float = 0.02):
        self.inner = Linear(d, d_ff, rng, std)
        self.outer = Linear(d_ff, d, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.gelu(self.inner(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln_attn = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.init_std)
        self.ln_ffn = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.init_std)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return encoder_block(x, mask, self)


def encoder_block(x: Tensor, mask: np.ndarray, params: EncoderBlock) -> Tensor:
    h = params.ln_attn(x)
    x = x + params.attn(h, h, mask)
    return x + params.ffn(params.ln_ffn(x))


class DecoderBlock(Module):
    """Causal self-attention, cross-attention to visual tokens, then FFN."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.ln_self = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.init_std)
        self.ln_cross = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.init_std)
        self.ln_ffn = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.init_std)

    def __call__(self, words: Tensor, visual: Tensor, causal: np.ndarray, cross: np.ndarray) -> Tensor:
        return decoder_block(words, visual, causal, cross, self)


def decoder_block(
    words: Tensor, visual: Tensor, causal: np.ndarray, cross: np.ndarray, params: DecoderBlock
) -> Tensor:
    """``causal`` masks word-to-word attention, ``cross`` masks word-to-visual."""
    causal = np.asarray(causal, dtype=bool)
    if np.triu(causal if causal.ndim == 2 else causal.any(axis=0), k=1).any():
        raise ValueError("decoder self-attention mask must be lower-triangular")
    h = params.ln_self(words)
    x = words + params.self_attn(h, h, causal)
    x = x + params.cross_attn(params.ln_cross(x), visual, cross)
    return x + params.ffn(params.ln_ffn(x))


class WordEmbedding(Module):
    """Word-id embedding plus learned 1D position embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.tokens = Embedding(cfg.vocab_size, cfg.d_model, rng, cfg.init_std)
        self.positions = Embedding(cfg.max_seq_len, cfg.d_model, rng, cfg.init_std)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embed_words(ids, self)


def embed_words(ids: np.ndarray, params: WordEmbedding) -> Tensor:
    ids = np.asarray(ids)
    L = ids.shape[-1]
    if L > params.positions.weight.shape[0]:
        raise ValueError(f"sequence of length {L} exceeds max_seq_len")
    return params.tokens(ids) + params.positions(np.arange(L))


class RegionEmbedding(Module):
    """Projects region features and 5-value box geometry; row 0 is [IMG]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.features = Linear(cfg.d_region_feat, cfg.d_model, rng, cfg.init_std)
        self.geometry = Linear(5, cfg.d_model, rng, cfg.init_std)
        self.mask_embedding = _param(rng.normal(0.0, cfg.init_std, cfg.d_model))

    def __call__(self, features, boxes, masked, counts) -> Tensor:
        return embed_regions(features, boxes, masked, counts, self)


def embed_regions(features, boxes, masked, counts, params: RegionEmbedding) -> Tensor:
    """Batched region embedding: ``features`` B x N x F, ``counts`` real regions per item.

    The [IMG] row projects the mean raw feature over real regions; it gets no
    geometry term and no mask embedding.
    """
    counts = np.asarray(counts)
    if (counts < 1).any():
        raise ValueError("every image needs at least one region")
    B, N, _ = features.shape
    real = (np.arange(N)[None, :] < counts[:, None]).astype(float)
    pooled = (features * real[..., None]).sum(axis=1) / counts[:, None]
    raw = np.concatenate([pooled[:, None, :], features], axis=1)
    geo = np.concatenate([np.zeros((B, 1, 5)), boxes], axis=1)
    has_geo = np.concatenate([np.zeros((B, 1)), real], axis=1)[..., None]
    is_masked = np.concatenate([np.zeros((B, 1)), masked * real], axis=1)[..., None]
    out = params.features(Tensor(raw))
    out = out + params.geometry(Tensor(geo)) * has_geo
    return out + is_masked * params.mask_embedding


class AttentionPool(Module):
    """Two-layer attention MLP: score each row, softmax over rows, weighted sum, project."""

    def __init__(self, d: int, rng: np.random.Generator, std: float = 0.02, d_hidden: int = 0):
        d_hidden = d_hidden or d
        self.score_hidden = Linear(d, d_hidden, rng, std)
        self.score_out = Linear(d_hidden, 1, rng, std)
        self.merge = Linear(d, d, rng, std)

    def __call__(self, x: Tensor, valid: np.ndarray) -> Tensor:
        B, L, _ = x.shape
        scores = self.score_out(ad.tanh(self.score_hidden(x))).reshape(B, L)
        scores = ad.masked_fill(scores, ~np.asarray(valid, dtype=bool), NEG_INF)
        weights = ad.softmax(scores, axis=1).reshape(B, L, 1)
        return self.merge((x * weights).sum(axis=1))
