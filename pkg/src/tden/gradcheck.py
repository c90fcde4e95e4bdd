"""Finite-difference gradient suite over ops, blocks and the full pretraining loss."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .data import DataConfig, World, gen_dataset
from .model import TdenModel
from .nn import (
    AttentionPool,
    DecoderBlock,
    EncoderBlock,
    ModelConfig,
    MultiHeadAttention,
    RegionEmbedding,
    WordEmbedding,
    causal_mask,
    full_mask,
    tiny_config,
)
from .proxy import loss_tden, make_masked_batch
from .sampling import sample_replacements, step_two_pass_a, step_two_pass_b, step_two_pass_c


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-2, 2, shape) * scale, requires_grad=True)


def tiny_world(cfg: ModelConfig) -> World:
    return World.create(DataConfig(
        n_object_classes=cfg.n_object_classes, n_attributes=3, min_regions=2, d_region_feat=cfg.d_region_feat,
        max_regions=cfg.max_regions, vocab_size=cfg.vocab_size, max_seq_len=cfg.max_seq_len,
    ))


def tiny_batch(cfg: ModelConfig, n: int = 2, seed: int = 0):
    world = tiny_world(cfg)
    records = gen_dataset(world, n, seed)
    return make_masked_batch([r.pair() for r in records], np.random.default_rng(seed), 0.5, 0.5)


def op_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    x3 = _leaf(rng, 2, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2, (3, 4)), requires_grad=True)
    gain, bias = _leaf(rng, 4), _leaf(rng, 4)
    logits = _leaf(rng, 5, 6)
    targets = rng.integers(0, 6, 5)
    dist = rng.dirichlet(np.ones(6), 5)
    idx = np.array([0, 2, 2, 1])
    return {
        "matmul": lambda: grad_check(lambda: (a @ b).sum() * 0.5 + ((a @ b) * (a @ b)).sum(), [a, b]),
        "batched_matmul": lambda: grad_check(lambda: ((x3 @ b) * (x3 @ b)).sum(), [x3, b]),
        "add_mul_div": lambda: grad_check(lambda: ((a * a + a) / pos).sum(), [a, pos]),
        "sqrt_exp_log": lambda: grad_check(lambda: (ad.sqrt(pos) + ad.exp(a) * 0.1 + ad.log(pos)).sum(), [pos, a]),
        "tanh_gelu": lambda: grad_check(lambda: (ad.tanh(a) * ad.gelu(a)).sum(), [a]),
        "softmax": lambda: grad_check(lambda: (ad.softmax(x3, axis=-1) * x3).sum(), [x3]),
        "log_softmax": lambda: grad_check(lambda: (ad.log_softmax(x3, axis=1) * x3).sum(), [x3]),
        "layer_norm": lambda: grad_check(
            lambda: (ad.layer_norm(x3, gain, bias) * x3).sum(), [x3, gain, bias]),
        "cross_entropy": lambda: grad_check(lambda: ad.cross_entropy(logits, targets), [logits]),
        "weighted_cross_entropy": lambda: grad_check(
            lambda: ad.cross_entropy(logits, targets, [1, 0, 1, 1, 0]), [logits]),
        "kl_divergence": lambda: grad_check(lambda: ad.kl_divergence(logits, dist), [logits]),
        "bce_logits": lambda: grad_check(
            lambda: ad.binary_cross_entropy_with_logits(logits, dist), [logits]),
        "index_concat_transpose": lambda: grad_check(
            lambda: (ad.concat([a[idx], a.transpose(1, 0) @ a], axis=0) * 1.5).sum(), [a]),
        "masked_fill_mean": lambda: grad_check(
            lambda: (ad.masked_fill(a, np.eye(3, 4, dtype=bool), -3.0) * a).mean(), [a]),
    }


def block_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    cfg = tiny_config(init_std=0.5)
    rng = np.random.default_rng(seed)
    L, d = 3, cfg.d_model
    x = _leaf(rng, 2, L, d)
    vis = _leaf(rng, 2, 4, d)
    valid = np.array([[True] * L, [True, True, False]])
    vvalid = np.array([[True] * 4, [True, True, True, False]])
    attn = MultiHeadAttention(d, cfg.n_heads, rng, 0.5)
    enc = EncoderBlock(cfg, rng)
    dec = DecoderBlock(cfg, rng)
    words = WordEmbedding(cfg, rng)
    regions = RegionEmbedding(cfg, rng)
    pool = AttentionPool(d, rng, 0.5)
    ids = np.array([[0, 5, 5, 1], [0, 7, 1, 1]])
    feats = rng.normal(size=(2, 3, cfg.d_region_feat))
    boxes = rng.uniform(size=(2, 3, 5))
    masked = np.array([[False, True, False], [False, False, False]])
    counts = np.array([3, 2])
    w = Tensor(rng.normal(size=(2, 4, d)))
    return {
        "multi_head_attention": lambda: grad_check(
            lambda: (attn(x, vis, full_mask(valid, vvalid)) * x).sum(), [x, vis] + attn.parameters()),
        "encoder_block": lambda: grad_check(
            lambda: (enc(x, full_mask(valid, valid)) * x).sum(), [x] + enc.parameters()),
        "decoder_block": lambda: grad_check(
            lambda: (dec(x, vis, causal_mask(valid), full_mask(valid, vvalid)) * x).sum(),
            [x, vis] + dec.parameters()),
        "embed_words": lambda: grad_check(lambda: (words(ids) * w).sum(), words.parameters()),
        "embed_regions": lambda: grad_check(
            lambda: (regions(feats, boxes, masked, counts) * w).sum(), regions.parameters()),
        "attention_pool": lambda: grad_check(lambda: (pool(x, valid) * pool(x, valid)).sum(), [x] + pool.parameters()),
    }


def model_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    cfg = tiny_config(init_std=0.3)
    model = TdenModel(cfg, seed)
    batch = tiny_batch(cfg, 2, seed)
    params = model.parameters()

    def fixed_sampler(pass1, originals, rng):
        # a fresh generator per call keeps every loss evaluation on the same draws
        return sample_replacements(pass1, originals, np.random.default_rng(seed + 1))

    return {
        "loss_tden": lambda: grad_check(lambda: loss_tden(batch, model).total, params, max_coords=8),
        "two_pass_a": lambda: grad_check(
            lambda: step_two_pass_a(batch, model, None, fixed_sampler).loss, params, max_coords=4),
        "two_pass_b": lambda: grad_check(
            lambda: step_two_pass_b(batch, model, None, fixed_sampler).loss, params, max_coords=4),
        "two_pass_c": lambda: grad_check(
            lambda: step_two_pass_c(batch, model, None, fixed_sampler, alpha=1).loss
            + step_two_pass_c(batch, model, None, fixed_sampler, alpha=0).loss,
            params, max_coords=4),
    }


def run_suite(seed: int = 0, include_model: bool = True) -> dict[str, float]:
    """Max relative error per check name; ``"_seconds"`` holds the wall time."""
    start = time.perf_counter()
    checks = {**op_checks(seed), **block_checks(seed)}
    if include_model:
        checks.update(model_checks(seed))
    out = {name: fn() for name, fn in checks.items()}
    out["_seconds"] = time.perf_counter() - start
    return out
