import math

import numpy as np
import pytest

from tden.autodiff import Tape, Tensor
from tden.model import TdenModel
from tden.nn import tiny_config
from tden.proxy import (
    ism_from_pooled,
    loss_ism,
    loss_mlm,
    loss_moc,
    loss_msg,
    loss_tden,
    make_masked_batch,
    mask_regions,
    mask_words,
    msg_targets,
)
from tden.structures import CLS, IMG, MASK, SEP, RegionSet, TokenSeq, WordBatch
from tden.train import Adam


def ism_loop_oracle(u, v, m):
    B = len(u)
    s = [[float(np.dot(u[i], v[j])) for j in range(B)] for i in range(B)]
    total = 0.0
    for i in range(B):
        for j in range(B):
            if i != j:
                total += max(0.0, m - s[i][i] + s[i][j])  # caption i, wrong image j
                total += max(0.0, m - s[j][j] + s[i][j])  # image j, wrong caption i
    return total / (2 * B * (B - 1))


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- masking


def test_mask_words_p0_identity(rng):
    seq = TokenSeq.wrap([5, 6, 7])
    out, pos, tgt = mask_words(seq, rng, 0.0)
    np.testing.assert_array_equal(out.ids, seq.ids)
    assert len(pos) == 0 and len(tgt) == 0


def test_mask_words_p1_masks_every_word(rng):
    seq = TokenSeq.wrap([5, 6, 7])
    out, pos, tgt = mask_words(seq, rng, 1.0)
    np.testing.assert_array_equal(out.ids, [CLS, MASK, MASK, MASK, SEP])
    np.testing.assert_array_equal(pos, [1, 2, 3])
    np.testing.assert_array_equal(tgt, [5, 6, 7])


def test_mask_words_forces_one_mask(rng):
    seq = TokenSeq.wrap([9])
    for _ in range(50):
        out, pos, _ = mask_words(seq, rng, 0.01)
        assert list(pos) == [1] and out.ids[1] == MASK


def test_mask_words_rate_long_sequences():
    # 200-word sequences: the forced-mask redraw fires with prob 0.85**200 ~ 1e-14
    rng = np.random.default_rng(0)
    seq = TokenSeq.wrap(np.full(200, 7))
    masked = sum(len(mask_words(seq, rng)[1]) for _ in range(500))
    assert abs(masked / 100_000 - 0.15) < 0.01


@pytest.mark.parametrize("n", [3, 7])
def test_mask_words_rate_short_sequences_conditional(n):
    """Redrawing until one mask lands gives E[rate] = p / (1 - (1-p)^n)."""
    rng = np.random.default_rng(n)
    seq = TokenSeq.wrap(np.full(n, 7))
    trials = 20_000
    rate = sum(len(mask_words(seq, rng)[1]) for _ in range(trials)) / (trials * n)
    expected = 0.15 / (1 - 0.85 ** n)
    sd = math.sqrt(expected * (1 - expected) / (trials * n))
    assert abs(rate - expected) < 4 * sd + 1e-3


def _regions(rng, n, C=5):
    return RegionSet(rng.normal(size=(n, 4)), np.tile([0, 0, 1, 1, 1.0], (n, 1)), rng.dirichlet(np.ones(C), n))


def test_mask_regions_semantics(rng):
    rs = _regions(rng, 6)
    out, pos, tgt = mask_regions(rs, rng, 1.0)
    assert out.masked.all() and np.all(out.features == 0)
    np.testing.assert_array_equal(out.boxes, rs.boxes)
    np.testing.assert_array_equal(tgt, rs.dists)
    out, pos, tgt = mask_regions(rs, rng, 0.0)
    assert len(pos) == 0 and not out.masked.any()
    np.testing.assert_array_equal(out.features, rs.features)


def test_mask_regions_rate():
    rng = np.random.default_rng(1)
    rs = _regions(rng, 200)
    masked = sum(len(mask_regions(rs, rng)[1]) for _ in range(100))
    assert abs(masked / 20_000 - 0.15) < 0.01


def test_specials_never_masked(world):
    from tden.data import gen_dataset

    rng = np.random.default_rng(2)
    recs = gen_dataset(world, 50, 3)
    batch = make_masked_batch([r.pair() for r in recs], rng, 0.9, 0.9)
    for seq, pos in zip(batch.tokens, batch.word_mask_positions):
        assert seq.ids[0] == CLS and seq.ids[-1] == SEP
        assert np.all((pos >= 1) & (pos <= len(seq) - 2))
        assert set(np.flatnonzero(seq.ids == MASK)) == set(pos)
    for orig, tgt, pos in zip(batch.originals, batch.word_targets, batch.word_mask_positions):
        np.testing.assert_array_equal(orig.ids[pos], tgt)


def test_masking_reproducible(world):
    from tden.data import gen_dataset

    pairs = [r.pair() for r in gen_dataset(world, 8, 0)]
    a = make_masked_batch(pairs, np.random.default_rng(5))
    b = make_masked_batch(pairs, np.random.default_rng(5))
    for x, y in zip(a.tokens, b.tokens):
        np.testing.assert_array_equal(x.ids, y.ids)
    for x, y in zip(a.region_mask_positions, b.region_mask_positions):
        np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------- ISM


def test_ism_hinge_inactive():
    u = np.array([[1.0, 0.0], [-1.0, 0.0]])
    v = u.copy()  # s(i,i) = 1, s(i,j) = -1
    assert ism_from_pooled(Tensor(u), Tensor(v), 0.2).item() == 0.0


def test_ism_identical_pairs_give_margin(rng):
    u = np.tile(unit(rng.normal(size=(1, 5))), (4, 1))
    v = np.tile(unit(rng.normal(size=(1, 5))), (4, 1))
    assert ism_from_pooled(Tensor(u), Tensor(v), 0.2).item() == pytest.approx(0.2, abs=1e-15)


def test_ism_identical_images_caption_direction_is_margin(rng):
    u = unit(rng.normal(size=(4, 5)))
    v = np.tile(unit(rng.normal(size=(1, 5))), (4, 1))
    sim = u @ v.T
    caption_half = sum(max(0, 0.2 - sim[i, i] + sim[i, j]) for i in range(4) for j in range(4) if i != j)
    assert caption_half == pytest.approx(0.2 * 12, abs=1e-14)


def test_ism_matches_double_loop(rng):
    for B in (2, 3, 7):
        u, v = unit(rng.normal(size=(B, 6))), unit(rng.normal(size=(B, 6)))
        got = ism_from_pooled(Tensor(u), Tensor(v), 0.2).item()
        assert abs(got - ism_loop_oracle(u, v, 0.2)) < 1e-10


def test_ism_model_matches_oracle_and_is_nonnegative(tiny_model, batch):
    pair = tiny_model.encode_pair(batch.words, batch.region_batch)
    u, v = tiny_model.ism_similarity(pair.H_S, pair.s_valid, pair.H_I, pair.i_valid)
    np.testing.assert_allclose(np.linalg.norm(u.data, axis=1), 1.0, atol=1e-12)
    got = loss_ism(batch, tiny_model).item()
    assert got >= 0
    assert abs(got - ism_loop_oracle(u.data, v.data, 0.2)) < 1e-10


def test_ism_needs_two_pairs():
    with pytest.raises(ValueError):
        ism_from_pooled(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), 0.2)


def test_ism_cross_placement_runs(tiny_cfg, batch):
    import dataclasses

    model = TdenModel(dataclasses.replace(tiny_cfg, ism_placement="cross"), 0)
    model.calls.clear()
    val = loss_ism(batch, model).item()
    assert np.isfinite(val) and val >= 0
    assert model.calls["cross_encoder"] == 2


# ---------------------------------------------------------------- MLM / MOC / MSG


def test_mlm_requires_masked_word(tiny_model, world):
    from tden.data import gen_dataset

    pairs = [r.pair() for r in gen_dataset(world, 2, 0)]
    batch = make_masked_batch(pairs, np.random.default_rng(0), 0.0, 0.5)
    with pytest.raises(ValueError):
        loss_mlm(batch, tiny_model)
    batch = make_masked_batch(pairs, np.random.default_rng(0), 0.5, 0.0)
    with pytest.raises(ValueError):
        loss_moc(batch, tiny_model)


def test_mlm_ignores_unmasked_targets(tiny_model, batch):
    before = loss_mlm(batch, tiny_model).item()
    for orig, pos in zip(batch.originals, batch.word_mask_positions):
        free = [i for i in range(1, len(orig) - 1) if i not in set(pos)]
        if free:
            orig.ids[free[0]] = 4 if orig.ids[free[0]] != 4 else 5
    assert loss_mlm(batch, tiny_model).item() == before


def test_uniform_heads_give_log_sizes(batch, tiny_cfg):
    model = TdenModel(tiny_cfg, 0)
    for head in (model.word_classifier, model.object_classifier):
        for p in head.parameters():
            p.data[...] = 0.0
    assert loss_mlm(batch, model).item() == pytest.approx(math.log(tiny_cfg.vocab_size), abs=1e-12)
    assert loss_msg(batch, model).item() == pytest.approx(math.log(tiny_cfg.vocab_size), abs=1e-12)
    _, _, tgt = batch.region_index()
    C = tiny_cfg.n_object_classes
    expected = float(np.mean([(t[t > 0] * np.log(t[t > 0] * C)).sum() for t in tgt]))
    assert loss_moc(batch, model).item() == pytest.approx(expected, abs=1e-12)


def test_moc_one_hot_uniform_is_log_c(tiny_cfg, batch):
    model = TdenModel(tiny_cfg, 0)
    for p in model.object_classifier.parameters():
        p.data[...] = 0.0
    C = tiny_cfg.n_object_classes
    for t in batch.region_targets:
        t[...] = np.eye(C)[np.zeros(len(t), int)]
    assert loss_moc(batch, model).item() == pytest.approx(math.log(C), abs=1e-12)


def test_msg_targets_one_word():
    words = WordBatch.collate([TokenSeq.wrap([7]), TokenSeq.wrap([5, 6, 8])])
    bi, rows, tgt = msg_targets(words)
    assert list(zip(bi, rows, tgt)) == [(0, 0, 7), (0, 1, SEP), (1, 0, 5), (1, 1, 6), (1, 2, 8), (1, 3, SEP)]


def test_loss_tden_is_sum_of_parts(tiny_model, batch):
    r = loss_tden(batch, tiny_model)
    parts = (loss_mlm(batch, tiny_model).data + loss_moc(batch, tiny_model).data
             + loss_ism(batch, tiny_model).data + loss_msg(batch, tiny_model).data)
    assert r.total.data == parts
    assert list(r.terms) == ["mlm", "moc", "ism", "msg"]


def test_loss_tden_subsets(tiny_model, batch):
    r = loss_tden(batch, tiny_model, ("msg", "ism"))
    assert list(r.terms) == ["ism", "msg"]
    with pytest.raises(ValueError):
        loss_tden(batch, tiny_model, ("nsp",))


def test_loss_tden_gradient_reaches_every_group(tiny_model, batch):
    tiny_model.zero_grad()
    with Tape() as tape:
        loss = loss_tden(batch, tiny_model).total
    tape.backward(loss)
    for name, group in tiny_model.parameter_groups().items():
        norm = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in group if p.grad is not None))
        assert norm > 0, name


def test_tiny_overfit_single_pair(world):
    from tden.data import gen_dataset

    cfg = tiny_config(d_model=32, n_heads=4, init_std=0.1)
    model = TdenModel(cfg, 0)
    rec = gen_dataset(world, 1, 7)[0]
    pairs = [rec.pair(), rec.pair()]  # ISM needs two pairs; duplicates are fine here
    opt = Adam(3e-3)
    params = list(model.named_parameters())
    for step in range(200):
        batch = make_masked_batch(pairs, np.random.default_rng(step), 0.5, 0.5)
        model.zero_grad()
        with Tape() as tape:
            loss = loss_tden(batch, model, ("mlm", "moc", "msg")).total
        tape.backward(loss)
        opt.step(params)
    batch = make_masked_batch(pairs, np.random.default_rng(999), 0.5, 0.5)
    terms = {k: v.item() for k, v in loss_tden(batch, model, ("mlm", "moc", "msg")).terms.items()}
    assert terms["mlm"] < 0.1 and terms["msg"] < 0.1 and terms["moc"] < 0.05, terms


def test_never_masks_img_row(batch):
    _, rows, _ = batch.region_index()
    assert np.all(rows >= 1)
    assert IMG not in np.concatenate([t.ids for t in batch.tokens])
