import numpy as np
import pytest

from tden.autodiff import Tape, Tensor
from tden.model import EncodedPair, TdenModel
from tden.proxy import loss_ism, loss_mlm, loss_moc, loss_msg, loss_tden
from tden.structures import CLS, SEP, RegionBatch, TokenSeq, WordBatch


def zero_group(model, group):
    for _, p in model.parameter_groups()[group]:
        p.data[...] = 0.0


def losses(batch, model):
    return {k: v.item() for k, v in loss_tden(batch, model).terms.items()}


def test_parameter_groups_disjoint(tiny_model):
    groups = tiny_model.parameter_groups()
    assert {"object_encoder", "sentence_encoder", "cross_encoder", "cross_decoder",
            "word_classifier", "object_classifier", "ism_pool"} <= groups.keys()
    ids = [id(p) for g in groups.values() for _, p in g]
    assert len(ids) == len(set(ids))
    assert tiny_model.msg_classifier is None  # tied by default


def test_encode_shapes(tiny_model, batch, tiny_cfg):
    words, regions = batch.words, batch.region_batch
    pair = tiny_model.encode_pair(words, regions)
    B, Ls = words.ids.shape
    Li = regions.features.shape[1] + 1
    assert pair.H_S.shape == (B, Ls, tiny_cfg.d_model)
    assert pair.H_I.shape == (B, Li, tiny_cfg.d_model)
    assert tiny_model.cross_encode(pair).shape == (B, Ls + Li, tiny_cfg.d_model)
    dec = tiny_model.cross_decode(tiny_model.encode_sentence(words, causal=True), words.valid, pair.H_I, regions.valid)
    assert dec.shape == (B, Ls, tiny_cfg.d_model)
    assert tiny_model.logits_words(dec).shape == (B, Ls, tiny_cfg.vocab_size)
    assert tiny_model.logits_objects(pair.H_I).shape == (B, Li, tiny_cfg.n_object_classes)


def test_single_region_and_empty_sentence(tiny_model, batch):
    rs = batch.clean_regions[0]
    one = RegionBatch.collate([rs.permuted([0])])
    assert tiny_model.encode_objects(one).shape[1] == 2
    empty = WordBatch.collate([TokenSeq.wrap([])])
    assert tiny_model.encode_sentence(empty).shape[1] == 2


def test_sentence_encoder_depends_on_words(tiny_model):
    a = tiny_model.encode_sentence(WordBatch.collate([TokenSeq.wrap([5, 6])])).data
    b = tiny_model.encode_sentence(WordBatch.collate([TokenSeq.wrap([5, 7])])).data
    assert not np.allclose(a, b)


def test_object_encoder_permutation_equivariance(tiny_model, batch):
    rs = batch.clean_regions[1]
    n = len(rs)
    order = np.random.default_rng(3).permutation(n)
    a = tiny_model.encode_objects(RegionBatch.collate([rs])).data[0]
    b = tiny_model.encode_objects(RegionBatch.collate([rs.permuted(order)])).data[0]
    np.testing.assert_allclose(b[1:], a[1:][order], atol=1e-12, rtol=0)
    np.testing.assert_allclose(b[0], a[0], atol=1e-12, rtol=0)


def test_cross_encoder_bidirectional_sensitivity(tiny_model, batch):
    pair = tiny_model.encode_pair(batch.words, batch.region_batch)
    Ls = pair.H_S.shape[1]
    base = tiny_model.cross_encode(pair).data
    H_I = pair.H_I.data.copy()
    H_I[0, 1] += 1e-3
    out = tiny_model.cross_encode(EncodedPair(pair.H_S, Tensor(H_I), pair.words, pair.regions)).data
    assert np.abs(out[0, :Ls] - base[0, :Ls]).max() > 0  # visual -> words
    H_S = pair.H_S.data.copy()
    H_S[0, 1] += 1e-3
    out = tiny_model.cross_encode(EncodedPair(Tensor(H_S), pair.H_I, pair.words, pair.regions)).data
    assert np.abs(out[0, Ls:] - base[0, Ls:]).max() > 0  # words -> visual


def test_cross_encode_width_mismatch():
    with pytest.raises(ValueError):
        EncodedPair(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 2, 6))), None, None)


def test_generation_path_causal_end_to_end(tiny_model, batch):
    regions = batch.region_batch
    H_I = tiny_model.encode_objects(regions)
    before = H_I.data.copy()
    ids = np.array([[CLS, 5, 6, 7, 8, SEP]] * len(regions))
    words = WordBatch(ids, np.full(len(ids), ids.shape[1]))
    base = tiny_model.cross_decode(tiny_model.encode_sentence(words, causal=True), words.valid, H_I, regions.valid).data
    assert np.array_equal(H_I.data, before)
    for j in range(1, ids.shape[1]):
        pert = ids.copy()
        pert[:, j:] = 9
        w2 = WordBatch(pert, words.lengths)
        out = tiny_model.cross_decode(tiny_model.encode_sentence(w2, causal=True), w2.valid, H_I, regions.valid).data
        assert np.array_equal(out[:, :j], base[:, :j])


def test_decoupling_decoder_params_do_not_affect_understanding(tiny_model, batch):
    before = losses(batch, tiny_model)
    zero_group(tiny_model, "cross_decoder")
    after = losses(batch, tiny_model)
    for k in ("mlm", "moc", "ism"):
        assert after[k] == before[k], k
    assert after["msg"] != before["msg"]


def test_decoupling_cross_encoder_params_do_not_affect_generation(tiny_model, batch):
    before = losses(batch, tiny_model)
    zero_group(tiny_model, "cross_encoder")
    after = losses(batch, tiny_model)
    for k in ("msg", "ism"):
        assert after[k] == before[k], k
    assert after["mlm"] != before["mlm"]


def test_ism_independent_of_both_cross_modal_stacks(tiny_model, batch):
    before = loss_ism(batch, tiny_model).item()
    zero_group(tiny_model, "cross_encoder")
    zero_group(tiny_model, "cross_decoder")
    assert loss_ism(batch, tiny_model).item() == before


def test_msg_gradient_reaches_shared_encoders(tiny_model, batch):
    tiny_model.zero_grad()
    with Tape() as tape:
        loss = loss_msg(batch, tiny_model)
    tape.backward(loss)
    groups = tiny_model.parameter_groups()
    for g in ("object_encoder", "sentence_encoder", "cross_decoder"):
        assert any(p.grad is not None and np.abs(p.grad).max() > 0 for _, p in groups[g]), g
    assert all(p.grad is None or not p.grad.any() for _, p in groups["cross_encoder"])


def test_mlm_moc_standalone_match_joint(tiny_model, batch):
    joint = losses(batch, tiny_model)
    assert loss_mlm(batch, tiny_model).item() == pytest.approx(joint["mlm"], rel=1e-14)
    assert loss_moc(batch, tiny_model).item() == pytest.approx(joint["moc"], rel=1e-14)
    assert loss_msg(batch, tiny_model).item() == pytest.approx(joint["msg"], rel=1e-14)


def test_zero_classifier_gives_uniform(tiny_model, tiny_cfg, rng):
    for p in tiny_model.word_classifier.parameters():
        p.data[...] = 0.0
    logits = tiny_model.logits_words(Tensor(rng.normal(size=(3, tiny_cfg.d_model)))).data
    np.testing.assert_array_equal(logits, 0.0)


def test_logits_match_matmul(tiny_model, tiny_cfg, rng):
    h = rng.normal(size=(2, 3, tiny_cfg.d_model))
    w, b = tiny_model.object_classifier.weight.data, tiny_model.object_classifier.bias.data
    expected = np.einsum("bld,dc->blc", h, w) + b
    np.testing.assert_allclose(tiny_model.logits_objects(Tensor(h)).data, expected, atol=1e-13)


def test_untied_classifier(tiny_cfg):
    import dataclasses

    m = TdenModel(dataclasses.replace(tiny_cfg, tie_word_classifier=False), 0)
    assert m.msg_classifier is not None
    assert "msg_classifier" in m.parameter_groups()


def test_call_counter(tiny_model, batch):
    tiny_model.calls.clear()
    loss_tden(batch, tiny_model)
    assert tiny_model.calls == {"cross_encoder": 1, "cross_decoder": 1}
