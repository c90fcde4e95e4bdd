import json
import math

import numpy as np
import pytest

from tden.autodiff import Tensor
from tden.data import World, gen_dataset
from tden.gradcheck import tiny_world
from tden.model import TdenModel
from tden.nn import ModelConfig, tiny_config
from tden.train import (
    Adam,
    Checkpoint,
    TrainConfig,
    batch_indices,
    clip_grad_norm,
    evaluate_pretraining,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    step_rng,
)


def param(values, grad=None):
    p = Tensor(np.asarray(values, dtype=float), requires_grad=True)
    p.grad = None if grad is None else np.asarray(grad, dtype=float)
    return p


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_keeps_params():
    p = param([1.0, -2.0], [0.0, 0.0])
    opt = Adam(lr=0.1)
    opt.step([("p", p)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_first_step_hand_computed():
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    g = np.array([0.5, -2.0, 1e-3])
    p = param([0.0, 0.0, 0.0], g)
    Adam(lr=0.01).step([("p", p)])
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-14, atol=0)


def test_adam_matches_scalar_oracle():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    x, m, v = 0.0, 0.0, 0.0
    p = param([0.0])
    opt = Adam(lr=lr)
    for t in range(1, 6):
        g = 2 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        p.grad = 2 * (p.data - 3.0)
        opt.step([("x", p)])
        assert p.data[0] == pytest.approx(x, rel=1e-14)


def test_adam_rejects_nan_naming_parameter():
    p = param([1.0], [np.nan])
    q = param([1.0], [1.0])
    with pytest.raises(FloatingPointError, match="weird.weight"):
        Adam().step([("ok", q), ("weird.weight", p)])
    assert q.data[0] == 1.0  # nothing applied


def test_adam_lr_override():
    p = param([0.0], [1.0])
    Adam(lr=1.0).step([("p", p)], lr=0.5)
    assert p.data[0] == pytest.approx(-0.5, rel=1e-7)


def test_clip_grad_norm():
    a, b = param([0.0], [3.0]), param([0.0], [4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([a.grad[0], b.grad[0]], [0.6, 0.8], rtol=1e-15)
    c = param([0.0], [0.1])
    clip_grad_norm([c], 1.0)
    assert c.grad[0] == 0.1


# ---------------------------------------------------------------- batching / schedules


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(10, 3, 0, s) for s in range(3)])
    assert len(set(seen)) == 9
    np.testing.assert_array_equal(batch_indices(10, 3, 0, 1), batch_indices(10, 3, 0, 1))
    assert not np.array_equal(batch_indices(10, 3, 0, 3), batch_indices(10, 3, 1, 3))


def test_batch_larger_than_data():
    assert sorted(batch_indices(4, 32, 0, 0)) == [0, 1, 2, 3]


def test_step_rng_streams_differ():
    a = step_rng(0, 5, "mask").random(3)
    np.testing.assert_array_equal(a, step_rng(0, 5, "mask").random(3))
    assert not np.array_equal(a, step_rng(0, 5, "sample").random(3))


def test_schedules():
    t = TrainConfig(steps=11, mask_prob=0.1, mask_prob_final=0.2, warmup_steps=4, lr=1.0)
    assert t.mask_prob_at(0) == 0.1 and t.mask_prob_at(10) == pytest.approx(0.2)
    assert t.lr_at(0) == 0.25 and t.lr_at(3) == 1.0 and t.lr_at(9) == 1.0
    assert TrainConfig().mask_prob_at(500) == 0.15


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(scheme="two_pass_z")
    with pytest.raises(ValueError):
        TrainConfig(losses=("mlm", "xyz"))
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"stepz": 3})


# ---------------------------------------------------------------- pretraining loop


@pytest.fixture(scope="module")
def tiny_data():
    cfg = tiny_config()
    return cfg, gen_dataset(tiny_world(cfg), 16, seed=0)


def _tcfg(**kw):
    base = dict(steps=6, batch_size=4, lr=1e-3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_returns_initialization(tiny_data, tmp_path):
    cfg, recs = tiny_data
    res = pretrain(cfg, _tcfg(steps=0), recs, run_dir=tmp_path)
    fresh = TdenModel(cfg, np.random.default_rng(np.random.SeedSequence([3, 0])))
    ckpt = load_checkpoint(tmp_path / "checkpoint.npz")
    for name, p in fresh.named_parameters():
        assert ckpt.params[name].tobytes() == p.data.tobytes()
    assert ckpt.step == 0 and res.metrics == []


@pytest.mark.parametrize("scheme", ["none", "two_pass_c"])
def test_same_seed_bitwise_identical(tiny_data, tmp_path, scheme):
    cfg, recs = tiny_data
    pretrain(cfg, _tcfg(scheme=scheme), recs, run_dir=tmp_path / "a")
    pretrain(cfg, _tcfg(scheme=scheme), recs, run_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    a, b = load_checkpoint(tmp_path / "a/checkpoint.npz"), load_checkpoint(tmp_path / "b/checkpoint.npz")
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_logged_terms_sum_to_total(tiny_data):
    cfg, recs = tiny_data
    for scheme in ("none", "two_pass_a", "two_pass_b", "two_pass_c"):
        for rec in pretrain(cfg, _tcfg(steps=3, scheme=scheme), recs).metrics:
            terms = [v for k, v in rec.items() if k not in ("step", "loss", "alpha", "grad_norm")]
            assert abs(sum(terms) - rec["loss"]) < 1e-12
            assert ("alpha" in rec) == (scheme == "two_pass_c")


def test_resume_reproduces_ten_steps_bitwise(tiny_data, tmp_path):
    cfg, recs = tiny_data
    straight = pretrain(cfg, _tcfg(steps=20, scheme="two_pass_c"), recs, run_dir=tmp_path / "s")
    pretrain(cfg, _tcfg(steps=10, scheme="two_pass_c"), recs, run_dir=tmp_path / "r")
    ckpt = load_checkpoint(tmp_path / "r/checkpoint.npz")
    resumed = pretrain(cfg, _tcfg(steps=20, scheme="two_pass_c"), recs, run_dir=tmp_path / "r", resume=ckpt)
    assert resumed.metrics == straight.metrics[10:]
    for (n, p), (_, q) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    assert (tmp_path / "s/metrics.jsonl").read_bytes() == (tmp_path / "r/metrics.jsonl").read_bytes()


def test_interrupted_run_leaves_valid_checkpoint(tiny_data, tmp_path, monkeypatch):
    import tden.train as train_mod

    cfg, recs = tiny_data
    real = train_mod.run_step

    def failing(scheme, batch, model, rng, losses):
        if failing.calls == 7:
            raise KeyboardInterrupt
        failing.calls += 1
        return real(scheme, batch, model, rng, losses)

    failing.calls = 0
    monkeypatch.setattr(train_mod, "run_step", failing)
    with pytest.raises(KeyboardInterrupt):
        pretrain(cfg, _tcfg(steps=20, checkpoint_every=5), recs, run_dir=tmp_path)
    ckpt = load_checkpoint(tmp_path / "checkpoint.npz")
    assert ckpt.step == 5
    assert not list(tmp_path.glob("*.tmp"))
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 7


def test_periodic_eval_logged(tiny_data, tmp_path):
    cfg, recs = tiny_data
    pretrain(cfg, _tcfg(steps=4, eval_every=2, eval_size=8), recs, recs, run_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    evals = [x for x in lines if x.get("split") == "val"]
    assert [e["step"] for e in evals] == [1, 3]
    assert {"mlm_acc", "msg_ppl", "mlm", "moc", "msg"} <= evals[0].keys()


def test_empty_training_set(tiny_data):
    with pytest.raises(ValueError):
        pretrain(tiny_data[0], _tcfg(), [])


def test_evaluate_pretraining_untrained(tiny_data):
    cfg, recs = tiny_data
    model = TdenModel(cfg, 0)
    a = evaluate_pretraining(model, recs, seed=1)
    assert a == evaluate_pretraining(model, recs, seed=1)
    assert 0 <= a["mlm_acc"] <= 1
    # near-uniform untrained heads
    assert a["msg_ppl"] == pytest.approx(cfg.vocab_size, rel=0.1)
    assert a["mlm"] == pytest.approx(math.log(cfg.vocab_size), abs=0.1)


@pytest.mark.parametrize("scheme,batch", [("none", 16), ("two_pass_a", 16)])
def test_small_corpus_learns(scheme, batch):
    recs = gen_dataset(World.create(), 64, seed=0)
    m = pretrain(ModelConfig(), TrainConfig(steps=300, batch_size=batch, scheme=scheme), recs).metrics
    assert all(np.isfinite(x["loss"]) for x in m)
    first = np.mean([x["mlm"] for x in m[:10]])
    last = np.mean([x["mlm"] for x in m[-10:]])
    assert last < 0.5 * first
    assert np.mean([x["loss"] for x in m[-10:]]) < np.mean([x["loss"] for x in m[:10]])


# ---------------------------------------------------------------- checkpoint files


def test_checkpoint_round_trip(tiny_data, tmp_path):
    cfg, recs = tiny_data
    res = pretrain(cfg, _tcfg(steps=2), recs)
    ckpt = res.checkpoint(_tcfg(steps=2))
    save_checkpoint(tmp_path / "c.npz", ckpt)
    back = load_checkpoint(tmp_path / "c.npz", cfg)
    assert back.step == 2 and back.adam_step == 2 and back.model_config == cfg.to_dict()
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(ckpt, group), getattr(back, group)
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    model = back.build_model()
    for name, p in model.named_parameters():
        assert p.data.tobytes() == ckpt.params[name].tobytes()


def test_wrong_config_rejected_naming_tensor(tiny_data, tmp_path):
    cfg, _ = tiny_data
    model = TdenModel(cfg, 0)
    save_checkpoint(tmp_path / "c.npz", Checkpoint.capture(model, Adam(), _tcfg(), 0))
    with pytest.raises(ValueError, match=r"tensor \S+: checkpoint shape"):
        load_checkpoint(tmp_path / "c.npz", tiny_config(d_model=12))
    with pytest.raises(KeyError, match="lacks tensor"):
        load_checkpoint(tmp_path / "c.npz", tiny_config(tie_word_classifier=False))


def test_not_a_checkpoint(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.npz")
    header = json.dumps({"magic": "TDEN-CKPT", "version": 99}).encode()
    np.savez(tmp_path / "y.npz", __header__=np.frombuffer(header, dtype=np.uint8))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "y.npz")
