"""Adam, the pretraining loop and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Tape, Tensor
from .data import Record
from .model import TdenModel
from .nn import ModelConfig
from .proxy import ALL_LOSSES, MASK_PROB, make_masked_batch, loss_tden
from .sampling import SCHEMES, run_step
from .structures import WordBatch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "TDEN-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    scheme: str = "none"
    losses: tuple = ALL_LOSSES
    mask_prob: float = MASK_PROB
    mask_prob_final: float = -1.0  # >= 0 enables a linear schedule to this value
    clip_norm: float = 5.0
    warmup_steps: int = 0
    eval_every: int = 0
    eval_size: int = 128
    checkpoint_every: int = 0

    def __post_init__(self):
        self.losses = tuple(self.losses)
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if set(self.losses) - set(ALL_LOSSES) or not self.losses:
            raise ValueError(f"bad loss selection {self.losses}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def mask_prob_at(self, step: int) -> float:
        if self.mask_prob_final < 0 or self.steps <= 1:
            return self.mask_prob
        frac = min(step / (self.steps - 1), 1.0)
        return self.mask_prob + frac * (self.mask_prob_final - self.mask_prob)

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params: Iterable[tuple[str, Tensor]], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------- batching


def step_rng(seed: int, step: int, stream: str) -> np.random.Generator:
    """Generator for one purpose at one step; resuming needs only (seed, step)."""
    key = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, step, key]))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Epoch-shuffled minibatch for ``step`` (last partial batch dropped)."""
    bs = min(batch_size, n)
    per_epoch = max(n // bs, 1)
    epoch, k = divmod(step, per_epoch)
    perm = step_rng(seed, epoch, "shuffle").permutation(n)
    return perm[k * bs : (k + 1) * bs]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    train_config: dict
    step: int
    seed: int
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0

    @classmethod
    def capture(cls, model: TdenModel, opt: Adam, tcfg: TrainConfig, step: int) -> "Checkpoint":
        return cls(
            {n: p.data.copy() for n, p in model.named_parameters()},
            model.cfg.to_dict(), tcfg.to_dict(), step, tcfg.seed,
            {k: v.copy() for k, v in opt.m.items()},
            {k: v.copy() for k, v in opt.v.items()},
            opt.step_count,
        )

    def build_model(self) -> TdenModel:
        model = TdenModel(ModelConfig.from_dict(self.model_config), 0)
        self.load_into(model)
        return model

    def load_into(self, model: TdenModel) -> None:
        current = dict(model.named_parameters())
        missing = set(current) - set(self.params)
        if missing:
            raise KeyError(f"checkpoint lacks tensor {sorted(missing)[0]}")
        for name, p in current.items():
            saved = self.params[name]
            if saved.shape != p.shape:
                raise ValueError(
                    f"tensor {name}: checkpoint shape {saved.shape} != model shape {p.shape}"
                )
        for name, p in current.items():
            p.data[...] = self.params[name]

    def build_optimizer(self) -> Adam:
        t = self.train_config
        opt = Adam(t.get("lr", 1e-4))
        opt.m = {k: v.copy() for k, v in self.adam_m.items()}
        opt.v = {k: v.copy() for k, v in self.adam_v.items()}
        opt.step_count = self.adam_step
        return opt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: a crash mid-save leaves any previous file intact."""
    path = Path(path)
    header = {
        "magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "step": ckpt.step,
        "seed": ckpt.seed, "adam_step": ckpt.adam_step,
        "model_config": ckpt.model_config, "train_config": ckpt.train_config,
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    arrays.update({f"param/{k}": v for k, v in ckpt.params.items()})
    arrays.update({f"adam_m/{k}": v for k, v in ckpt.adam_m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in ckpt.adam_v.items()})
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, model_config: ModelConfig | None = None) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no header)")
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for key in z.files:
            if "/" in key:
                kind, name = key.split("/", 1)
                groups[kind][name] = z[key]
    ckpt = Checkpoint(
        groups["param"], header["model_config"], header["train_config"], header["step"],
        header["seed"], groups["adam_m"], groups["adam_v"], header["adam_step"],
    )
    if model_config is not None:
        ckpt.load_into(TdenModel(model_config, 0))
    return ckpt


# ---------------------------------------------------------------- evaluation


def evaluate_pretraining(model: TdenModel, records: list[Record], seed: int = 0, batch_size: int = 64) -> dict:
    """Masked-word accuracy, mean MLM/MOC/MSG losses and MSG perplexity under fixed masks."""
    hits = total = 0
    sums = {"mlm": 0.0, "moc": 0.0, "msg": 0.0}
    n_batches = 0
    msg_nll = msg_tokens = 0.0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        if len(chunk) < 2:
            continue
        rng = step_rng(seed, start, "eval")
        batch = make_masked_batch([r.pair() for r in chunk], rng)
        r = loss_tden(batch, model, ("mlm", "moc", "msg"))
        n_batches += 1
        for k in sums:
            sums[k] += float(r.terms[k].data)
        _, _, targets = batch.word_index()
        pred = r.outputs.enc_word_dists.argmax(axis=1)
        hits += int((pred == targets).sum())
        total += len(targets)
        n_tok = int((WordBatch.collate(batch.originals).lengths - 1).sum())
        msg_nll += float(r.terms["msg"].data) * n_tok
        msg_tokens += n_tok
    out = {k: v / max(n_batches, 1) for k, v in sums.items()}
    out["mlm_acc"] = hits / max(total, 1)
    out["msg_ppl"] = float(np.exp(msg_nll / max(msg_tokens, 1)))
    return out


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    model: TdenModel
    optimizer: Adam
    metrics: list[dict]
    step: int

    def checkpoint(self, tcfg: TrainConfig) -> Checkpoint:
        return Checkpoint.capture(self.model, self.optimizer, tcfg, self.step)


def pretrain(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    train: list[Record],
    val: list[Record] | None = None,
    run_dir=None,
    resume: Checkpoint | None = None,
    metrics_path=None,
) -> PretrainResult:
    """Run ``tcfg.steps`` optimizer steps of the selected scheme.

    Each step draws its batch, masks and samples from generators keyed on
    ``(seed, step)``, so a resumed run replays the uninterrupted trajectory.
    """
    if not train:
        raise ValueError("training set is empty")
    if resume is not None:
        model = resume.build_model()
        opt = resume.build_optimizer()
        start = resume.step
    else:
        model = TdenModel(model_cfg, np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0])))
        opt = Adam(tcfg.lr)
        start = 0
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = metrics_path or run_dir / "metrics.jsonl"
    sink = open(metrics_path, "a" if resume is not None else "w") if metrics_path else None
    metrics: list[dict] = []
    pairs = [r.pair() for r in train]
    params = list(model.named_parameters())
    try:
        for step in range(start, tcfg.steps):
            idx = batch_indices(len(pairs), tcfg.batch_size, tcfg.seed, step)
            p = tcfg.mask_prob_at(step)
            batch = make_masked_batch([pairs[i] for i in idx], step_rng(tcfg.seed, step, "mask"), p, p)
            model.zero_grad()
            with Tape() as tape:
                res = run_step(tcfg.scheme, batch, model, step_rng(tcfg.seed, step, "sample"), tcfg.losses)
            tape.backward(res.loss)
            gnorm = clip_grad_norm((p for _, p in params), tcfg.clip_norm)
            opt.step(params, tcfg.lr_at(step))
            rec = {"step": step, "loss": float(res.loss.data)}
            rec.update({k: float(v.data) for k, v in res.terms.items()})
            if res.alpha is not None:
                rec["alpha"] = res.alpha
            rec["grad_norm"] = gnorm
            metrics.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            done = step + 1
            if val and tcfg.eval_every and done % tcfg.eval_every == 0:
                ev = {"step": step, "split": "val"}
                ev.update(evaluate_pretraining(model, val[: tcfg.eval_size], tcfg.seed))
                metrics.append(ev)
                if sink:
                    sink.write(json.dumps(ev) + "\n")
                log.info("step %d val %s", done, ev)
            if run_dir and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoint.npz", Checkpoint.capture(model, opt, tcfg, done))
    finally:
        if sink:
            sink.close()
    result = PretrainResult(model, opt, metrics, max(start, tcfg.steps))
    if run_dir:
        save_checkpoint(run_dir / "checkpoint.npz", result.checkpoint(tcfg))
    return result
