"""Toy finetuning tasks: answer classification, caption-based retrieval,
multiple-choice caption scoring and caption generation.

Every task is built from synthetic scenes so that solving it requires
grounding words in region features; text alone carries no answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Record, SceneSpec, World, gen_record, read_dataset, subject_index, write_dataset
from .model import EncodedPair, TdenModel
from .nn import AttentionPool, Linear, Module
from .proxy import ism_from_pooled, msg_from_states
from .structures import CLS, IMG, MASK, SEP, RegionBatch, RegionSet, TokenSeq, WordBatch
from .train import Adam, Checkpoint, clip_grad_norm, step_rng

TASKS = ("classification", "retrieval", "multichoice", "generation")


# ---------------------------------------------------------------- task data


@dataclass
class TaskItem:
    regions: RegionSet
    text: TokenSeq
    label: int = -1
    choices: list[TokenSeq] = field(default_factory=list)


@dataclass
class TaskData:
    kind: str
    train: list[TaskItem]
    test: list[TaskItem]
    n_answers: int = 0


def _question(world: World, scene: SceneSpec, rng) -> tuple[TokenSeq, int]:
    """Cloze query "the [MASK] <class>" about the scene's subject; answer = its attribute.

    The blank sits where caption grammar puts an attribute word.
    """
    v = world.vocab
    obj = scene.objects[subject_index(scene)]
    return TokenSeq.wrap([v.the, MASK, v.class_word(obj.class_id)]), obj.attr_id


def _distractors(world: World, caption: np.ndarray, rng, n: int = 3) -> list[np.ndarray]:
    """Copies of ``caption`` with the same class or attribute slot refilled.

    Swapping one shared slot keeps the true caption exchangeable with its
    distractors; swapping different slots would make it their centroid.
    """
    v = world.vocab
    kinds = {"class": (v.word_class, v.class_word, world.cfg.n_object_classes),
             "attr": (v.word_attr, v.attr_word, world.cfg.n_attributes)}
    slots = [(i, k) for i, w in enumerate(caption) for k, (read, _, size) in kinds.items()
             if read(w) is not None and size > n]
    i, kind = slots[int(rng.integers(len(slots)))]
    read, write, size = kinds[kind]
    others = [x for x in range(size) if x != read(caption[i])]
    out = []
    for x in rng.choice(others, size=n, replace=False):
        c = caption.copy()
        c[i] = write(int(x))
        out.append(c)
    return out


def make_items(world: World, kind: str, n: int, seed: int, offset: int = 0) -> list[TaskItem]:
    if kind not in TASKS:
        raise ValueError(f"unknown task {kind!r}")
    items = []
    for i in range(offset, offset + n):
        rec, scene = gen_record(world, seed, i)
        rng = step_rng(seed, i, "task")
        if kind == "classification":
            q, answer = _question(world, scene, rng)
            items.append(TaskItem(rec.regions, q, answer))
        elif kind == "multichoice":
            options = [rec.caption] + _distractors(world, rec.caption, rng)
            order = rng.permutation(len(options))
            choices = [TokenSeq.wrap(options[j]) for j in order]
            items.append(TaskItem(rec.regions, choices[int(np.argmin(order))], int(np.argmin(order)), choices))
        else:
            items.append(TaskItem(rec.regions, TokenSeq.wrap(rec.caption)))
    return items


def make_task(world: World, kind: str, seed: int, n_train: int = 512, n_test: int = 100) -> TaskData:
    """Train and held-out items; seeds keep them disjoint from pretraining data."""
    train = make_items(world, kind, n_train, seed)
    test = make_items(world, kind, n_test, seed, offset=n_train)
    return TaskData(kind, train, test, world.cfg.n_attributes if kind == "classification" else 0)


def write_task(prefix, task: TaskData, world: World) -> None:
    """``<prefix>.<split>.tden`` region/caption files plus a JSON annotation sidecar."""
    prefix = Path(prefix)
    sidecar = {"kind": task.kind, "n_answers": task.n_answers, "splits": {}}
    for split, items in (("train", task.train), ("test", task.test)):
        write_dataset(f"{prefix}.{split}.tden", [Record(it.regions, it.text.words) for it in items], world.cfg)
        sidecar["splits"][split] = {
            str(i): {"label": it.label, "choices": [c.words.tolist() for c in it.choices]}
            for i, it in enumerate(items)
        }
    Path(f"{prefix}.json").write_text(json.dumps(sidecar))


def read_task(prefix) -> TaskData:
    meta = json.loads(Path(f"{prefix}.json").read_text())
    splits = {}
    for split in ("train", "test"):
        records = read_dataset(f"{prefix}.{split}.tden")
        ann = meta["splits"][split]
        splits[split] = [
            TaskItem(
                rec.regions, TokenSeq.wrap(rec.caption), ann[str(i)]["label"],
                [TokenSeq.wrap(c) for c in ann[str(i)]["choices"]],
            )
            for i, rec in enumerate(records)
        ]
    return TaskData(meta["kind"], splits["train"], splits["test"], meta["n_answers"])


# ---------------------------------------------------------------- heads


class JointPool(Module):
    """Attention pooling of cross-encoder and decoder outputs, summed."""

    def __init__(self, d: int, rng, std: float = 0.02):
        self.encoder_pool = AttentionPool(d, rng, std)
        self.decoder_pool = AttentionPool(d, rng, std)


class TaskHead(Module):
    def __init__(self, kind: str, d: int, rng, n_out: int = 1, std: float = 0.02):
        if kind not in TASKS:
            raise ValueError(f"unknown task {kind!r}")
        self.kind = kind
        if kind in ("classification", "multichoice"):
            self.pool = JointPool(d, rng, std)
            self.out = Linear(d, n_out, rng, std)


def pool_joint(model: TdenModel, pair: EncodedPair, head: JointPool) -> Tensor:
    """Holistic B x d feature from both cross-modal stacks.

    The decoder keeps its causal mask, exactly as during pretraining.
    """
    cross_out = model.cross_encode(pair)
    valid = np.concatenate([pair.s_valid, pair.i_valid], axis=1)
    g = model.encode_sentence(pair.words, causal=True)
    dec_out = model.cross_decode(g, pair.s_valid, pair.H_I, pair.i_valid)
    return head.encoder_pool(cross_out, valid) + head.decoder_pool(dec_out, pair.s_valid)


def _encode(model: TdenModel, texts: list[TokenSeq], regions: list[RegionSet]) -> EncodedPair:
    return model.encode_pair(WordBatch.collate(texts), RegionBatch.collate(regions))


def classification_logits(model, head: TaskHead, items: Sequence[TaskItem]) -> Tensor:
    pair = _encode(model, [it.text for it in items], [it.regions for it in items])
    return head.out(pool_joint(model, pair, head.pool))


def multichoice_scores(model, head: TaskHead, items: Sequence[TaskItem]) -> Tensor:
    """B x n_choices scores; all choices of all items run as one batch."""
    n = len(items[0].choices)
    texts = [c for it in items for c in it.choices]
    regions = [it.regions for it in items for _ in range(n)]
    scores = head.out(pool_joint(model, _encode(model, texts, regions), head.pool))
    return scores.reshape(len(items), n)


def retrieval_embeddings(model, texts: list[TokenSeq], regions: list[RegionSet]) -> tuple[Tensor, Tensor]:
    pair = _encode(model, texts, regions)
    return model.ism_similarity(pair.H_S, pair.s_valid, pair.H_I, pair.i_valid)


# ---------------------------------------------------------------- finetuning


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 5e-4
    head_lr: float = 5e-3  # freshly initialized task heads need larger steps
    seed: int = 0
    clip_norm: float = 5.0


def _as_model(source, cfg=None, seed: int = 0) -> TdenModel:
    if isinstance(source, TdenModel):
        return source
    if isinstance(source, Checkpoint):
        return source.build_model()
    if source is None and cfg is not None:
        return TdenModel(cfg, np.random.default_rng(np.random.SeedSequence([seed, 0])))
    raise TypeError("need a model, a checkpoint, or None with a model config")


def _loss_fn(kind: str, model: TdenModel, head: TaskHead, n_answers: int) -> Callable:
    if kind == "classification":
        def loss(items):
            logits = classification_logits(model, head, items)
            y = np.zeros(logits.shape)
            y[np.arange(len(items)), [it.label for it in items]] = 1.0
            return ad.binary_cross_entropy_with_logits(logits, y)
    elif kind == "multichoice":
        def loss(items):
            return ad.cross_entropy(multichoice_scores(model, head, items), [it.label for it in items])
    elif kind == "retrieval":
        def loss(items):
            u, v = retrieval_embeddings(model, [it.text for it in items], [it.regions for it in items])
            return ism_from_pooled(u, v, model.cfg.ism_margin)
    else:
        def loss(items):
            words = WordBatch.collate([it.text for it in items])
            regions = RegionBatch.collate([it.regions for it in items])
            H_I = model.encode_objects(regions)
            g = model.encode_sentence(words, causal=True)
            dec = model.cross_decode(g, words.valid, H_I, regions.valid)
            return msg_from_states(model, dec, words)[0]
    return loss


def finetune(source, task: TaskData, fcfg: FinetuneConfig | None = None, model_cfg=None):
    """Train backbone and task head on ``task.train``; returns (model, head)."""
    fcfg = fcfg or FinetuneConfig()
    model = _as_model(source, model_cfg, fcfg.seed)
    head_rng = np.random.default_rng(np.random.SeedSequence([fcfg.seed, 1]))
    n_out = task.n_answers if task.kind == "classification" else 1
    head = TaskHead(task.kind, model.cfg.d_model, head_rng, n_out, model.cfg.init_std)
    loss_fn = _loss_fn(task.kind, model, head, task.n_answers)
    backbone = list(model.named_parameters())
    head_params = [(f"head.{n}", p) for n, p in head.named_parameters()]
    params = backbone + head_params
    opt, head_opt = Adam(fcfg.lr), Adam(fcfg.head_lr)
    n = len(task.train)
    bs = min(fcfg.batch_size, n)
    for step in range(fcfg.steps):
        idx = step_rng(fcfg.seed, step, "finetune").choice(n, bs, replace=False)
        for _, p in params:
            p.grad = None
        with Tape() as tape:
            loss = loss_fn([task.train[i] for i in idx])
        tape.backward(loss)
        clip_grad_norm((p for _, p in params), fcfg.clip_norm)
        opt.step(backbone)
        head_opt.step(head_params)
    return model, head


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def eval_classification(model, head: TaskHead, items: list[TaskItem], batch_size: int = 64) -> float:
    hits = 0
    for chunk in _chunks(items, batch_size):
        pred = classification_logits(model, head, chunk).data.argmax(axis=1)
        hits += int((pred == [it.label for it in chunk]).sum())
    return hits / len(items)


def eval_multichoice(model, head: TaskHead, items: list[TaskItem], batch_size: int = 32) -> float:
    hits = 0
    for chunk in _chunks(items, batch_size):
        pred = multichoice_scores(model, head, chunk).data.argmax(axis=1)
        hits += int((pred == [it.label for it in chunk]).sum())
    return hits / len(items)


def recall_at_k(sim: np.ndarray, ks=(1, 5, 10)) -> dict[int, float]:
    """Caption-to-image recall; row i's true image is column i.

    Ties are broken against the true image, so a constant scorer gets no credit.
    """
    true = np.diag(sim)[:, None]
    rank = (sim > true).sum(axis=1) + (sim == true).sum(axis=1) - 1
    return {k: float((rank < k).mean()) for k in ks}


def eval_retrieval(model, items: list[TaskItem], ks=(1, 5, 10)) -> dict[int, float]:
    if len(items) < max(ks):
        raise ValueError(f"retrieval pool of {len(items)} is smaller than {max(ks)}")
    u, v = retrieval_embeddings(model, [it.text for it in items], [it.regions for it in items])
    return recall_at_k(u.data @ v.data.T, ks)


# ---------------------------------------------------------------- generation


BANNED_IDS = (CLS, MASK, IMG)


def caption_step_fn(model: TdenModel, regions: RegionSet) -> Callable:
    """Next-token log-probabilities for a list of prefixes (each starting at [CLS])."""
    rb = RegionBatch.collate([regions])
    H_I = model.encode_objects(rb)

    def step(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        ids = np.array(prefixes, dtype=np.int64)
        words = WordBatch(ids, np.full(n, ids.shape[1]))
        g = model.encode_sentence(words, causal=True)
        vis = H_I if n == 1 else ad.concat([H_I] * n, axis=0)
        valid = np.repeat(rb.valid, n, axis=0)
        dec = model.cross_decode(g, words.valid, vis, valid)
        logits = model.logits_generation(dec[:, -1]).data.copy()
        logits[:, list(BANNED_IDS)] = -np.inf
        z = logits - logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    return step


def greedy_search(step, max_new: int, bos: int = CLS, eos: int = SEP) -> tuple[list[int], float]:
    seq, score = [bos], 0.0
    for _ in range(max_new):
        lp = step([seq])[0]
        t = int(lp.argmax())
        seq.append(t)
        score += float(lp[t])
        if t == eos:
            break
    return seq[1:], score


def length_normalized(score: float, length: int, alpha: float) -> float:
    return score / max(length, 1) ** alpha


def beam_search(
    step, k: int, max_new: int, bos: int = CLS, eos: int = SEP, alpha: float = 0.7
) -> tuple[list[int], float]:
    """Keep the ``k`` best prefixes by summed log-prob; pick the final
    hypothesis by ``score / length**alpha``.  Returns (tokens, summed log-prob)."""
    live = [([bos], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_new):
        lp = step([seq for seq, _ in live])
        cands = []
        for (seq, score), row in zip(live, lp):
            top = np.argsort(-row, kind="stable")[:k]
            cands.extend((score + float(row[t]), seq, int(t)) for t in top if np.isfinite(row[t]))
        cands.sort(key=lambda c: -c[0])
        live = []
        for score, seq, t in cands[:k]:
            (finished if t == eos else live).append((seq + [t], score))
        if not live:
            break
    finished.extend(live)
    best = max(finished, key=lambda h: length_normalized(h[1], len(h[0]) - 1, alpha))
    return best[0][1:], best[1]


def strip_eos(tokens: list[int], eos: int = SEP) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == eos else tokens


def generate_caption(model: TdenModel, regions: RegionSet, mode: str = "greedy", k: int = 3) -> list[int]:
    """Decode from [CLS] until [SEP] or the length limit; specials are never emitted."""
    step = caption_step_fn(model, regions)
    max_new = model.cfg.max_seq_len - 1
    if mode == "greedy":
        tokens, _ = greedy_search(step, max_new)
    elif mode == "beam":
        tokens, _ = beam_search(step, k, max_new)
    else:
        raise ValueError(f"unknown decoding mode {mode!r}")
    return strip_eos(tokens)


def eval_caption(predictions, references) -> dict[str, float]:
    """Exact-match rate and mean token-level F1 over id sequences."""
    em = f1 = 0.0
    for p, r in zip(predictions, references):
        p, r = list(p), list(r)
        em += float(p == r)
        if not p and not r:
            f1 += 1.0
            continue
        common = sum(min(p.count(t), r.count(t)) for t in set(p))
        if common:
            prec, rec = common / len(p), common / len(r)
            f1 += 2 * prec * rec / (prec + rec)
    n = max(len(predictions), 1)
    return {"exact_match": em / n, "f1": f1 / n}


def eval_generation(model: TdenModel, items: list[TaskItem], mode: str = "greedy", k: int = 3) -> dict:
    preds = [generate_caption(model, it.regions, mode, k) for it in items]
    return eval_caption(preds, [it.text.words.tolist() for it in items])


# ---------------------------------------------------------------- task entry points


def finetune_classification(source, task: TaskData, fcfg=None, model_cfg=None) -> float:
    model, head = finetune(source, task, fcfg, model_cfg)
    return eval_classification(model, head, task.test)


def finetune_retrieval(source, task: TaskData, fcfg=None, model_cfg=None) -> dict[int, float]:
    model, _ = finetune(source, task, fcfg, model_cfg)
    return eval_retrieval(model, task.test)


def finetune_multichoice(source, task: TaskData, fcfg=None, model_cfg=None) -> float:
    model, head = finetune(source, task, fcfg, model_cfg)
    return eval_multichoice(model, head, task.test)


def finetune_generation(source, task: TaskData, fcfg=None, model_cfg=None, mode="greedy") -> dict:
    model, _ = finetune(source, task, fcfg, model_cfg)
    return eval_generation(model, task.test, mode)


def run_task(source, task: TaskData, fcfg=None, model_cfg=None) -> dict[str, float]:
    """Finetune on one task and return its headline metric(s) as a flat dict."""
    if task.kind == "classification":
        return {"vqa_acc": finetune_classification(source, task, fcfg, model_cfg)}
    if task.kind == "retrieval":
        r = finetune_retrieval(source, task, fcfg, model_cfg)
        return {"r@1": r[1], "r@5": r[5], "r@10": r[10]}
    if task.kind == "multichoice":
        return {"mc_acc": finetune_multichoice(source, task, fcfg, model_cfg)}
    g = finetune_generation(source, task, fcfg, model_cfg)
    return {"cap_f1": g["f1"], "cap_em": g["exact_match"]}
