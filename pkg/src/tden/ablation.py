"""Preset matrix contrasting pretraining variants on the four toy tasks.

Presets
-------
1. understanding objectives only (MLM, MOC, ISM)
2. generation objective only (MSG, ISM)
3. no ISM
4. ISM on cross-encoder outputs
5. full objective, single pass
6. / 7. / 8. two-pass schemes A, B and C

Every preset is pretrained once per seed, then each task is finetuned
from a fresh copy of that checkpoint with an identical budget.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DataConfig, World, gen_splits
from .downstream import TASKS, FinetuneConfig, make_task, run_task
from .nn import ModelConfig
from .proxy import ALL_LOSSES
from .train import TrainConfig, pretrain

METRICS = ("vqa_acc", "r@1", "mc_acc", "cap_f1")
TASK_METRIC = dict(zip(TASKS, METRICS))


@dataclass(frozen=True)
class Preset:
    number: int
    name: str
    losses: tuple = ALL_LOSSES
    scheme: str = "none"
    ism_placement: str = "encoder"


PRESETS = {
    p.number: p
    for p in (
        Preset(1, "understanding-only", ("mlm", "moc", "ism")),
        Preset(2, "generation-only", ("ism", "msg")),
        Preset(3, "no-ism", ("mlm", "moc", "msg")),
        Preset(4, "ism-cross", ism_placement="cross"),
        Preset(5, "full"),
        Preset(6, "two-pass-a", scheme="two_pass_a"),
        Preset(7, "two-pass-b", scheme="two_pass_b"),
        Preset(8, "two-pass-c", scheme="two_pass_c"),
    )
}

SCRATCH = 0  # pseudo-preset: finetune from random initialization


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    pretrain_steps: int = 500
    pretrain_lr: float = 1e-3
    batch_size: int = 32
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(steps=150, batch_size=16))
    tasks: tuple = TASKS
    n_train_pairs: int = 2048
    task_train: int = 512
    task_test: int = 100
    task_seed: int = 10_000
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)


def pretrain_preset(preset: Preset, seed: int, acfg: AblationConfig, train=None):
    """Pretrain one preset; returns (checkpoint, model config)."""
    mcfg = dataclasses.replace(acfg.model, ism_placement=preset.ism_placement)
    if train is None:
        train = gen_splits(World.create(acfg.data), seed=0, sizes=(acfg.n_train_pairs,))["train"]
    tcfg = TrainConfig(
        steps=acfg.pretrain_steps, batch_size=acfg.batch_size, lr=acfg.pretrain_lr,
        seed=seed, scheme=preset.scheme, losses=preset.losses,
    )
    return pretrain(mcfg, tcfg, train).checkpoint(tcfg), mcfg


def run_preset(number: int, seed: int, acfg: AblationConfig) -> dict:
    """Downstream metrics for one (preset, seed); preset 0 skips pretraining."""
    start = time.perf_counter()
    world = World.create(acfg.data)
    if number == SCRATCH:
        source, mcfg = None, acfg.model
    else:
        source, mcfg = pretrain_preset(PRESETS[number], seed, acfg)
    out = {"preset": number, "seed": seed}
    fcfg = dataclasses.replace(acfg.finetune, seed=seed)
    for kind in acfg.tasks:
        task = make_task(world, kind, acfg.task_seed, acfg.task_train, acfg.task_test)
        out.update(run_task(source, task, fcfg, mcfg))
    out["seconds"] = time.perf_counter() - start
    return out


def run_matrix(presets, acfg: AblationConfig, workers: int = 1) -> list[dict]:
    jobs = [(p, s) for p in presets for s in acfg.seeds]
    if workers <= 1:
        return [run_preset(p, s, acfg) for p, s in jobs]
    with ProcessPoolExecutor(workers) as pool:
        futures = [pool.submit(run_preset, p, s, acfg) for p, s in jobs]
        return [f.result() for f in futures]


def average(results: list[dict]) -> dict[int, dict[str, float]]:
    """Per-preset mean of every metric present in all of its runs."""
    by_preset: dict[int, list[dict]] = {}
    for r in results:
        by_preset.setdefault(r["preset"], []).append(r)
    out = {}
    for p, runs in sorted(by_preset.items()):
        keys = [k for k in METRICS if all(k in r for r in runs)]
        out[p] = {k: float(np.mean([r[k] for r in runs])) for k in keys}
    return out


def comparison_table(results: list[dict]) -> str:
    """Markdown table of seed-averaged metrics, one row per preset."""
    means = average(results)
    cols = [m for m in METRICS if any(m in row for row in means.values())]
    lines = ["| preset | name | " + " | ".join(cols) + " |", "|---|---|" + "---|" * len(cols)]
    for p, row in means.items():
        name = "scratch" if p == SCRATCH else PRESETS[p].name
        cells = [f"{row[c]:.3f}" if c in row else "-" for c in cols]
        lines.append(f"| {p} | {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def directional_checks(results: list[dict]) -> dict[str, bool]:
    """The qualitative orderings the matrix is meant to exhibit."""
    m = average(results)
    out = {}
    if {1, 5} <= m.keys():
        out["joint_vs_understanding_only_on_generation"] = m[5]["cap_f1"] >= m[1]["cap_f1"]
    if {2, 5} <= m.keys():
        out["joint_vs_generation_only_on_classification"] = m[5]["vqa_acc"] >= m[2]["vqa_acc"]
    if {4, 5} <= m.keys():
        out["encoder_ism_vs_cross_ism_on_r1"] = m[5]["r@1"] >= m[4]["r@1"]
    for p in (6, 7, 8):
        if {p, 5} <= m.keys():
            wins = sum(m[p][k] >= m[5][k] for k in METRICS if k in m[p] and k in m[5])
            out[f"preset_{p}_vs_single_pass"] = wins >= 2
    if {SCRATCH, 5} <= m.keys():
        for k in ("vqa_acc", "r@1"):
            if k in m[5] and k in m[SCRATCH]:
                out[f"pretrained_vs_scratch_{k}"] = m[5][k] > m[SCRATCH][k]
    return out
