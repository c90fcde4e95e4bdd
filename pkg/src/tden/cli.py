"""``tden`` command line: data generation, pretraining, finetuning, evaluation,
gradient checking and the ablation matrix.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .config import ConfigError, RunConfig, load_config
from .data import World, gen_splits, read_dataset, write_dataset
from .downstream import (
    TASKS, TaskHead, eval_classification, eval_generation, eval_multichoice, eval_retrieval,
    finetune, make_task,
)
from .gradcheck import run_suite
from .train import Checkpoint, evaluate_pretraining, load_checkpoint, pretrain, save_checkpoint

log = logging.getLogger("tden")

GRAD_TOLERANCE = 1e-4
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tden", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write train/val/test splits")
    _config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="2048,256,256", help="train,val,test pair counts")

    p = sub.add_parser("pretrain", help="pretrain with one scheme")
    _config_args(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", help="directory from gen-data (default: generate in memory)")
    p.add_argument("--scheme")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")

    p = sub.add_parser("finetune", help="finetune on one downstream task")
    _config_args(p)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: random init)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _config_args(p)
    p.add_argument("--task", required=True, choices=TASKS + ("pretraining",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="gen-data directory, for --task pretraining")
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", choices=("tiny",), default="tiny")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run the preset matrix and print a comparison table")
    _config_args(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--presets", default="1,2,3,4,5,6,7,8", help="comma list; 0 means finetune from scratch")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _load(args, extra: dict | None = None) -> RunConfig:
    overrides = list(args.set)
    for key, value in (extra or {}).items():
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides).finalize()


def _echo(cfg: RunConfig, run_dir: Path, extra: dict | None = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.txt")
    if extra:
        (run_dir / "run.json").write_text(json.dumps(extra, indent=1, sort_keys=True) + "\n")


def _splits(cfg: RunConfig, data_dir) -> dict:
    if data_dir:
        return {s: read_dataset(Path(data_dir) / f"{s}.tden") for s in SPLITS}
    return gen_splits(World.create(cfg.data), seed=0)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise UsageError(f"--sizes must be three integers, got {args.sizes!r}") from None
    if len(sizes) != 3 or min(sizes) < 0:
        raise UsageError(f"--sizes must be three non-negative integers, got {args.sizes!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = gen_splits(World.create(cfg.data), args.seed, sizes)
    for name, records in splits.items():
        write_dataset(out / f"{name}.tden", records, cfg.data)
        print(f"{name}: {len(records)} pairs -> {out / (name + '.tden')}")
    cfg.write(out / "config.txt")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args, {"train.scheme": args.scheme, "train.seed": args.seed, "train.steps": args.steps})
    run_dir = Path(args.run_dir)
    resume = None
    if args.resume:
        resume = load_checkpoint(run_dir / "checkpoint.npz")
        saved, wanted = dict(resume.train_config), cfg.train.to_dict()
        saved.pop("steps"), wanted.pop("steps")
        if saved != wanted:
            diff = sorted(k for k in wanted if saved.get(k) != wanted[k])
            raise ConfigError(f"resume config differs from the checkpoint's in {diff}; only steps may change")
    _echo(cfg, run_dir, {"command": "pretrain", "data": args.data})
    splits = _splits(cfg, args.data)
    result = pretrain(cfg.model, cfg.train, splits["train"], splits["val"], run_dir, resume)
    final = evaluate_pretraining(result.model, splits["val"][: cfg.train.eval_size], cfg.train.seed)
    print(json.dumps({"step": result.step, **final}))
    return 0


def _head_params(head: TaskHead) -> dict:
    return {f"head.{n}": p.data.copy() for n, p in head.named_parameters()}


def cmd_finetune(args) -> int:
    cfg = _load(args, {"finetune.seed": args.seed, "finetune.steps": args.steps})
    run_dir = Path(args.run_dir)
    _echo(cfg, run_dir, {"command": "finetune", "task": args.task, "checkpoint": args.checkpoint})
    source = load_checkpoint(args.checkpoint) if args.checkpoint else None
    model_cfg = cfg.model
    if source is not None:
        model_cfg = type(cfg.model).from_dict(source.model_config)
    world = World.create(cfg.data)
    task = make_task(world, args.task, cfg.ablation.task_seed, cfg.ablation.task_train, cfg.ablation.task_test)
    model, head = finetune(source, task, cfg.finetune, model_cfg)
    metrics = _evaluate(model, head, task, "greedy")
    record = {"task": args.task, **metrics}
    (run_dir / "metrics.jsonl").write_text(json.dumps(record) + "\n")
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    params.update(_head_params(head))
    meta = {"task": args.task, "n_answers": task.n_answers, **dataclasses.asdict(cfg.finetune)}
    save_checkpoint(run_dir / "checkpoint.npz", Checkpoint(params, model.cfg.to_dict(), meta, cfg.finetune.steps, cfg.finetune.seed))
    print(json.dumps(record))
    return 0


def _evaluate(model, head, task, mode: str) -> dict:
    if task.kind == "classification":
        return {"vqa_acc": eval_classification(model, head, task.test)}
    if task.kind == "multichoice":
        return {"mc_acc": eval_multichoice(model, head, task.test)}
    if task.kind == "retrieval":
        r = eval_retrieval(model, task.test)
        return {"r@1": r[1], "r@5": r[5], "r@10": r[10]}
    g = eval_generation(model, task.test, mode)
    return {"cap_f1": g["f1"], "cap_em": g["exact_match"]}


def cmd_eval(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    if args.task == "pretraining":
        splits = _splits(cfg, args.data)
        print(json.dumps(evaluate_pretraining(model, splits["val"], cfg.train.seed)))
        return 0
    head = None
    if args.task in ("classification", "multichoice"):
        if ckpt.train_config.get("task") != args.task:
            raise RuntimeError(f"checkpoint has no {args.task} head; run finetune --task {args.task} first")
        n_out = ckpt.train_config.get("n_answers") or 1
        head = TaskHead(args.task, model.cfg.d_model, np.random.default_rng(0), n_out)
        for name, p in head.named_parameters():
            p.data[...] = ckpt.params[f"head.{name}"]
    world = World.create(cfg.data)
    task = make_task(world, args.task, cfg.ablation.task_seed, cfg.ablation.task_train, cfg.ablation.task_test)
    print(json.dumps({"task": args.task, **_evaluate(model, head, task, args.mode)}))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    seconds = results.pop("_seconds")
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error: {worst:.3e} ({seconds:.1f}s)")
    return 0 if worst < GRAD_TOLERANCE else 2


def cmd_ablate(args) -> int:
    cfg = _load(args)
    try:
        presets = [int(p) for p in args.presets.split(",")]
    except ValueError:
        raise UsageError(f"--presets must be a comma list of integers, got {args.presets!r}") from None
    bad = [p for p in presets if p != ablation.SCRATCH and p not in ablation.PRESETS]
    if bad:
        raise UsageError(f"unknown presets {bad}; choose from 0-8")
    run_dir = Path(args.run_dir)
    _echo(cfg, run_dir, {"command": "ablate", "presets": presets})
    results = ablation.run_matrix(presets, cfg.ablation, args.workers)
    with open(run_dir / "metrics.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps(r) + "\n")
    table = ablation.comparison_table(results)
    checks = ablation.directional_checks(results)
    lines = [table, ""] + [f"{'yes' if ok else 'no '}  {name}" for name, ok in checks.items()]
    (run_dir / "table.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"tden {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures surface as exit 2
        log.debug("failure", exc_info=True)
        print(f"tden {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
