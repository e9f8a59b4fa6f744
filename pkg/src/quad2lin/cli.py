"""Command line entry point: ``quad2lin <command> [flags]``.

Every command accepts ``--config`` (JSON), ``--seed``, ``--out`` and, where
it reads a model, ``--resume``. The seed is taken from ``--seed``, then the
``QUAD2LIN_SEED`` environment variable, then the config file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, Quad2LinError

log = logging.getLogger("quad2lin")

SECTIONS = ("seed", "model", "data", "train", "stage", "plan", "seeding", "init", "eval", "toy", "bench")


# --- configuration -------------------------------------------------------------


def _check_fields(section: dict, cls, path: str, extra: Sequence[str] = ()) -> dict:
    if not isinstance(section, dict):
        raise ConfigError("expected an object", path)
    names = {f.name for f in fields(cls)} | set(extra)
    for k in section:
        if k not in names:
            raise ConfigError("unknown field", f"{path}.{k}")
    return section


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config ({err.strerror})", "config") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON ({err.msg} at line {err.lineno})", "config") from None
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be an object", "config")
    for k in cfg:
        if k not in SECTIONS:
            raise ConfigError("unknown section", k)
    return cfg


def resolve_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("QUAD2LIN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"not an integer: {env!r}", "QUAD2LIN_SEED") from None
    seed = cfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"expected a non-negative integer, got {seed!r}", "seed")
    return seed


def task_config(cfg: dict):
    from .data import TaskConfig

    sec = dict(_check_fields(cfg.get("data", {}), TaskConfig, "data", extra=("mix", "fixed_samples")))
    sec.pop("mix", None)
    sec.pop("fixed_samples", None)
    try:
        return TaskConfig(**sec)
    except TypeError as err:
        raise ConfigError(str(err), "data") from None


def task_mix(cfg: dict):
    mix = cfg.get("data", {}).get("mix", "recall")
    from .data import _mix_weights

    _mix_weights(mix)
    return mix


def model_config(cfg: dict):
    from .experiments import _default_model
    from .model import ModelConfig

    sec = cfg.get("model", {})
    if not isinstance(sec, dict):
        raise ConfigError("expected an object", "model")
    base = asdict(_default_model())
    base["vocab"] = len(task_config(cfg).vocab())
    base.update(sec)
    return ModelConfig.from_dict(base)


def stage_config(cfg: dict, section: str, stage: int):
    from .distill import StageConfig

    sec = dict(_check_fields(cfg.get(section, {}), StageConfig, section))
    sec.pop("stage", None)
    if "betas" in sec:
        sec["betas"] = tuple(sec["betas"])
    if stage == 0:
        sec.setdefault("lr", 3e-3)
        sec.setdefault("batch", 32)
        sec.setdefault("steps", 2500)
        sec.setdefault("weight_decay", 0.0)
    try:
        return StageConfig.default(stage, **sec)
    except ConfigError as err:
        raise ConfigError(str(err).split(": ", 1)[-1], section + err.path[len("stage"):]) from None
    except TypeError as err:
        raise ConfigError(str(err), section) from None


def toy_setup(cfg: dict):
    from .experiments import ToySetup

    sec = dict(_check_fields(cfg.get("toy", {}), ToySetup, "toy"))
    for k in ("model", "task"):
        if k in sec:
            raise ConfigError("set this through its own section", f"toy.{k}")
    if "stage_lr" in sec:
        sec["stage_lr"] = tuple(sec["stage_lr"])
    if "model" in cfg:
        sec["model"] = model_config(cfg)
    if "data" in cfg:
        sec["task"] = task_config(cfg)
        sec["mix"] = task_mix(cfg)
    return ToySetup(**sec)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_run_manifest(out: Path, cfg: dict, seed: int, model=None, extra: dict | None = None) -> None:
    from .checkpoint import content_hash

    rec = {"config_hash": config_hash(cfg), "seed": seed, "config": cfg}
    if model is not None:
        rec["provenance"] = list(model.provenance)
        rec["checkpoint_sha256"] = content_hash(model)
    rec.update(extra or {})
    (out / "run.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")


def _training_data(cfg: dict, seed: int, batch: int, steps: int):
    from .data import batches, collate, fixed_set

    task = task_config(cfg)
    mix = task_mix(cfg)
    n_fixed = cfg.get("data", {}).get("fixed_samples")
    if n_fixed is None:
        return batches(mix, seed, batch, steps, task)
    pool = fixed_set(mix, seed, int(n_fixed), task)
    rng = np.random.default_rng(seed)

    def gen():
        for _ in range(steps):
            idx = rng.choice(len(pool), size=min(batch, len(pool)), replace=False)
            yield collate([pool[i] for i in idx], task)

    return gen()


def _eval_samples(cfg: dict, seed: int):
    from .data import fixed_set

    task = task_config(cfg)
    ev = cfg.get("eval", {})
    if not isinstance(ev, dict):
        raise ConfigError("expected an object", "eval")
    for k in ev:
        if k not in ("split", "n", "seed"):
            raise ConfigError("unknown field", f"eval.{k}")
    if ev.get("split", "heldout") == "train":
        n_fixed = cfg.get("data", {}).get("fixed_samples")
        if n_fixed is None:
            raise ConfigError("split 'train' needs data.fixed_samples", "eval.split")
        return fixed_set(task_mix(cfg), seed + 1, int(n_fixed), task)
    return fixed_set(task_mix(cfg), int(ev.get("seed", 999)), int(ev.get("n", 512)), task)


def _csv_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# --- commands -------------------------------------------------------------------


def cmd_train_teacher(args, cfg: dict, seed: int, out: Path) -> int:
    from .checkpoint import load
    from .distill import run_stage
    from .model import build_teacher

    stage = stage_config(cfg, "train", 0)
    teacher = load(args.resume) if args.resume else build_teacher(model_config(cfg), seed)
    data = _training_data(cfg, seed + 1, stage.batch, stage.steps)
    run_stage(stage, None, teacher, data, metrics_path=out / "metrics.csv", checkpoint_dir=out / "teacher",
              log=_progress(stage.steps))
    write_run_manifest(out, cfg, seed, teacher)
    print(out / "teacher")
    return 0


def cmd_convert(args, cfg: dict, seed: int, out: Path) -> int:
    from .checkpoint import load, save
    from .model import convert, hybrid_plan
    from .seeding import SeedConfig

    if not args.resume:
        raise ConfigError("convert needs --resume <teacher checkpoint>", "resume")
    teacher = load(args.resume)
    plan_sec = cfg.get("plan", {})
    for k in plan_sec:
        if k not in ("n_attention", "strategy"):
            raise ConfigError("unknown field", f"plan.{k}")
    plan = hybrid_plan(teacher.cfg.L, plan_sec.get("n_attention", 0), plan_sec.get("strategy", "head-interleaved"))
    seed_sec = dict(_check_fields(cfg.get("seeding", {}), SeedConfig, "seeding"))
    seed_sec.setdefault("conv_width", teacher.cfg.conv_width)
    seed_cfg = SeedConfig(**seed_sec)
    init = cfg.get("init", "mimic")
    student = convert(teacher, plan, seed_cfg, init=init, rng=np.random.default_rng(seed))
    save(student, out / "student")
    write_run_manifest(out, cfg, seed, student, {"teacher": str(args.resume), "plan": str(plan)})
    print(out / "student")
    return 0


def cmd_distill(args, cfg: dict, seed: int, out: Path) -> int:
    from .checkpoint import load
    from .distill import run_stage

    if not args.resume or not args.teacher:
        raise ConfigError("distill needs --resume <student> and --teacher <teacher>", "resume")
    teacher, student = load(args.teacher), load(args.resume)
    stage = stage_config(cfg, "stage", args.stage)
    data = _training_data(cfg, seed + 10 * args.stage + 1, stage.batch, stage.steps)
    run_stage(stage, teacher, student, data, metrics_path=out / f"metrics_stage{args.stage}.csv",
              checkpoint_dir=out / "student", log=_progress(stage.steps))
    write_run_manifest(out, cfg, seed, student, {"teacher": str(args.teacher), "stage": args.stage})
    print(out / "student")
    return 0


def cmd_eval(args, cfg: dict, seed: int, out: Path) -> int:
    from .checkpoint import load
    from .distill import masked_accuracy, mean_kl

    if not args.resume:
        raise ConfigError("eval needs --resume <checkpoint>", "resume")
    model = load(args.resume)
    task = task_config(cfg)
    samples = _eval_samples(cfg, seed)
    result = {"checkpoint": str(args.resume), "n": len(samples)}
    for name in sorted({s.task for s in samples}):
        subset = [s for s in samples if s.task == name]
        result[f"accuracy_{name}"] = masked_accuracy(model, subset, task)
    result["accuracy"] = masked_accuracy(model, samples, task)
    if args.teacher:
        result["kl"] = mean_kl(load(args.teacher), model, samples, task)
    (out / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_bench(args, cfg: dict, seed: int, out: Path) -> int:
    from .bench import bench_config, bench_decode, write_bench_csv
    from .checkpoint import load
    from .model import build_teacher, convert, hybrid_plan

    try:
        lengths = [int(x) for x in args.lengths.split(",") if x]
    except ValueError:
        raise ConfigError(f"not a comma-separated integer list: {args.lengths!r}", "lengths") from None
    if not lengths:
        raise ConfigError("no lengths given", "lengths")
    sec = cfg.get("bench", {})
    if args.resume:
        models = {"model": load(args.resume)}
    else:
        mcfg = bench_config(max(lengths), **{k: v for k, v in sec.items() if k != "reps"})
        base = build_teacher(mcfg, seed)
        L = mcfg.L
        models = {}
        for name in args.models.split(","):
            n = {"attention": L, "mamba2": 0, "hybrid": L // 4 or 1}.get(name)
            if n is None:
                raise ConfigError(f"unknown model kind {name!r}", "models")
            models[name] = base if n == L else convert(base, hybrid_plan(L, n, "head-interleaved"))
    param_bytes = {}
    for name, model in models.items():
        res = bench_decode(model, lengths, reps=args.reps, seed=seed, allow_overflow=args.allow_overflow, label=name)
        write_bench_csv(res, out / f"bench_{name}.csv")
        param_bytes[name] = res.param_bytes
        for r in res.rows:
            log.info("%s T=%d decode %.3e s/token", name, r.context_length, r.decode_s_per_token)
        print(out / f"bench_{name}.csv")
    write_run_manifest(out, cfg, seed, extra={"lengths": lengths, "param_bytes": param_bytes})
    return 0


def cmd_ablate(args, cfg: dict, seed: int, out: Path) -> int:
    from .checkpoint import load, save
    from .distill import masked_accuracy
    from .experiments import run_grid, train_toy_teacher

    setup = toy_setup(cfg)
    if args.resume:
        teacher = load(args.resume)
    else:
        teacher = train_toy_teacher(setup, seed)
        save(teacher, out / "teacher")
    seeds = tuple(seed + i for i in range(args.seeds))
    rows = run_grid(args.grid, teacher, setup, seeds)
    teacher_acc = masked_accuracy(teacher, setup.eval_set(), setup.task)
    for r in rows:
        r["teacher_accuracy"] = teacher_acc
    _csv_rows(out / f"ablate_{args.grid}.csv", rows)
    write_run_manifest(out, cfg, seed, teacher, {"grid": args.grid})
    print(out / f"ablate_{args.grid}.csv")
    return 0


def cmd_plot(args, cfg: dict, seed: int, out: Path) -> int:
    from .plot import plot_bench

    path = plot_bench(args.inputs, out / args.name, metric=args.metric)
    print(path)
    return 0


def _progress(total: int):
    step = max(1, total // 10)

    def cb(row):
        if row["step"] % step == 0 or row["step"] == total - 1:
            log.info("stage %d step %d/%d loss %.5g lr %.3g", row["stage"], row["step"], total, row["loss"], row["lr"])

    return cb


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides QUAD2LIN_SEED and the config seed")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--resume", help="checkpoint directory to start from")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="quad2lin", description="Attention-to-Mamba-2 distillation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="train an all-attention teacher")
    sub.add_parser("convert", parents=[common], help="carve a hybrid/Mamba-2 student from a teacher")
    d = sub.add_parser("distill", parents=[common], help="run one distillation stage")
    d.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    d.add_argument("--teacher", help="teacher checkpoint directory")
    e = sub.add_parser("eval", parents=[common], help="masked-token accuracy per task")
    e.add_argument("--teacher", help="also report KL to this teacher")
    b = sub.add_parser("bench", parents=[common], help="decode latency / memory sweep")
    b.add_argument("--lengths", default="1024,4096,16384")
    b.add_argument("--models", default="attention,mamba2,hybrid")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--allow-overflow", action="store_true", help="let Mamba-2 layers run past max_pos")
    a = sub.add_parser("ablate", parents=[common], help="ablation grids on the toy setup")
    a.add_argument("--grid", required=True, choices=("stages", "init", "hybrid-ratio", "hybrid-strategy"))
    a.add_argument("--seeds", type=int, default=3)
    pl = sub.add_parser("plot", parents=[common], help="bench CSVs to an SVG line chart")
    pl.add_argument("inputs", nargs="+", help="bench CSV files written by `bench`")
    pl.add_argument("--metric", default="decode_s_per_token",
                    choices=("decode_s_per_token", "prefill_s", "kv_bytes", "state_bytes"))
    pl.add_argument("--name", default="bench.svg")
    return p


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "convert": cmd_convert,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 with usage on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        seed = resolve_seed(args, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, seed, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Quad2LinError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
