"""Ablation drivers on the toy recall setup.

Each grid returns a list of row dicts. The CLI writes them as CSV and the
acceptance tests assert orderings over them.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import TaskConfig, batches, fixed_set
from .distill import StageConfig, masked_accuracy, mean_kl, run_stage, train_teacher
from .model import STRATEGIES, DecoderModel, ModelConfig, build_teacher, convert, hybrid_plan
from .seeding import INIT_MODES

GRIDS = ("stages", "init", "hybrid-ratio", "hybrid-strategy")


def _default_model() -> ModelConfig:
    return ModelConfig(L=4, d=64, H=4, G=2, d_h=16, d_mlp=128, vocab=len(TaskConfig().vocab()), init_std=0.1)


@dataclass(frozen=True)
class ToySetup:
    """Desk-scale stand-in for the full training recipe.

    Stage learning rates keep the 1e-3 / 5e-4 of the first two stages. The
    third stage uses 1e-3 because at a few hundred steps the full-scale 5e-5
    barely moves the student. Ablation runs get the same step budget as one
    stage of the pipeline.
    """

    model: ModelConfig = field(default_factory=_default_model)
    task: TaskConfig = field(default_factory=TaskConfig)
    mix: str = "recall"
    teacher_steps: int = 2500
    teacher_lr: float = 3e-3
    batch: int = 32
    stage_steps: int = 800
    ablation_steps: int = 800
    stage_lr: tuple[float, float, float] = (1e-3, 5e-4, 1e-3)
    eval_n: int = 512
    eval_seed: int = 999

    def stage_config(self, stage: int, steps: int | None = None) -> StageConfig:
        return StageConfig.default(
            stage, lr=self.stage_lr[stage - 1], steps=steps or self.stage_steps, batch=self.batch
        )

    def eval_set(self):
        return fixed_set(self.mix, self.eval_seed, self.eval_n, self.task)


def train_toy_teacher(setup: ToySetup, seed: int = 0, log: Callable | None = None) -> DecoderModel:
    teacher = build_teacher(setup.model, seed)
    cfg = StageConfig.default(0, lr=setup.teacher_lr, steps=setup.teacher_steps, batch=setup.batch, weight_decay=0.0)
    train_teacher(teacher, batches(setup.mix, seed + 1, setup.batch, cfg.steps, setup.task), cfg, log=log)
    return teacher


def distill_student(
    teacher: DecoderModel,
    setup: ToySetup,
    stages: Sequence[int],
    n_attention: int = 0,
    strategy: str = "head-interleaved",
    init: str = "mimic",
    seed: int = 0,
    steps: int | None = None,
) -> DecoderModel:
    """Convert ``teacher`` and run ``stages`` in order, each for the same step count."""
    plan = hybrid_plan(setup.model.L, n_attention, strategy)
    student = convert(teacher, plan, init=init, rng=np.random.default_rng([seed, 17]))
    for stage in stages:
        cfg = setup.stage_config(stage, steps)
        data = batches(setup.mix, 1000 * seed + 10 * stage + 1, cfg.batch, cfg.steps, setup.task)
        run_stage(cfg, teacher, student, data)
    return student


def stage_grid(teacher: DecoderModel, setup: ToySetup, seed: int = 0,
               combos: Sequence[Sequence[int]] = ((1,), (3,), (1, 2), (1, 2, 3))) -> list[dict]:
    ev = setup.eval_set()
    rows = []
    for stages in combos:
        student = distill_student(teacher, setup, stages, seed=seed)
        rows.append({
            "stages": "+".join(map(str, stages)),
            "seed": seed,
            "accuracy": masked_accuracy(student, ev, setup.task),
            "kl": mean_kl(teacher, student, ev, setup.task),
        })
    return rows


def init_grid(teacher: DecoderModel, setup: ToySetup, seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    ev = setup.eval_set()
    rows = []
    for init in INIT_MODES:
        for seed in seeds:
            student = distill_student(teacher, setup, (3,), init=init, seed=seed, steps=setup.ablation_steps)
            rows.append({
                "init": init,
                "seed": seed,
                "accuracy": masked_accuracy(student, ev, setup.task),
                "kl": mean_kl(teacher, student, ev, setup.task),
            })
    return rows


def hybrid_ratio_grid(teacher: DecoderModel, setup: ToySetup, n_values: Sequence[int] = (0, 2, 4),
                      seeds: Sequence[int] = (0, 1, 2), strategy: str = "head-interleaved") -> list[dict]:
    ev = setup.eval_set()
    rows = []
    for n in n_values:
        for seed in seeds:
            student = distill_student(teacher, setup, (3,), n_attention=n, strategy=strategy, seed=seed,
                                      steps=setup.ablation_steps)
            rows.append({
                "n_attention": n,
                "seed": seed,
                "plan": str(student.plan),
                "accuracy": masked_accuracy(student, ev, setup.task),
                "kl": mean_kl(teacher, student, ev, setup.task),
            })
    return rows


def hybrid_strategy_grid(teacher: DecoderModel, setup: ToySetup, n_attention: int | None = None,
                         seed: int = 0) -> list[dict]:
    n = setup.model.L // 2 if n_attention is None else n_attention
    ev = setup.eval_set()
    rows = []
    for strategy in STRATEGIES:
        student = distill_student(teacher, setup, (3,), n_attention=n, strategy=strategy, seed=seed,
                                  steps=setup.ablation_steps)
        rows.append({
            "strategy": strategy,
            "plan": str(student.plan),
            "seed": seed,
            "accuracy": masked_accuracy(student, ev, setup.task),
            "kl": mean_kl(teacher, student, ev, setup.task),
        })
    return rows


def median_by(rows: Sequence[dict], key: str, value: str) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: statistics.median(v) for k, v in groups.items()}


def run_grid(name: str, teacher: DecoderModel, setup: ToySetup, seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    if name == "stages":
        return [r for s in seeds for r in stage_grid(teacher, setup, s)]
    if name == "init":
        return init_grid(teacher, setup, seeds)
    if name == "hybrid-ratio":
        return hybrid_ratio_grid(teacher, setup, seeds=seeds)
    if name == "hybrid-strategy":
        return hybrid_strategy_grid(teacher, setup, seed=seeds[0])
    raise ValueError(f"unknown grid {name!r}; choose from {GRIDS}")


def scaled(setup: ToySetup, **kw) -> ToySetup:
    return replace(setup, **kw)
