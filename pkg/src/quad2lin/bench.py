"""Decode latency and cache-memory scaling.

Latency is wall-clock (``time.perf_counter``) per generated token on a
prefilled context: median over ``reps`` timed repetitions after ``warmup``
untimed ones. Memory is the live KV-cache and SSM-state bytes, both from the
closed form and from the runtime buffers; weight bytes are kept separately.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DecoderModel, HybridPlan, LayerKind, ModelConfig, decode_step, prefill

BENCH_FIELDS = ("context_length", "prefill_s", "decode_s_per_token", "kv_bytes", "state_bytes", "status")


@dataclass
class BenchRow:
    context_length: int
    prefill_s: float
    decode_s_per_token: float
    kv_bytes: int
    state_bytes: int
    status: str = "ok"


@dataclass
class BenchResult:
    label: str
    rows: list[BenchRow] = field(default_factory=list)
    param_bytes: int = 0  # weights, constant in T; not part of the CSV

    def latency(self, T: int) -> float:
        for r in self.rows:
            if r.context_length == T:
                return r.decode_s_per_token
        raise KeyError(T)

    def growth(self, short: int, long: int) -> float:
        return self.latency(long) / self.latency(short)


def memory_model(cfg: ModelConfig, plan: HybridPlan, T: int, bytes_per_scalar: int = 4) -> tuple[int, int]:
    """(kv_bytes, state_bytes) of the decode memory after ``T`` tokens."""
    G, H, dh, w = cfg.G, cfg.H, cfg.d_h, cfg.conv_width
    n_attn = sum(k is LayerKind.ATTENTION for k in plan.kinds)
    n_mamba = len(plan.kinds) - n_attn
    kv = n_attn * 2 * T * G * dh * bytes_per_scalar
    state = n_mamba * (G * dh * dh + (w - 1) * (H + 2 * G) * dh) * bytes_per_scalar
    return kv, state


def bench_decode(
    model: DecoderModel,
    context_lengths: Sequence[int],
    reps: int = 5,
    warmup: int = 2,
    tokens_per_rep: int = 16,
    seed: int = 0,
    allow_overflow: bool = False,
    label: str = "",
) -> BenchResult:
    """Prefill a random context of each length, then time single-token decode.

    A length that raises ``MemoryError`` is recorded with status ``oom`` and
    the sweep continues.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    lengths = list(context_lengths)
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("context lengths must be strictly increasing")
    need = lengths[-1] + (warmup + reps) * tokens_per_rep if lengths else 0
    if need > model.cfg.max_pos and not allow_overflow:
        raise ValueError(f"longest run needs {need} positions but max_pos={model.cfg.max_pos}")
    rng = np.random.default_rng(seed)
    out = BenchResult(label or str(model.plan), param_bytes=sum(p.data.nbytes for p in model.named_params().values()))
    for T in lengths:
        ids = rng.integers(1, model.cfg.vocab, size=T)
        try:
            t0 = time.perf_counter()
            logits, state = prefill(model, ids, allow_overflow=allow_overflow)
            prefill_s = time.perf_counter() - t0
            kv, st = state.kv_bytes, state.state_bytes
            tok = int(np.argmax(logits))
            times = []
            for r in range(warmup + reps):
                t0 = time.perf_counter()
                for _ in range(tokens_per_rep):
                    tok = int(np.argmax(decode_step(model, tok, state)))
                dt = (time.perf_counter() - t0) / tokens_per_rep
                if r >= warmup:
                    times.append(dt)
            out.rows.append(BenchRow(T, prefill_s, statistics.median(times), kv, st))
        except MemoryError:
            out.rows.append(BenchRow(T, float("nan"), float("nan"), 0, 0, "oom"))
        finally:
            state = None  # noqa: F841  release the cache before the next length
    return out


def write_bench_csv(result: BenchResult, path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writerow(BENCH_FIELDS)
        for r in result.rows:
            w.writerow([r.context_length, repr(r.prefill_s), repr(r.decode_s_per_token), r.kv_bytes, r.state_bytes, r.status])


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0]) != BENCH_FIELDS:
        raise ValueError(f"{path}: not a bench CSV (columns {tuple(rows[0])})")
    return rows


def bench_config(max_len: int, **kw) -> ModelConfig:
    """Untrained model sized for decode benchmarks up to ``max_len`` context tokens
    plus 1024 decoded ones."""
    base = dict(L=4, d=64, H=4, G=2, d_h=16, d_mlp=128, vocab=48, max_pos=max_len + 1024, chunk=64)
    base.update(kw)
    return ModelConfig(**base)
