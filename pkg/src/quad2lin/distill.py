"""Progressive distillation: losses, parameter selection, AdamW and WSD.

Stage 1 trains only the SSM-only parameters of each converted layer against
the teacher's attention output on the teacher's own layer input. Stage 2
adds the inherited q/k/v projections. Stage 3 trains end to end on the
teacher's token distribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ContractError, DivergenceError
from .mixers import Mamba2Weights
from .model import DecoderModel, LayerKind, capture_layer_io, forward, mixer_forward
from .seeding import SSM_EXTRA
from .tensor import Tape, Tensor

STAGE_DEFAULTS = {
    1: {"lr": 1e-3, "batch": 128},
    2: {"lr": 5e-4, "batch": 128},
    3: {"lr": 5e-5, "batch": 64},
}
METRIC_FIELDS = ("step", "stage", "loss", "lr", "grad_norm")


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters of one optimisation run.

    ``stage`` 1 and 2 use the layerwise MSE loss, 3 uses token-level KL, and
    0 is plain next-token cross entropy for training a teacher.
    """

    stage: int
    lr: float
    steps: int = 20_000
    batch: int = 128
    weight_decay: float = 0.05
    clip_norm: float = 5.0
    warmup_frac: float = 0.1
    decay_frac: float = 0.1
    kl_temperature: float = 1.0
    kl_mask: str = "all"  # "all" non-pad positions or only "answer" positions
    include_wo: bool = False
    train_attention: bool = False  # stage 3: also update preserved attention layers
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in (0, 1, 2, 3):
            raise ConfigError(f"stage must be 0..3, got {self.stage}", "stage.stage")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1", "stage.steps")
        if self.lr < 0:
            raise ConfigError("must be >= 0", "stage.lr")
        if not (0 <= self.warmup_frac and 0 <= self.decay_frac and self.warmup_frac + self.decay_frac <= 1):
            raise ConfigError("need warmup_frac + decay_frac <= 1", "stage.warmup_frac")
        if self.kl_mask not in ("all", "answer"):
            raise ConfigError("must be 'all' or 'answer'", "stage.kl_mask")
        if self.kl_temperature <= 0:
            raise ConfigError("must be > 0", "stage.kl_temperature")

    @classmethod
    def default(cls, stage: int, **overrides) -> "StageConfig":
        base = dict(STAGE_DEFAULTS.get(stage, {"lr": 1e-3, "batch": 32}))
        base.update(overrides)
        return cls(stage=stage, **base)

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "stage") -> "StageConfig":
        names = {f.name for f in fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError("unknown field", f"{prefix}.{k}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        stage = d.pop("stage", None)
        if stage is None:
            raise ConfigError("missing", f"{prefix}.stage")
        return cls.default(stage, **d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- parameter selection -----------------------------------------------------


def trainable_set(stage: int, layer, include_wo: bool = False) -> set[str]:
    """Names of the mixer parameters a stage may update."""
    if not isinstance(layer, Mamba2Weights):
        return set()
    names = set(SSM_EXTRA)
    if stage >= 2:
        names |= {"W_Q", "W_K", "W_V"}
    if include_wo:
        names.add("W_O")
    return names


def configure_stage(model: DecoderModel, cfg: StageConfig) -> None:
    """Set ``model.frozen`` so only the stage's parameters are trainable."""
    trainable = set()
    for i, b in enumerate(model.blocks):
        if b.kind is LayerKind.MAMBA2:
            names = trainable_set(max(cfg.stage, 1), b.mixer, cfg.include_wo)
        elif cfg.stage == 0 or (cfg.stage == 3 and cfg.train_attention):
            names = set(b.mixer.params())
        else:
            names = set()
        trainable |= {f"blocks.{i}.mixer.{n}" for n in names}
    everything = set(model.named_params())
    if cfg.stage == 0:
        trainable = everything
    model.frozen = everything - trainable


# --- losses ------------------------------------------------------------------


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean of ``x`` (..., T, C) over channels and the masked tokens."""
    if mask is None:
        return tc.mean(x)
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:-1]:
        raise ContractError(f"mask shape {m.shape} does not match {x.shape[:-1]}")
    denom = max(float(m.sum()), 1.0) * x.shape[-1]
    return tc.mul(tc.sum_(tc.mul(x, m[..., None])), 1.0 / denom)


def layerwise_mse(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    student: DecoderModel,
    mask: np.ndarray | None = None,
    layers: Iterable[int] | None = None,
) -> Tensor:
    """Sum over converted layers of the mean squared gap between the student
    mixer on the teacher's mixer input and the teacher's mixer output."""
    if len(pairs) != len(student.blocks):
        raise ContractError(f"{len(pairs)} captured layers for a {len(student.blocks)}-layer student")
    if layers is None:
        layers = [i for i, b in enumerate(student.blocks) if b.kind is LayerKind.MAMBA2]
    total = None
    for i in layers:
        X, Y = pairs[i]
        out = mixer_forward(student.blocks[i].mixer, Tensor(X), student.cfg.chunk)
        diff = tc.sub(out, Tensor(np.asarray(Y, dtype=out.dtype)))
        term = _masked_mean(tc.mul(diff, diff), mask)
        total = term if total is None else tc.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=student.cfg.np_dtype))
    return total


def kl_logits(teacher_logits, student_logits, temperature: float = 1.0, mask=None) -> Tensor:
    """Mean over unmasked positions of KL(softmax(t/T) || softmax(s/T))."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    if t.shape != s.shape:
        raise ContractError(f"teacher logits {t.shape} and student logits {s.shape} differ")
    tz = t / temperature
    tz = tz - tz.max(axis=-1, keepdims=True)
    log_p = tz - np.log(np.exp(tz).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    log_q = tc.log_softmax(tc.mul(s, 1.0 / temperature), axis=-1)
    per_pos = tc.sum_(tc.mul(tc.sub(Tensor(log_p.astype(s.dtype)), log_q), p.astype(s.dtype)), axis=-1)
    if mask is None:
        return tc.mean(per_pos)
    m = np.asarray(mask, dtype=s.dtype)
    return tc.mul(tc.sum_(tc.mul(per_pos, m)), 1.0 / max(float(m.sum()), 1.0))


def next_token_targets(tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift so position t predicts token t+1; returns (targets, mask) for positions."""
    targets = np.zeros_like(tokens)
    targets[..., :-1] = tokens[..., 1:]
    m = np.zeros(mask.shape, dtype=bool)
    m[..., :-1] = mask[..., 1:]
    return targets, m


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    logp = tc.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    onehot *= np.asarray(mask, dtype=logits.dtype)[..., None]
    return tc.mul(tc.sum_(tc.mul(logp, onehot)), -1.0 / max(float(np.sum(mask)), 1.0))


# --- optimisation ------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    st: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    wd: float = 0.0,
    eps: float = 1e-8,
    no_decay: Callable[[str, Tensor], bool] | None = None,
) -> None:
    """Bias-corrected Adam moments with decoupled weight decay, in place."""
    b1, b2 = betas
    st.step += 1
    c1 = 1.0 - b1**st.step
    c2 = 1.0 - b2**st.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        m, v = st.m[name], st.v[name]
        if m.shape != p.shape:
            raise ContractError(f"optimizer buffer for {name} has shape {m.shape}, param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        decay = 0.0 if (no_decay is not None and no_decay(name, p)) else wd
        if decay:
            p.data *= 1.0 - lr * decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def wsd_lr(step: int, total: int, base: float, warmup_frac: float = 0.1, decay_frac: float = 0.1) -> float:
    """Linear warmup from 0, flat plateau, linear decay to 0."""
    warm = warmup_frac * total
    decay = decay_frac * total
    if warm > 0 and step < warm:
        return base * step / warm
    if decay > 0 and step >= total - decay:
        return base * (total - step) / decay
    return base


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Scale all grads in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = global_norm(grads.values())
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def _no_decay(name: str, p: Tensor) -> bool:
    # vectors (norm scales, biases, decay rates) are not decayed
    return p.ndim < 2


# --- training loop -----------------------------------------------------------


@dataclass
class StageResult:
    metrics: list[dict]
    opt: OptimizerState


def write_metrics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("loss", "lr", "grad_norm") else r[k]) for k in METRIC_FIELDS})


def stage_loss(cfg: StageConfig, teacher: DecoderModel | None, student: DecoderModel, batch) -> Tensor:
    if cfg.stage == 0:
        targets, mask = next_token_targets(batch.tokens, batch.loss_mask)
        return cross_entropy(forward(student, batch), targets, mask)
    if cfg.stage in (1, 2):
        pairs = capture_layer_io(teacher, batch)
        return layerwise_mse(pairs, student, mask=batch.pad_mask)
    t_logits = forward(teacher, batch).data
    s_logits = forward(student, batch)
    if cfg.kl_mask == "all":
        mask = batch.pad_mask
    else:
        mask = next_token_targets(batch.tokens, batch.loss_mask)[1]
    return kl_logits(t_logits, s_logits, cfg.kl_temperature, mask)


def run_stage(
    cfg: StageConfig,
    teacher: DecoderModel | None,
    student: DecoderModel,
    data: Iterable,
    metrics_path=None,
    checkpoint_dir=None,
    opt: OptimizerState | None = None,
    start_step: int = 0,
    log: Callable[[dict], None] | None = None,
) -> StageResult:
    """Run ``cfg.steps`` optimizer steps of one stage on ``student`` in place.

    ``data`` yields :class:`~quad2lin.data.Batch` objects. Stage 0 ignores
    the teacher and trains ``student`` on next-token cross entropy.
    """
    from .checkpoint import save  # local import: checkpoint depends on model only

    configure_stage(student, cfg)
    params = student.trainable()
    for name, p in student.named_params().items():
        p.requires_grad = name in params
        p.grad = None
    opt = opt or OptimizerState()
    rows: list[dict] = []
    it = iter(data)
    try:
        for step in range(start_step, cfg.steps):
            batch = next(it)
            lr = wsd_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac, cfg.decay_frac)
            if params:
                with Tape() as tape:
                    loss = stage_loss(cfg, teacher, student, batch)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise _Diverged(step, loss_val)
                tape.backward(loss)
                grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
                norm = clip_grad_norm(grads, cfg.clip_norm)
                adamw_step(params, grads, opt, lr, cfg.betas, cfg.weight_decay, cfg.eps, _no_decay)
                for p in params.values():
                    p.grad = None
            else:
                loss_val = float(stage_loss(cfg, teacher, student, batch).data)
                if not math.isfinite(loss_val):
                    raise _Diverged(step, loss_val)
                norm = 0.0
            row = {"step": step, "stage": cfg.stage, "loss": loss_val, "lr": lr, "grad_norm": norm}
            rows.append(row)
            if log is not None:
                log(row)
    except _Diverged as err:
        ckpt = None
        if checkpoint_dir is not None:
            ckpt = str(checkpoint_dir) + ".diverged"
            save(student, ckpt)
        if metrics_path is not None:
            write_metrics(rows, metrics_path)
        raise DivergenceError(
            f"stage {cfg.stage}: non-finite loss {err.loss} at step {err.step}", checkpoint=ckpt
        ) from None
    finally:
        for p in student.named_params().values():
            p.requires_grad = False
            p.grad = None
    student.provenance.append(f"stage{cfg.stage}:{cfg.steps}")
    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    if checkpoint_dir is not None:
        save(student, checkpoint_dir)
    return StageResult(rows, opt)


class _Diverged(Exception):
    def __init__(self, step: int, loss: float):
        self.step, self.loss = step, loss


def train_teacher(model: DecoderModel, data: Iterable, cfg: StageConfig, **kw) -> StageResult:
    """Plain next-token training of an all-attention model on its loss masks."""
    if cfg.stage != 0:
        raise ConfigError("teacher training uses stage 0", "stage.stage")
    return run_stage(cfg, None, model, data, **kw)


# --- evaluation ----------------------------------------------------------------


def masked_accuracy(model: DecoderModel, samples, cfg=None, batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over the loss-masked target tokens."""
    from .data import TaskConfig, collate

    cfg = cfg or TaskConfig()
    correct = total = 0
    for s in range(0, len(samples), batch_size):
        batch = collate(samples[s : s + batch_size], cfg)
        logits = forward(model, batch).data
        targets, mask = next_token_targets(batch.tokens, batch.loss_mask)
        pred = logits.argmax(axis=-1)
        correct += int(np.sum((pred == targets) & mask))
        total += int(mask.sum())
    return correct / max(total, 1)


def mean_kl(teacher: DecoderModel, student: DecoderModel, samples, cfg=None, batch_size: int = 64, temperature: float = 1.0) -> float:
    """Token-level KL averaged over all real positions of ``samples``."""
    from .data import TaskConfig, collate

    cfg = cfg or TaskConfig()
    num = den = 0.0
    for s in range(0, len(samples), batch_size):
        batch = collate(samples[s : s + batch_size], cfg)
        kl = kl_logits(forward(teacher, batch), forward(student, batch), temperature, batch.pad_mask)
        n = float(batch.pad_mask.sum())
        num += float(kl.data) * n
        den += n
    return num / max(den, 1.0)
