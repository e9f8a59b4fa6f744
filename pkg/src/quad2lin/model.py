"""Toy decoder-only multimodal model and hybrid layer plans.

Blocks are pre-norm residual: ``h += mixer(norm1(h)); h += mlp(norm2(h))``.
Image patches sit in the token stream as ``PATCH`` placeholders; their
embedding is ``tok_emb[PATCH] + patch @ patch_emb`` so the placeholder row
doubles as a modality embedding.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ContractError
from .mixers import (
    AttentionWeights,
    KVCache,
    Mamba2Weights,
    SSMState,
    attention_decode_step,
    attention_forward,
    attention_prefill,
    init_attention,
    mamba2_decode_step,
    mamba2_forward,
    mamba2_prefill,
)
from .seeding import SSM_EXTRA, SeedConfig, init_mamba2
from .tensor import Tensor


class LayerKind(str, enum.Enum):
    ATTENTION = "attention"
    MAMBA2 = "mamba2"

    @property
    def short(self) -> str:
        return "A" if self is LayerKind.ATTENTION else "M"


STRATEGIES = ("tail-stacked", "head-stacked", "tail-interleaved", "head-interleaved")


@dataclass(frozen=True)
class HybridPlan:
    kinds: tuple[LayerKind, ...]
    strategy: str = "custom"

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def attention_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k is LayerKind.ATTENTION]

    @property
    def mamba_layers(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k is LayerKind.MAMBA2]

    def __str__(self) -> str:
        return "".join(k.short for k in self.kinds)

    @classmethod
    def from_kinds(cls, kinds: Iterable, strategy: str = "custom") -> "HybridPlan":
        return cls(tuple(LayerKind(k) for k in kinds), strategy)


def hybrid_plan(L: int, n_attention: int, strategy: str) -> HybridPlan:
    """Which of ``L`` layers keep attention.

    Stacked strategies put the ``n_attention`` attention layers at the head
    or tail of the stack. Interleaved strategies split the stack into blocks
    of ``L // n_attention`` layers and keep attention at the first (head) or
    last (tail) layer of each block. ``n_attention == 0`` is all Mamba-2.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}", "plan.strategy")
    if not 0 <= n_attention <= L:
        raise ConfigError(f"n_attention={n_attention} must be in [0, {L}]", "plan.n_attention")
    attn: set[int] = set()
    if n_attention:
        if strategy == "tail-stacked":
            attn = set(range(L - n_attention, L))
        elif strategy == "head-stacked":
            attn = set(range(n_attention))
        else:
            if L % n_attention:
                raise ConfigError(
                    f"L={L} is not divisible by n_attention={n_attention}", "plan.n_attention"
                )
            interval = L // n_attention
            offset = 0 if strategy == "head-interleaved" else interval - 1
            attn = {b * interval + offset for b in range(n_attention)}
    kinds = tuple(LayerKind.ATTENTION if i in attn else LayerKind.MAMBA2 for i in range(L))
    return HybridPlan(kinds, strategy)


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    d: int = 64
    H: int = 4
    G: int = 2
    d_h: int = 16
    d_mlp: int = 128
    vocab: int = 48
    image_side: int = 4
    patch: int = 2
    channels: int = 3
    max_pos: int = 32
    conv_width: int = 4
    chunk: int = 64
    scale_scores: bool = True
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("L", "d", "H", "G", "d_h", "d_mlp", "vocab", "image_side", "patch", "max_pos", "chunk"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"model.{name}")
        if self.d != self.H * self.d_h:
            raise ConfigError(f"d={self.d} must equal H*d_h={self.H * self.d_h}", "model.d")
        if self.H % self.G:
            raise ConfigError(f"H={self.H} is not a multiple of G={self.G}", "model.G")
        if self.image_side % self.patch:
            raise ConfigError(f"patch={self.patch} does not divide image_side={self.image_side}", "model.patch")
        if not self.init_std > 0:
            raise ConfigError("must be > 0", "model.init_std")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("must be float32 or float64", "model.dtype")

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "model") -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            if k not in known:
                raise ConfigError("unknown field", f"{prefix}.{k}")
            want = type(getattr(cls(), k))
            if want is bool and not isinstance(v, bool):
                raise ConfigError(f"expected bool, got {v!r}", f"{prefix}.{k}")
            if want is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"expected int, got {v!r}", f"{prefix}.{k}")
            if want is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"expected number, got {v!r}", f"{prefix}.{k}")
            if want is str and not isinstance(v, str):
                raise ConfigError(f"expected str, got {v!r}", f"{prefix}.{k}")
        return cls(**d)


@dataclass
class Block:
    norm1: Tensor
    mixer: AttentionWeights | Mamba2Weights
    norm2: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @property
    def kind(self) -> LayerKind:
        return LayerKind.ATTENTION if isinstance(self.mixer, AttentionWeights) else LayerKind.MAMBA2

    def named_params(self) -> dict[str, Tensor]:
        out = {"norm1": self.norm1}
        out.update({f"mixer.{k}": v for k, v in self.mixer.params().items()})
        out.update({"norm2": self.norm2, "mlp.W1": self.W1, "mlp.b1": self.b1, "mlp.W2": self.W2, "mlp.b2": self.b2})
        return out


@dataclass
class DecoderModel:
    cfg: ModelConfig
    tok_emb: Tensor
    patch_emb: Tensor
    pos_emb: Tensor
    blocks: list[Block]
    final_norm: Tensor
    lm_head: Tensor
    frozen: set[str] = field(default_factory=set)
    provenance: list[str] = field(default_factory=list)

    @property
    def plan(self) -> HybridPlan:
        return HybridPlan(tuple(b.kind for b in self.blocks), "model")

    def named_params(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "patch_emb": self.patch_emb, "pos_emb": self.pos_emb}
        for i, b in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in b.named_params().items()})
        out.update({"final_norm": self.final_norm, "lm_head": self.lm_head})
        return out

    def set_param(self, name: str, value: Tensor) -> None:
        parts = name.split(".")
        if parts[0] != "blocks":
            setattr(self, name, value)
            return
        block = self.blocks[int(parts[1])]
        if parts[2] == "mixer":
            setattr(block.mixer, parts[3], value)
        elif parts[2] == "mlp":
            setattr(block, parts[3], value)
        else:
            setattr(block, parts[2], value)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if k not in self.frozen}

    def num_params(self) -> int:
        return sum(t.size for t in self.named_params().values())

    def clone(self) -> "DecoderModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "DecoderModel":
        m = self.clone()
        m.cfg = ModelConfig(**{**m.cfg.to_dict(), "dtype": np.dtype(dtype).name})
        for name, t in m.named_params().items():
            m.set_param(name, Tensor(t.data.astype(dtype)))
        return m


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


def build_teacher(cfg: ModelConfig, seed: int, std: float | None = None) -> DecoderModel:
    """All-attention model; weights ~ N(0, std), norm scales 1, biases 0.

    ``std`` defaults to ``cfg.init_std``.
    """
    std = cfg.init_std if std is None else std
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d = cfg.d
    tok = _normal(rng, (cfg.vocab, d), std, dt)
    patch = _normal(rng, (cfg.patch_dim, d), std, dt)
    pos = _normal(rng, (cfg.max_pos, d), std, dt)
    blocks = []
    for _ in range(cfg.L):
        attn = init_attention(d, cfg.H, cfg.G, cfg.d_h, rng, std=std, dtype=dt, scale_scores=cfg.scale_scores)
        blocks.append(
            Block(
                norm1=Tensor(np.ones(d, dtype=dt)),
                mixer=attn,
                norm2=Tensor(np.ones(d, dtype=dt)),
                W1=_normal(rng, (d, cfg.d_mlp), std, dt),
                b1=Tensor(np.zeros(cfg.d_mlp, dtype=dt)),
                W2=_normal(rng, (cfg.d_mlp, d), std, dt),
                b2=Tensor(np.zeros(d, dtype=dt)),
            )
        )
    head = _normal(rng, (d, cfg.vocab), std, dt)
    return DecoderModel(cfg, tok, patch, pos, blocks, Tensor(np.ones(d, dtype=dt)), head, provenance=[f"teacher-init:{seed}"])


def ssm_extra_param_count(cfg: ModelConfig) -> int:
    """Parameters a converted layer adds on top of the inherited projections."""
    H, G, dh, d, w = cfg.H, cfg.G, cfg.d_h, cfg.d, cfg.conv_width
    C = (H + 2 * G) * dh
    return G + d * G + w * C + C + d * H * dh + H * dh


def convert(
    teacher: DecoderModel,
    plan: HybridPlan,
    seed_cfg: SeedConfig | None = None,
    init: str = "mimic",
    rng: np.random.Generator | None = None,
) -> DecoderModel:
    """Student model with the ``plan``'s Mamba-2 layers carved from the teacher.

    Everything else is copied and frozen. Only the SSM-only parameters of the
    converted layers start out trainable.
    """
    if len(plan) != len(teacher.blocks):
        raise ContractError(f"plan has {len(plan)} layers, model has {len(teacher.blocks)}")
    if any(b.kind is not LayerKind.ATTENTION for b in teacher.blocks):
        raise ContractError("convert expects an all-attention teacher")
    seed_cfg = seed_cfg or SeedConfig(conv_width=teacher.cfg.conv_width)
    if seed_cfg.conv_width != teacher.cfg.conv_width:
        raise ConfigError("seed conv width must match model.conv_width", "seed.conv_width")
    rng = rng if rng is not None else np.random.default_rng(0)
    student = teacher.clone()
    for i in plan.mamba_layers:
        student.blocks[i].mixer = init_mamba2(teacher.blocks[i].mixer, init, rng, seed_cfg)
    names = student.named_params()
    trainable = {f"blocks.{i}.mixer.{p}" for i in plan.mamba_layers for p in SSM_EXTRA}
    student.frozen = set(names) - trainable
    student.provenance = list(teacher.provenance) + [f"convert:{plan}:{plan.strategy}:{init}"]
    return student


# --- forward -----------------------------------------------------------------


def _as_batch(tokens, patches):
    if hasattr(tokens, "tokens") and hasattr(tokens, "patches"):
        tokens, patches = tokens.tokens, tokens.patches
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
        if patches is not None:
            patches = np.asarray(patches)[None]
    return ids, patches, squeeze


def _positions(model: DecoderModel, start: int, T: int, allow_overflow: bool) -> np.ndarray:
    stop = start + T
    mp = model.cfg.max_pos
    if stop <= mp:
        return model.pos_emb.data[start:stop]
    if not allow_overflow:
        raise ContractError(f"sequence length {stop} exceeds max_pos={mp}")
    if not model.plan.mamba_layers:
        raise ContractError(f"sequence length {stop} exceeds max_pos={mp}; an all-attention model cannot overflow")
    # past the table only the conv and recurrence carry position
    out = np.zeros((T, model.cfg.d), dtype=model.pos_emb.dtype)
    n = max(0, mp - start)
    out[:n] = model.pos_emb.data[start:mp]
    return out


def embed(model: DecoderModel, ids: np.ndarray, patches: np.ndarray | None) -> Tensor:
    B, T = ids.shape
    if T > model.cfg.max_pos:
        raise ContractError(f"sequence length {T} exceeds max_pos={model.cfg.max_pos}")
    h = tc.embedding(model.tok_emb, ids)
    if patches is not None:
        p = np.asarray(patches, dtype=model.cfg.np_dtype)
        if p.shape != (B, T, model.cfg.patch_dim):
            raise ContractError(f"patch rows must be {(B, T, model.cfg.patch_dim)}, got {p.shape}")
        h = tc.add(h, tc.matmul(Tensor(p), model.patch_emb))
    return tc.add(h, tc.embedding(model.pos_emb, np.arange(T)))


def mixer_forward(mixer, X: Tensor, chunk: int = 64) -> Tensor:
    if isinstance(mixer, AttentionWeights):
        return attention_forward(X, mixer)
    return mamba2_forward(X, mixer, chunk=chunk)


def mlp_forward(block: Block, X: Tensor) -> Tensor:
    hidden = tc.gelu(tc.add(tc.matmul(X, block.W1), block.b1))
    return tc.add(tc.matmul(hidden, block.W2), block.b2)


def forward(model: DecoderModel, tokens, patches=None, capture: list | None = None) -> Tensor:
    """Logits (B, T, vocab), or (T, vocab) for a 1-D token sequence.

    ``tokens`` may also be a :class:`~quad2lin.data.Batch`. When ``capture``
    is a list it receives one ``(mixer_input, mixer_output)`` pair of numpy
    arrays per layer.
    """
    ids, patches, squeeze = _as_batch(tokens, patches)
    h = embed(model, ids, patches)
    for block in model.blocks:
        x = tc.rms_norm(h, block.norm1)
        y = mixer_forward(block.mixer, x, model.cfg.chunk)
        if capture is not None:
            capture.append((x.data, y.data))
        h = tc.add(h, y)
        h = tc.add(h, mlp_forward(block, tc.rms_norm(h, block.norm2)))
    logits = tc.matmul(tc.rms_norm(h, model.final_norm), model.lm_head)
    return tc.reshape(logits, logits.shape[1:]) if squeeze else logits


def capture_layer_io(teacher: DecoderModel, tokens, patches=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (post-norm mixer input, mixer output before the residual add)."""
    if any(b.kind is not LayerKind.ATTENTION for b in teacher.blocks):
        raise ContractError("capture_layer_io expects an all-attention teacher")
    pairs: list = []
    forward(teacher, tokens, patches, capture=pairs)
    return pairs


# --- incremental inference ---------------------------------------------------


def _rms_np(x: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * scale


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * (x * x * x))))


def _mlp_np(block: Block, x: np.ndarray) -> np.ndarray:
    return _gelu_np(x @ block.W1.data + block.b1.data) @ block.W2.data + block.b2.data


@dataclass
class InferenceState:
    """Per-layer decode memory: a KVCache or an SSMState per block."""

    caches: list[KVCache | SSMState]
    t: int = 0
    allow_overflow: bool = False

    @property
    def kv_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches if isinstance(c, KVCache))

    @property
    def state_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches if isinstance(c, SSMState))


def _embed_np(model: DecoderModel, ids: np.ndarray, patches, start: int, allow_overflow: bool) -> np.ndarray:
    h = model.tok_emb.data[ids]
    if patches is not None:
        h = h + np.asarray(patches, dtype=h.dtype) @ model.patch_emb.data
    return h + _positions(model, start, len(ids), allow_overflow)


def prefill(model: DecoderModel, tokens, patches=None, allow_overflow: bool = False, block: int = 256):
    """No-grad pass over a 1-D prefix; returns (logits of the last position, state)."""
    ids = np.asarray(tokens, dtype=np.int64)
    h = _embed_np(model, ids, patches, 0, allow_overflow)
    caches: list = []
    for b in model.blocks:
        x = _rms_np(h, b.norm1.data)
        if isinstance(b.mixer, AttentionWeights):
            cache = KVCache(b.mixer.n_groups, b.mixer.head_dim, dtype=h.dtype, capacity=max(64, len(ids) + 64))
            y = attention_prefill(x, b.mixer, cache, block=block)
        else:
            y, cache = mamba2_prefill(x, b.mixer, chunk=model.cfg.chunk)
        caches.append(cache)
        h = h + y
        h = h + _mlp_np(b, _rms_np(h, b.norm2.data))
    logits = _rms_np(h[-1], model.final_norm.data) @ model.lm_head.data
    return logits, InferenceState(caches, len(ids), allow_overflow)


def decode_step(model: DecoderModel, token: int, state: InferenceState, patch_row=None) -> np.ndarray:
    """Logits for the next position after feeding ``token``."""
    patches = None if patch_row is None else np.asarray(patch_row)[None]
    h = _embed_np(model, np.array([token]), patches, state.t, state.allow_overflow)[0]
    for b, cache in zip(model.blocks, state.caches):
        x = _rms_np(h, b.norm1.data)
        if isinstance(b.mixer, AttentionWeights):
            y = attention_decode_step(x, b.mixer, cache).data
        else:
            y = mamba2_decode_step(x, b.mixer, cache).data
        h = h + y
        h = h + _mlp_np(b, _rms_np(h, b.norm2.data))
    state.t += 1
    return _rms_np(h, model.final_norm.data) @ model.lm_head.data


def generate(model: DecoderModel, prompt, max_new: int, patches=None, eos: int | None = None) -> list[int]:
    """Greedy continuation of ``prompt`` (patch rows, if any, cover the prompt only)."""
    logits, state = prefill(model, prompt, patches)
    out: list[int] = []
    for _ in range(max_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if nxt == eos or state.t >= model.cfg.max_pos:
            break
        logits = decode_step(model, nxt, state)
    return out
