"""Synthetic multimodal tasks: grid-image captioning and key/value recall.

Every generator is a pure function of ``(seed, cfg)``. Images enter the token
stream as ``PATCH`` placeholders between ``IMG_START`` and ``IMG_END``; the
model swaps in the patch embeddings at those positions.

``loss_mask[t]`` marks token ``t`` as a target, so it is predicted from the
logits at position ``t - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError

CONTROL = ("PAD", "BOS", "EOS", "IMG_START", "IMG_END", "SEP", "PATCH", "EMPTY")

# name -> RGB cell value
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
CHANNELS = 3


class Vocab:
    """Fixed token list. Ids depend only on the constructor arguments."""

    def __init__(self, image_side: int = 4, n_keys: int = 8, n_values: int = 8):
        self.image_side = image_side
        self.n_keys = n_keys
        self.n_values = n_values
        tokens = list(CONTROL)
        tokens += [f"color:{c}" for c in COLORS]
        tokens += [f"row:{i}" for i in range(image_side)]
        tokens += [f"col:{i}" for i in range(image_side)]
        tokens += [f"key:{i}" for i in range(n_keys)]
        tokens += [f"val:{i}" for i in range(n_values)]
        tokens += [f"digit:{i}" for i in range(10)]
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self._ids[token]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad(self) -> int:
        return self._ids["PAD"]

    @property
    def value_ids(self) -> list[int]:
        return [self._ids[f"val:{i}"] for i in range(self.n_values)]


@dataclass(frozen=True)
class TaskConfig:
    image_side: int = 4
    patch: int = 2
    max_cells: int = 4
    n_pairs: int = 4
    min_pairs: int = 1
    n_keys: int = 8
    n_values: int = 8
    max_pos: int = 32
    max_retries: int = 16

    def __post_init__(self):
        if self.image_side % self.patch:
            raise ConfigError(f"patch={self.patch} does not divide image_side={self.image_side}", "data.patch")
        if not 0 <= self.max_cells <= 4:
            raise ConfigError("at most 4 coloured cells are supported", "data.max_cells")
        if self.n_pairs > self.n_keys:
            raise ConfigError("n_pairs exceeds the number of distinct keys", "data.n_pairs")
        if not 1 <= self.min_pairs <= self.n_pairs:
            raise ConfigError("need 1 <= min_pairs <= n_pairs", "data.min_pairs")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * CHANNELS

    def vocab(self) -> Vocab:
        return Vocab(self.image_side, self.n_keys, self.n_values)


@dataclass
class Sample:
    tokens: np.ndarray  # int64 ids
    loss_mask: np.ndarray  # bool, same length
    image: np.ndarray | None = None  # (side, side, CHANNELS)
    task: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def patches(self, patch: int) -> np.ndarray | None:
        return None if self.image is None else patchify(self.image, patch)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Raster-order non-overlapping patches, each flattened row-major."""
    side, side2, ch = image.shape
    if side != side2 or side % patch:
        raise ConfigError(f"patch={patch} does not divide image side {side}", "data.patch")
    n = side // patch
    blocks = image.reshape(n, patch, n, patch, ch).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(n * n, patch * patch * ch)


def unpatchify(patches: np.ndarray, patch: int, channels: int = CHANNELS) -> np.ndarray:
    n = int(round(np.sqrt(patches.shape[0])))
    blocks = patches.reshape(n, n, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(n * patch, n * patch, channels)


def _check_length(sample: Sample, cfg: TaskConfig) -> bool:
    return len(sample) <= cfg.max_pos


def _with_retries(build, seed: int, cfg: TaskConfig) -> Sample:
    for attempt in range(cfg.max_retries):
        sample = build(np.random.default_rng([seed, attempt]))
        if _check_length(sample, cfg):
            return sample
    raise ContractError(f"could not draw a sample within max_pos={cfg.max_pos}")


def gen_caption_task(seed: int, cfg: TaskConfig = TaskConfig(), n_cells: int | None = None) -> Sample:
    """Random coloured cells on a black grid; the caption lists
    ``color row col`` for each cell in raster order, or ``EMPTY``."""
    vocab = cfg.vocab()
    names = list(COLORS)

    def build(rng: np.random.Generator) -> Sample:
        side = cfg.image_side
        k = int(rng.integers(0, cfg.max_cells + 1)) if n_cells is None else n_cells
        cells = np.sort(rng.choice(side * side, size=k, replace=False))
        image = np.zeros((side, side, CHANNELS))
        caption = []
        for cell in cells:
            r, c = divmod(int(cell), side)
            name = names[int(rng.integers(len(names)))]
            image[r, c] = COLORS[name]
            caption += [vocab[f"color:{name}"], vocab[f"row:{r}"], vocab[f"col:{c}"]]
        if not caption:
            caption = [vocab["EMPTY"]]
        prompt = [vocab["BOS"], vocab["IMG_START"]] + [vocab["PATCH"]] * cfg.n_patches
        prompt += [vocab["IMG_END"], vocab["SEP"]]
        tokens = prompt + caption + [vocab["EOS"]]
        mask = [False] * len(prompt) + [True] * len(caption) + [False]
        return Sample(np.array(tokens, dtype=np.int64), np.array(mask), image, "caption")

    return _with_retries(build, seed, cfg)


def gen_recall_task(seed: int, cfg: TaskConfig = TaskConfig(), n_pairs: int | None = None) -> Sample:
    """``BOS k v ... SEP q ans EOS`` with distinct keys; the query is one of them."""
    vocab = cfg.vocab()

    def build(rng: np.random.Generator) -> Sample:
        n = int(rng.integers(cfg.min_pairs, cfg.n_pairs + 1)) if n_pairs is None else n_pairs
        keys = rng.choice(cfg.n_keys, size=n, replace=False)
        vals = rng.integers(0, cfg.n_values, size=n)
        j = int(rng.integers(n))
        tokens = [vocab["BOS"]]
        for k, v in zip(keys, vals):
            tokens += [vocab[f"key:{k}"], vocab[f"val:{v}"]]
        tokens += [vocab["SEP"], vocab[f"key:{keys[j]}"], vocab[f"val:{vals[j]}"], vocab["EOS"]]
        mask = np.zeros(len(tokens), dtype=bool)
        mask[-2] = True
        return Sample(np.array(tokens, dtype=np.int64), mask, None, "recall")

    return _with_retries(build, seed, cfg)


GENERATORS = {"caption": gen_caption_task, "recall": gen_recall_task}


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) int64, right-padded
    loss_mask: np.ndarray  # (B, T) bool
    patches: np.ndarray  # (B, T, patch_dim); zero rows off PATCH positions
    pad_mask: np.ndarray  # (B, T) bool, True on real tokens
    tasks: list[str] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def collate(samples: Sequence[Sample], cfg: TaskConfig = TaskConfig()) -> Batch:
    vocab = cfg.vocab()
    B = len(samples)
    T = max(len(s) for s in samples)
    tokens = np.full((B, T), vocab.pad, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    real = np.zeros((B, T), dtype=bool)
    patches = np.zeros((B, T, cfg.patch_dim))
    for b, s in enumerate(samples):
        n = len(s)
        tokens[b, :n] = s.tokens
        mask[b, :n] = s.loss_mask
        real[b, :n] = True
        if s.image is not None:
            pos = np.flatnonzero(s.tokens == vocab["PATCH"])
            patches[b, pos] = patchify(s.image, cfg.patch)
    return Batch(tokens, mask, patches, real, [s.task for s in samples])


def _mix_weights(mix) -> tuple[list[str], np.ndarray]:
    if isinstance(mix, str):
        mix = {mix: 1.0}
    names = list(mix)
    for n in names:
        if n not in GENERATORS:
            raise ConfigError(f"unknown task {n!r}", "data.mix")
    w = np.array([float(mix[n]) for n in names])
    return names, w / w.sum()


def sample_stream(mix, seed: int, cfg: TaskConfig = TaskConfig()) -> Iterator[Sample]:
    """Endless deterministic sample stream for a task mix like ``{"recall": 1}``."""
    names, probs = _mix_weights(mix)
    rng = np.random.default_rng(seed)
    while True:
        name = names[int(rng.choice(len(names), p=probs))]
        yield GENERATORS[name](int(rng.integers(2**63 - 1)), cfg)


def batches(mix, seed: int, batch: int, steps: int, cfg: TaskConfig = TaskConfig()) -> Iterator[Batch]:
    """Exactly ``steps`` padded batches of ``batch`` samples each."""
    stream = sample_stream(mix, seed, cfg)
    for _ in range(steps):
        yield collate([next(stream) for _ in range(batch)], cfg)


def fixed_set(mix, seed: int, n: int, cfg: TaskConfig = TaskConfig()) -> list[Sample]:
    stream = sample_stream(mix, seed, cfg)
    return [next(stream) for _ in range(n)]


def dump_jsonl(samples: Sequence[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            rec = {
                "task": s.task,
                "tokens": s.tokens.tolist(),
                "loss_mask": s.loss_mask.astype(int).tolist(),
                "image": None if s.image is None else s.image.reshape(-1).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
