"""Checkpoint directories: ``manifest.json`` plus one raw blob per tensor.

Blobs use the tensor serialization (u64 rank, u64 dims, little-endian
scalars). The manifest records the config, per-layer kinds, mixer flags,
frozen parameter names, provenance and a SHA-256 per blob.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptionError, UnsupportedVersionError
from .mixers import AttentionWeights, Mamba2Weights
from .model import Block, DecoderModel, LayerKind, ModelConfig
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _blob_name(param: str) -> str:
    return param.replace(".", "__") + ".bin"


def _mixer_meta(mixer) -> dict:
    meta = {"n_heads": mixer.n_heads, "n_groups": mixer.n_groups, "head_dim": mixer.head_dim}
    if isinstance(mixer, AttentionWeights):
        meta["scale_scores"] = mixer.scale_scores
    else:
        meta.update(
            conv_activation=mixer.conv_activation, head_norm=mixer.head_norm, score_scale=mixer.score_scale
        )
    return meta


def manifest_for(model: DecoderModel, hashes: dict[str, str] | None = None) -> dict:
    return {
        "version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "kinds": [b.kind.value for b in model.blocks],
        "mixers": [_mixer_meta(b.mixer) for b in model.blocks],
        "frozen": sorted(model.frozen),
        "provenance": list(model.provenance),
        "params": [
            {"name": n, "blob": _blob_name(n), "shape": list(t.shape), "dtype": t.dtype.name,
             "sha256": (hashes or {}).get(n)}
            for n, t in model.named_params().items()
        ],
    }


def content_hash(model: DecoderModel) -> str:
    """SHA-256 over the manifest (without blob hashes) and every blob."""
    h = hashlib.sha256()
    man = manifest_for(model)
    h.update(json.dumps(man, sort_keys=True).encode())
    for t in model.named_params().values():
        h.update(tensor_to_bytes(t))
    return h.hexdigest()


def save(model: DecoderModel, path) -> Path:
    """Write ``model`` to directory ``path`` atomically (temp dir + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".", dir=path.parent))
    hashes = {}
    try:
        for name, t in model.named_params().items():
            buf = tensor_to_bytes(t)
            hashes[name] = hashlib.sha256(buf).hexdigest()
            (tmp / _blob_name(name)).write_bytes(buf)
        man = manifest_for(model, hashes)
        (tmp / MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        man = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CorruptionError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as err:
        raise CorruptionError(f"{path}: unreadable manifest ({err})") from None
    version = man.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: manifest version {version!r}, this build reads {FORMAT_VERSION}")
    return man


def load(path) -> DecoderModel:
    """Read a checkpoint; any integrity failure raises before a model exists."""
    path = Path(path)
    man = read_manifest(path)
    arrays: dict[str, np.ndarray] = {}
    for entry in man["params"]:
        blob = path / entry["blob"]
        try:
            buf = blob.read_bytes()
        except FileNotFoundError:
            raise CorruptionError(f"{blob}: missing") from None
        if hashlib.sha256(buf).hexdigest() != entry["sha256"]:
            raise CorruptionError(f"{blob}: hash mismatch")
        arr = tensor_from_bytes(buf, entry["dtype"])
        if list(arr.shape) != entry["shape"]:
            raise CorruptionError(f"{blob}: shape {arr.shape} != manifest {entry['shape']}")
        arrays[entry["name"]] = arr
    cfg = ModelConfig(**man["config"])
    T = lambda n: Tensor(arrays[n])  # noqa: E731
    blocks = []
    for i, (kind, meta) in enumerate(zip(man["kinds"], man["mixers"])):
        p = f"blocks.{i}."
        names = Mamba2Weights.PARAM_NAMES if kind == LayerKind.MAMBA2.value else ("W_Q", "W_K", "W_V", "W_O")
        kw = {n: T(p + "mixer." + n) for n in names}
        mixer = Mamba2Weights(**kw, **meta) if kind == LayerKind.MAMBA2.value else AttentionWeights(**kw, **meta)
        blocks.append(
            Block(T(p + "norm1"), mixer, T(p + "norm2"), T(p + "mlp.W1"), T(p + "mlp.b1"), T(p + "mlp.W2"), T(p + "mlp.b2"))
        )
    return DecoderModel(
        cfg, T("tok_emb"), T("patch_emb"), T("pos_emb"), blocks, T("final_norm"), T("lm_head"),
        frozen=set(man["frozen"]), provenance=list(man["provenance"]),
    )


def models_equal(a: DecoderModel, b: DecoderModel) -> bool:
    """Bit-identical parameters, kinds, frozen flags and config."""
    pa, pb = a.named_params(), b.named_params()
    if list(pa) != list(pb) or a.cfg != b.cfg or a.frozen != b.frozen:
        return False
    if [blk.kind for blk in a.blocks] != [blk.kind for blk in b.blocks]:
        return False
    return all(pa[n].dtype == pb[n].dtype and np.array_equal(pa[n].data, pb[n].data) for n in pa)
