import json

import numpy as np
import pytest

from quad2lin.checkpoint import FORMAT_VERSION, content_hash, load, models_equal, read_manifest, save
from quad2lin.data import TaskConfig
from quad2lin.errors import CorruptionError, UnsupportedVersionError
from quad2lin.model import ModelConfig, build_teacher, convert, hybrid_plan

V = len(TaskConfig().vocab())
CFG = ModelConfig(L=4, d=16, H=4, G=2, d_h=4, d_mlp=32, vocab=V)


@pytest.fixture
def hybrid():
    t = build_teacher(CFG, 3)
    return convert(t, hybrid_plan(4, 2, "tail-interleaved"), init="inherit", rng=np.random.default_rng(1))


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_round_trip_is_bit_identical(tmp_path, hybrid, dtype):
    m = hybrid.astype(dtype)
    m.blocks[0].mixer.head_norm = True
    save(m, tmp_path / "ck")
    back = load(tmp_path / "ck")
    assert models_equal(m, back)
    assert back.provenance == m.provenance
    assert back.blocks[0].mixer.head_norm and back.blocks[0].mixer.score_scale == m.blocks[0].mixer.score_scale
    assert content_hash(back) == content_hash(m)


def test_manifest_records_plan(tmp_path, hybrid):
    save(hybrid, tmp_path / "ck")
    man = read_manifest(tmp_path / "ck")
    assert man["version"] == FORMAT_VERSION
    assert man["kinds"] == [k.value for k in hybrid.plan.kinds]
    assert set(man["frozen"]) == hybrid.frozen


def test_overwrite(tmp_path, hybrid):
    save(build_teacher(CFG, 0), tmp_path / "ck")
    save(hybrid, tmp_path / "ck")
    assert models_equal(load(tmp_path / "ck"), hybrid)


def test_truncated_blob(tmp_path, hybrid):
    path = save(hybrid, tmp_path / "ck")
    blob = path / "lm_head.bin"
    blob.write_bytes(blob.read_bytes()[:-3])
    with pytest.raises(CorruptionError):
        load(path)


def test_flipped_byte(tmp_path, hybrid):
    path = save(hybrid, tmp_path / "ck")
    blob = path / "blocks__0__mixer__a.bin"
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0x01
    blob.write_bytes(bytes(data))
    with pytest.raises(CorruptionError, match="hash mismatch"):
        load(path)


def test_missing_blob(tmp_path, hybrid):
    path = save(hybrid, tmp_path / "ck")
    (path / "tok_emb.bin").unlink()
    with pytest.raises(CorruptionError):
        load(path)


def test_version_skew(tmp_path, hybrid):
    path = save(hybrid, tmp_path / "ck")
    man = json.loads((path / "manifest.json").read_text())
    man["version"] = FORMAT_VERSION + 1
    (path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(UnsupportedVersionError):
        load(path)


def test_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(CorruptionError):
        load(tmp_path / "empty")


def test_same_seed_same_bytes(tmp_path):
    a = save(build_teacher(CFG, 9), tmp_path / "a")
    b = save(build_teacher(CFG, 9), tmp_path / "b")
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()
