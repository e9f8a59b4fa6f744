import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quad2lin import tensor as tc
from quad2lin.data import TaskConfig, Vocab, batches, collate, fixed_set, gen_caption_task, gen_recall_task
from quad2lin.distill import StageConfig, next_token_targets, train_teacher
from quad2lin.errors import ConfigError, ContractError
from quad2lin.mixers import attention_forward
from quad2lin.model import (
    STRATEGIES,
    HybridPlan,
    LayerKind,
    ModelConfig,
    build_teacher,
    capture_layer_io,
    convert,
    decode_step,
    forward,
    generate,
    hybrid_plan,
    mixer_forward,
    prefill,
    ssm_extra_param_count,
)
from quad2lin.seeding import SSM_EXTRA, verify_seed
from quad2lin.tensor import Tensor

TASK = TaskConfig()
VOCAB_SIZE = len(TASK.vocab())
SMALL = ModelConfig(L=4, d=16, H=4, G=2, d_h=4, d_mlp=32, vocab=VOCAB_SIZE, chunk=8)


def kinds(s: str) -> tuple:
    return tuple(LayerKind.ATTENTION if c == "A" else LayerKind.MAMBA2 for c in s)


class TestHybridPlan:
    def test_interval_four(self):
        plan = hybrid_plan(32, 8, "head-interleaved")
        assert plan.attention_layers == list(range(0, 32, 4))
        assert len(plan.mamba_layers) == 24

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_all_attention(self, strategy):
        assert str(hybrid_plan(8, 8, strategy)) == "A" * 8

    @pytest.mark.parametrize(
        "strategy, expected",
        [
            ("tail-stacked", "MMMMMMAA"),
            ("head-stacked", "AAMMMMMM"),
            ("head-interleaved", "AMMMAMMM"),
            ("tail-interleaved", "MMMAMMMA"),
        ],
    )
    def test_patterns(self, strategy, expected):
        plan = hybrid_plan(8, 2, strategy)
        assert plan.kinds == kinds(expected)
        assert plan.strategy == strategy

    def test_zero_attention(self):
        assert str(hybrid_plan(4, 0, "head-interleaved")) == "MMMM"

    def test_divisibility(self):
        with pytest.raises(ConfigError) as err:
            hybrid_plan(8, 3, "head-interleaved")
        assert err.value.path == "plan.n_attention"
        assert str(hybrid_plan(8, 3, "tail-stacked")) == "MMMMMAAA"

    @pytest.mark.parametrize("bad", [(4, 5, "head-stacked"), (4, 1, "middle")])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            hybrid_plan(*bad)

    @given(st.integers(1, 40), st.data())
    @settings(max_examples=60, deadline=None)
    def test_exact_attention_count(self, L, data):
        strategy = data.draw(st.sampled_from(STRATEGIES))
        if "interleaved" in strategy:
            n = data.draw(st.sampled_from([n for n in range(L + 1) if n == 0 or L % n == 0]))
        else:
            n = data.draw(st.integers(0, L))
        plan = hybrid_plan(L, n, strategy)
        assert len(plan) == L
        assert len(plan.attention_layers) == n


class TestConfig:
    def test_head_geometry(self):
        with pytest.raises(ConfigError) as err:
            ModelConfig(d=60)
        assert err.value.path == "model.d"

    def test_from_dict_paths(self):
        with pytest.raises(ConfigError) as err:
            ModelConfig.from_dict({"L": "four"})
        assert err.value.path == "model.L"
        with pytest.raises(ConfigError) as err:
            ModelConfig.from_dict({"depth": 3})
        assert err.value.path == "model.depth"
        assert ModelConfig.from_dict({"L": 2}).L == 2

    def test_default_vocab_matches_tasks(self):
        assert ModelConfig().vocab == len(Vocab())


class TestTeacher:
    def test_construction(self):
        m = build_teacher(ModelConfig(L=4, d=64, H=4, G=2, d_h=16, vocab=VOCAB_SIZE), seed=0)
        assert len(m.blocks) == 4
        assert all(b.kind is LayerKind.ATTENTION for b in m.blocks)

    def test_determinism(self):
        a, b = build_teacher(SMALL, 5), build_teacher(SMALL, 5)
        pa, pb = a.named_params(), b.named_params()
        assert all(np.array_equal(pa[n].data, pb[n].data) for n in pa)
        c = build_teacher(SMALL, 6)
        assert not np.array_equal(c.tok_emb.data, a.tok_emb.data)

    def test_length_one(self):
        logits = forward(build_teacher(SMALL, 0), [1])
        assert logits.shape == (1, VOCAB_SIZE)

    def test_max_pos_contract(self):
        m = build_teacher(SMALL, 0)
        with pytest.raises(ContractError):
            forward(m, np.ones(SMALL.max_pos + 1, dtype=int))

    def test_patches_change_embedding(self):
        m = build_teacher(SMALL, 0)
        s = gen_caption_task(1, TASK, n_cells=2)
        b = collate([s], TASK)
        with_img = forward(m, b).data
        without = forward(m, b.tokens).data
        first_patch = int(np.flatnonzero(b.patches[0].any(axis=-1))[0])
        assert np.array_equal(with_img[0, :first_patch], without[0, :first_patch])
        assert not np.allclose(with_img[0, first_patch:], without[0, first_patch:])


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_forward_is_causal(strategy):
    teacher = build_teacher(SMALL, 1, std=0.2)
    model = convert(teacher, hybrid_plan(4, 2, strategy), init="inherit", rng=np.random.default_rng(0))
    ids = np.random.default_rng(2).integers(0, VOCAB_SIZE, size=12)
    base = forward(model, ids).data
    for t in (0, 5, 11):
        pert = ids.copy()
        pert[t] = (pert[t] + 1) % VOCAB_SIZE
        out = forward(model, pert).data
        assert np.array_equal(out[:t], base[:t])
        assert not np.allclose(out[t:], base[t:])


class TestCapture:
    def test_single_layer(self):
        cfg = ModelConfig(L=1, d=16, H=4, G=2, d_h=4, d_mlp=32, vocab=VOCAB_SIZE)
        m = build_teacher(cfg, 0, std=0.3)
        ids = np.array([[1, 9, 20, 30]])
        pairs = capture_layer_io(m, ids)
        assert len(pairs) == 1
        h = m.tok_emb.data[ids] + m.pos_emb.data[:4]
        expected = tc.rms_norm(Tensor(h), m.blocks[0].norm1).data
        assert np.array_equal(pairs[0][0], expected)

    def test_deterministic_and_self_consistent(self):
        m = build_teacher(SMALL, 3, std=0.2)
        batch = next(batches({"recall": 1, "caption": 1}, 0, 3, 1, TASK))
        a = capture_layer_io(m, batch)
        b = capture_layer_io(m, batch)
        assert len(a) == SMALL.L
        for (xa, ya), (xb, yb), block in zip(a, b, m.blocks):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
            assert np.array_equal(attention_forward(Tensor(xa), block.mixer).data, ya)

    def test_rejects_converted_model(self):
        m = convert(build_teacher(SMALL, 0), hybrid_plan(4, 2, "head-stacked"))
        with pytest.raises(ContractError):
            capture_layer_io(m, [1, 2])


class TestConvert:
    def test_all_attention_is_identity(self):
        t = build_teacher(SMALL, 0)
        s = convert(t, hybrid_plan(4, 4, "head-interleaved"))
        pt, ps = t.named_params(), s.named_params()
        assert list(pt) == list(ps)
        assert all(np.array_equal(pt[n].data, ps[n].data) for n in pt)
        assert s.frozen == set(ps)

    def test_all_mamba_passes_seed_check(self):
        t = build_teacher(SMALL, 0)
        s = convert(t, hybrid_plan(4, 0, "head-interleaved"))
        pairs = capture_layer_io(t, next(batches("recall", 0, 2, 1, TASK)))
        for (X, _), tb, sb in zip(pairs, t.blocks, s.blocks):
            rep = verify_seed(sb.mixer, tb.mixer, X, tol=3e-3)
            assert rep.passed, rep

    def test_copies_are_exact_and_frozen(self):
        t = build_teacher(SMALL, 0)
        plan = hybrid_plan(4, 2, "tail-interleaved")
        s = convert(t, plan)
        pt, ps = t.named_params(), s.named_params()
        for name, p in pt.items():
            assert np.array_equal(p.data, ps[name].data)
        trainable = set(ps) - s.frozen
        assert trainable == {f"blocks.{i}.mixer.{n}" for i in plan.mamba_layers for n in SSM_EXTRA}

    def test_parameter_count(self):
        t = build_teacher(SMALL, 0)
        for n in (0, 2, 4):
            s = convert(t, hybrid_plan(4, n, "head-interleaved"))
            assert s.num_params() - t.num_params() == (4 - n) * ssm_extra_param_count(SMALL)

    def test_closed_form_extra_count(self):
        cfg = ModelConfig(d=64, H=4, G=2, d_h=16, conv_width=4)
        C = (4 + 4) * 16
        assert ssm_extra_param_count(cfg) == 2 + 64 * 2 + 4 * C + C + 64 * 64 + 64

    def test_seeded_layer_gap_matches_seed_report(self):
        t = build_teacher(SMALL.__class__(**{**SMALL.to_dict(), "dtype": "float64"}), 0, std=0.1)
        s = convert(t, hybrid_plan(4, 0, "head-stacked"))
        pairs = capture_layer_io(t, next(batches("recall", 1, 2, 1, TASK)))
        for (X, Y), tb, sb in zip(pairs, t.blocks, s.blocks):
            gap = np.mean((mixer_forward(sb.mixer, Tensor(X), SMALL.chunk).data - Y) ** 2)
            assert gap == pytest.approx(verify_seed(sb.mixer, tb.mixer, X, 1.0).attention_mse, rel=1e-12)

    def test_plan_length_mismatch(self):
        with pytest.raises(ContractError):
            convert(build_teacher(SMALL, 0), hybrid_plan(8, 2, "head-stacked"))


@pytest.mark.parametrize("n_attention", [0, 2, 4])
def test_prefill_decode_matches_forward(n_attention):
    cfg = ModelConfig(**{**SMALL.to_dict(), "dtype": "float64"})
    teacher = build_teacher(cfg, 4, std=0.2)
    model = convert(teacher, hybrid_plan(4, n_attention, "head-interleaved"), init="inherit",
                    rng=np.random.default_rng(1))
    ids = np.random.default_rng(3).integers(1, VOCAB_SIZE, size=20)
    full = forward(model, ids).data
    logits, state = prefill(model, ids[:7])
    assert np.allclose(logits, full[6], atol=1e-10)
    for t in range(7, 20):
        logits = decode_step(model, int(ids[t]), state)
        assert np.allclose(logits, full[t], atol=1e-10)
    assert state.t == 20


def test_prefill_with_patches():
    cfg = ModelConfig(**{**SMALL.to_dict(), "dtype": "float64"})
    model = build_teacher(cfg, 0, std=0.2)
    b = collate([gen_caption_task(0, TASK, n_cells=3)], TASK)
    full = forward(model, b).data[0]
    logits, _ = prefill(model, b.tokens[0], b.patches[0])
    assert np.allclose(logits, full[-1], atol=1e-10)


def test_position_overflow_flag():
    model = convert(build_teacher(SMALL, 0), hybrid_plan(4, 0, "head-stacked"))
    ids = np.ones(SMALL.max_pos + 4, dtype=int)
    with pytest.raises(ContractError):
        prefill(model, ids)
    logits, state = prefill(model, ids, allow_overflow=True)
    assert np.all(np.isfinite(logits))
    assert np.all(np.isfinite(decode_step(model, 1, state)))
    with pytest.raises(ContractError, match="all-attention"):
        prefill(build_teacher(SMALL, 0), ids, allow_overflow=True)


def test_greedy_generate_reproduces_overfit_sequence():
    cfg = ModelConfig(L=2, d=32, H=4, G=2, d_h=8, d_mlp=64, vocab=VOCAB_SIZE)
    model = build_teacher(cfg, 0, std=0.1)
    sample = gen_recall_task(0, TASK, n_pairs=4)
    sample.loss_mask[1:] = True
    batch = collate([sample], TASK)
    stage = StageConfig.default(0, lr=1e-2, steps=300, batch=1, weight_decay=0.0)
    result = train_teacher(model, [batch] * stage.steps, stage)
    assert result.metrics[-1]["loss"] < 0.01
    vocab = TASK.vocab()
    out = generate(model, sample.tokens[:1], max_new=len(sample) - 1, eos=vocab["EOS"])
    assert out == sample.tokens[1:].tolist()


def test_untrained_recall_is_at_chance():
    model = build_teacher(ModelConfig(vocab=VOCAB_SIZE), 0)
    vocab = TASK.vocab()
    samples = fixed_set("recall", 7, 1000, TASK)
    batch = collate(samples, TASK)
    logits = forward(model, batch).data
    targets, mask = next_token_targets(batch.tokens, batch.loss_mask)
    vals = np.array(vocab.value_ids)
    pred = vals[np.argmax(logits[..., vals], axis=-1)]
    acc = float(np.mean(pred[mask] == targets[mask]))
    p = 1.0 / TASK.n_values
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / len(samples))


def test_plan_roundtrip():
    plan = HybridPlan.from_kinds(["attention", "mamba2"], "custom")
    assert str(plan) == "AM"
