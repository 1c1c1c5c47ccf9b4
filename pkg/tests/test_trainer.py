import numpy as np
import pytest

from latent_router.corpus import GrammarSpec, gen_code_like, gen_random, gen_text_like
from latent_router.metrics import corpus_tra
from latent_router.model import ConfigMismatch, ExpertModel, ModelConfig
from latent_router.router import ExpertRegistry, RegistryError
from latent_router.trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    ablate_M,
    checkpoint_bytes,
    checkpoint_digest,
    fnv1a64,
    load_checkpoint,
    save_checkpoint,
    train,
    train_incremental,
    write_ablation,
)

TINY = ModelConfig(L=16, M=2, d_model=16, n_layers_enc=1, n_layers_dec=1, n_heads=2, d_ff=32)


def code(n=40, seed=1):
    return gen_code_like(GrammarSpec("code_like", seed=seed, size=n), TINY)


def fast(**kw):
    base = dict(steps=6, batch_size=4, lr=3e-3, eval_every=3, eval_blocks=8)
    base.update(kw)
    return TrainConfig(**base)


def test_fnv1a64_known_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_zero_lr_leaves_params_unchanged():
    m = ExpertModel.init(TINY, seed=0)
    before = {k: p.data.copy() for k, p in m.params.items()}
    train(m, code(), fast(lr=0.0))
    assert all(np.array_equal(before[k], p.data) for k, p in m.params.items())
    assert m.step == 6


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        m = ExpertModel.init(TINY, seed=3)
        train(m, code(), fast(seed=5))
        runs.append(checkpoint_bytes(m))
    assert runs[0] == runs[1]


def test_seed_changes_batches():
    a, b = ExpertModel.init(TINY, seed=3), ExpertModel.init(TINY, seed=3)
    train(a, code(), fast(seed=1))
    train(b, code(), fast(seed=2))
    assert checkpoint_digest(a) != checkpoint_digest(b)


def test_loss_goes_down_on_repeated_block():
    m = ExpertModel.init(TINY, seed=0)
    c = code(n=4)
    res = train(m, c, fast(steps=60, lr=1e-2, eval_every=20), val=c)
    assert np.mean(res.losses[-5:]) < 0.7 * res.losses[0]
    assert [t.step for t in res.trace] == [20, 40, 60]
    assert res.final_val_tra is not None and res.final_val_tra > 0.2


def test_divergence_reports_step():
    m = ExpertModel.init(TINY, seed=0)
    m.params["decoder.head.w"].data[0, 0] = np.inf
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(m, code(), fast())


def test_length_mismatch_rejected():
    m = ExpertModel.init(TINY, seed=0)
    with pytest.raises(ConfigMismatch):
        train(m, gen_random(0, 4, ModelConfig()), fast())


def test_trace_csv(tmp_path):
    res = train(ExpertModel.init(TINY, seed=0), code(), fast(), val=code(n=5, seed=9))
    res.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_tra"
    assert [l.split(",")[0] for l in lines[1:]] == ["3", "6"]


def test_checkpoint_round_trip(tmp_path):
    m = ExpertModel.init(TINY, seed=0)
    train(m, code(), fast())
    p = tmp_path / "m.ckpt"
    digest = save_checkpoint(m, p)
    back = load_checkpoint(p, expect=TINY)
    assert back.step == m.step and back.config == TINY
    assert all(np.array_equal(p_.data, back.params[k].data) for k, p_ in m.params.items())
    assert checkpoint_digest(back) == digest
    assert p.read_bytes()[:4] == b"LRCK"
    x = code(n=3, seed=8)
    assert corpus_tra(m, x).block_loss == corpus_tra(back, x).block_loss


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    c = code()
    full = ExpertModel.init(TINY, seed=0)
    train(full, c, fast(steps=4, seed=0))
    train(full, c, fast(steps=4, seed=1))
    half = ExpertModel.init(TINY, seed=0)
    train(half, c, fast(steps=4, seed=0))
    save_checkpoint(half, tmp_path / "h")
    resumed = load_checkpoint(tmp_path / "h")
    train(resumed, c, fast(steps=4, seed=1))
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


def test_checkpoint_errors(tmp_path):
    m = ExpertModel.init(TINY, seed=0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    raw = p.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-40])
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "trunc")
    (tmp_path / "junk").write_bytes(b"nope" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
    body = raw[:4] + (99).to_bytes(4, "little") + raw[8:-8]
    (tmp_path / "ver").write_bytes(body + fnv1a64(body).to_bytes(8, "little"))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver")
    with pytest.raises(ConfigMismatch):
        load_checkpoint(p, expect=ModelConfig())


def test_incremental_training_freezes_existing(tmp_path):
    a = ExpertModel.init(TINY, seed=0)
    train(a, code(), fast())
    save_checkpoint(a, tmp_path / "a.ckpt")
    reg = ExpertRegistry().register("code", a)
    before = checkpoint_digest(a)
    text = gen_text_like(GrammarSpec("text_like", seed=2, size=40), TINY)
    reg, res = train_incremental(reg, "text", text, fast())
    assert reg.ids() == ["code", "text"]
    assert checkpoint_digest(reg.experts["code"]) == before
    assert save_checkpoint(reg.experts["code"], tmp_path / "a2.ckpt") == before
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "a2.ckpt").read_bytes()
    assert reg.experts["text"].step == 6
    with pytest.raises(RegistryError):
        train_incremental(reg, "code", text, fast())


def test_ablation_validation_and_output(tmp_path):
    c = code()
    with pytest.raises(ValueError, match="duplicate"):
        ablate_M(TINY, [2, 2], c, fast(), c)
    with pytest.raises(ValueError):
        ablate_M(TINY, [16], c, fast(), c)
    rows = ablate_M(TINY, [2, 1], c, fast(steps=2), code(n=4, seed=3))
    assert [r.M for r in rows] == [1, 2]
    assert rows[0].compression_ratio == 16.0
    write_ablation(rows, tmp_path / "ab.csv")
    assert (tmp_path / "ab.csv").read_text().splitlines()[0] == "M,compression_ratio,val_tra"


def test_ablation_row_equals_standalone_run():
    c, v = code(), code(n=6, seed=3)
    rows = ablate_M(TINY, [1], c, fast(seed=4), v)
    m = ExpertModel.init(ModelConfig(**{**TINY.to_dict(), "M": 1}), seed=4)
    train(m, c, fast(seed=4))
    assert rows[0].val_tra == corpus_tra(m, v).tra


def test_lr_schedules():
    c = TrainConfig(steps=100, lr=1.0)
    assert c.lr_at(1) == c.lr_at(100) == 1.0
    w = TrainConfig(steps=100, lr=1.0, schedule="cosine", warmup_steps=10)
    assert w.lr_at(5) == 0.5 and w.lr_at(10) == 1.0
    assert w.lr_at(55) == pytest.approx(0.5)
    assert w.lr_at(100) == pytest.approx(0.0, abs=1e-12)
    lrs = [w.lr_at(s) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")
