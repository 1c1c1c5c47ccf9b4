import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latent_router import autodiff as ad
from latent_router.corpus import Corpus, gen_random
from latent_router.metrics import corpus_tra, random_guess_baseline, tra
from latent_router.model import ExpertModel, ModelConfig, PAD_ID


def test_worked_example():
    r = tra([1, 2, 3, 4, 5], [1, 2, 6, 7, 5])
    assert (r.correct, r.total) == (3, 5)
    assert r.tra == 0.6


def test_extremes():
    x = np.arange(10)
    assert tra(x, x).tra == 1.0
    assert tra(x, x + 1).tra == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        tra([1, 2, 3], [1, 2])


def test_pad_positions_are_ignored():
    x = [5, 6, PAD_ID, PAD_ID]
    assert tra(x, [5, 0, 1, 2], pad_id=PAD_ID).tra == 0.5
    assert tra(x, [5, 0, 1, 2], pad_id=PAD_ID).total == 2
    assert tra([PAD_ID] * 3, [0, 0, 0], pad_id=PAD_ID).total == 0


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_bounds_and_symmetry(pairs):
    x, y = zip(*pairs)
    a = tra(x, y).tra
    assert 0.0 <= a <= 1.0
    assert a == tra(y, x).tra
    assert a == sum(i == j for i, j in pairs) / len(pairs)


def test_baselines():
    assert 1.98e-5 <= random_guess_baseline(50257) <= 2.00e-5
    assert random_guess_baseline(257) == 1 / 257
    with pytest.raises(ValueError):
        random_guess_baseline(0)


@pytest.mark.parametrize("V", [2, 257, 50257])
def test_uniform_logits_cross_entropy_is_log_v(V):
    logits = ad.Tensor(np.zeros((3, V)))
    ce = ad.cross_entropy(logits, np.array([0, 1, V - 1]))
    assert abs(float(ce.data) - math.log(V)) < 1e-6


@pytest.fixture(scope="module")
def fresh():
    return ExpertModel.init(ModelConfig(), seed=0)


def test_corpus_tra_is_token_weighted(fresh):
    cfg = fresh.config
    blocks = gen_random(0, 5, cfg).blocks.copy()
    blocks[1, 10:] = PAD_ID
    blocks[3, 1:] = PAD_ID
    res = corpus_tra(fresh, Corpus("c", blocks, "full_ood"))
    w = np.array(res.block_tokens)
    assert w.tolist() == [64, 10, 64, 1, 64]
    assert abs(res.tra - float(np.dot(res.block_tra, w) / w.sum())) < 1e-12
    assert abs(res.loss - float(np.dot(res.block_loss, w) / w.sum())) < 1e-12


def test_corpus_tra_csv(tmp_path, fresh):
    res = corpus_tra(fresh, gen_random(0, 3, fresh.config))
    p = tmp_path / "e.csv"
    res.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "block_index,loss_nats_per_token,tra"
    assert len(lines) == 4 and lines[1].startswith("0,")


@pytest.mark.parametrize("seed", range(5))
def test_fresh_model_on_random_bytes_is_near_chance(seed):
    cfg = ModelConfig()
    m = ExpertModel.init(cfg, seed=seed)
    m.params["decoder.head.w"].data[:] = np.random.default_rng(seed).normal(0, 0.1, size=(64, 257))
    res = corpus_tra(m, gen_random(100 + seed, 50, cfg))
    assert res.tra <= 3 / cfg.vocab_size
