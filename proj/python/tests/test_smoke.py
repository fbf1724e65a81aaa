import math

import numpy as np
import pytest

import hmoe


def test_top_k_hand_example():
    d = hmoe.select_top_k(np.array([[0.1, 0.5, 0.15, 0.25]]), 2)
    assert d["activated"] == [[1, 3]]
    np.testing.assert_allclose(d["gates"], [[0.0, 0.5 / 0.75, 0.0, 0.25 / 0.75]], atol=1e-15)


def test_top_p_stops_at_threshold():
    d = hmoe.select_top_p(np.array([[0.5, 0.3, 0.2]]), 0.6)
    assert d["activated"] == [[0, 1]]
    assert d["gates"].sum() == pytest.approx(1.0)


def test_bad_threshold_raises_config_error():
    with pytest.raises(hmoe.ConfigError):
        hmoe.select_top_p(np.array([[0.5, 0.5]]), 1.5)


def test_allocate_sizes():
    assert hmoe.allocate_sizes("homogeneous", 3, 100) == [33, 33, 34]
    sizes = hmoe.allocate_sizes("geometric", 8, 2550)
    assert sum(sizes) == 2550
    assert sizes == sorted(sizes)


def test_aux_losses_homogeneous_equal():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(16, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    act = hmoe.select_top_k(probs, 2)["activated"]
    out = hmoe.aux_losses(probs, act, [10, 10, 10, 10])
    assert out["p_penalty"] == pytest.approx(out["load_balance"], abs=1e-12)
    assert out["entropy"] >= 0.0


def test_distances():
    assert hmoe.wasserstein_1d([5, 0, 0, 0], [0, 0, 0, 2]) == pytest.approx(3.0)
    assert hmoe.smoothed_kl([1, 2, 3], [1, 2, 3]) == 0.0
    sim = hmoe.expert_similarity_matrix([[1, 0, 2], [0, 3, 1], [0, 0, 0]])
    assert sim.shape == (3, 3)
    assert sim[0, 1] == pytest.approx(sim[1, 0])
    assert math.isnan(sim[0, 2])


def test_tokenize_round_trip():
    ids = hmoe.tokenize(b"hi\xff")
    assert ids == [104, 105, 255]
    assert hmoe.detokenize(ids) == b"hi\xff"


def test_train_analyze_round_trip(tmp_path):
    (tmp_path / "corpus.txt").write_bytes(hmoe.synthesize_corpus(3, 20000))
    (tmp_path / "exp.toml").write_text(
        "[model]\nn_layers = 1\nh_input = 16\nn_heads = 2\nhead_dim = 8\ncontext_length = 16\n"
        "experts = 4\nbudget = 64\n[train]\nbatch_size = 2\nsteps = 3\n"
        '[experiment]\ncorpus = "corpus.txt"\noutput_dir = "out"\nanalysis_windows = 2\n'
    )
    rc, out, err = hmoe.train(str(tmp_path / "exp.toml"))
    assert rc == 0, err
    summary = hmoe.summarize_telemetry(str(tmp_path / "out"))
    assert summary["steps"] == 3
    assert summary["rows"] == 3 * 1 * 4
    model = hmoe.Model.load(str(tmp_path / "out" / "checkpoint.hmoe"))
    assert model.step == 3
    assert sum(model.expert_sizes) == 64
    logits = model.logits(list(range(8)), 1, 8)
    assert logits.shape == (8, 256)
    ppl = model.perplexity(hmoe.tokenize(b"the quick brown fox jumps over the lazy dog"))
    assert 1.0 < ppl < 1000.0


def test_missing_checkpoint_raises():
    with pytest.raises(hmoe.IoError):
        hmoe.Model.load("/no/such/checkpoint.hmoe")
