import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepnarrow.pretrain import (EOS_ID, N_SENTINELS, CorruptedExample, TrainingDiverged,
                                 desk_config, evaluate_ppl, load_corpus, make_batch, markov_source,
                                 noise_mask, reconstruct, save_corpus, sentinel_id, span_corrupt,
                                 split_corpus, synth_corpus, train)
from deepnarrow.transformer import materialize

V = 512


def digest(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def test_corpus_deterministic():
    assert digest(synth_corpus(1, 50, 20, V)) == digest(synth_corpus(1, 50, 20, V))
    assert digest(synth_corpus(1, 50, 20, V)) != digest(synth_corpus(2, 50, 20, V))


def test_empty_corpus():
    assert synth_corpus(0, 0, 20, V).shape == (0, 20)


def test_corpus_avoids_special_and_sentinel_ids():
    c = synth_corpus(0, 200, 30, V)
    assert c.min() >= 2 and c.max() < V - N_SENTINELS


def test_vocab_precondition():
    with pytest.raises(ValueError, match="sentinels"):
        synth_corpus(0, 1, 4, 105)


def test_transition_statistics_match_generator():
    src = markov_source(0, V)
    cls = src.class_of(synth_corpus(0, 10_000, 64, V))
    k = src.n_classes
    counts = np.zeros((k, k, k))
    np.add.at(counts, (cls[:, :-2].ravel(), cls[:, 1:-1].ravel(), cls[:, 2:].ravel()), 1)
    empirical = counts / counts.sum(-1, keepdims=True)
    assert np.abs(empirical - src.transition).max() < 0.02


def test_emission_statistics_match_generator():
    src = markov_source(0, V)
    tokens = synth_corpus(0, 2_000, 64, V).ravel()
    cls = src.class_of(tokens)
    for c in range(src.n_classes):
        members = src.members[c][src.members[c] >= 0]
        freq = np.array([(tokens[cls == c] == m).mean() for m in members])
        expected = np.diff(np.concatenate(([0.0], src.emission_cdf[c, :len(members)])))
        assert np.abs(freq - expected).max() < 0.02


def test_split_is_disjoint():
    c = synth_corpus(0, 100, 10, V)
    train_rows, held = split_corpus(c)
    assert len(train_rows) == 90 and len(held) == 10
    assert np.array_equal(np.concatenate([train_rows, held]), c)


def test_corpus_file_round_trip(tmp_path):
    c = synth_corpus(3, 40, 12, V)
    save_corpus(c, tmp_path / "c.bin", V)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"SYNC"
    back, vocab = load_corpus(tmp_path / "c.bin")
    assert vocab == V and np.array_equal(back, c)


def test_rate_zero_identity():
    ex = span_corrupt([5, 6, 7, 8], 0.0, 3, seed=0)
    assert ex.encoder_tokens.tolist() == [5, 6, 7, 8]
    assert ex.target_tokens.tolist() == [EOS_ID]


def test_pinned_example():
    ex = span_corrupt([5, 6, 7, 8, 9, 10], 1 / 3, 2, seed=1, vocab_size=32128)
    s0 = sentinel_id(0, 32128)
    assert ex.encoder_tokens.tolist() == [5, 6, s0, 9, 10]
    assert ex.target_tokens.tolist() == [s0, 7, 8, EOS_ID]


def test_too_short_for_a_span():
    with pytest.raises(ValueError, match="shorter"):
        span_corrupt([5, 6], 0.5, 3, seed=0)


@pytest.mark.parametrize("rate,span", [(1.0, 3), (-0.1, 3), (0.15, 0.5)])
def test_bad_parameters(rate, span):
    with pytest.raises(ValueError):
        span_corrupt(list(range(2, 30)), rate, span, seed=0)


def test_mask_rate_and_span_length_on_average():
    rng = np.random.default_rng(0)
    masks = [noise_mask(200, 0.15, 3.0, rng) for _ in range(200)]
    assert np.mean([m.mean() for m in masks]) == pytest.approx(0.15, abs=0.005)
    starts = sum(int(m[0]) + int(np.sum(m[1:] & ~m[:-1])) for m in masks)
    assert sum(m.sum() for m in masks) / starts == pytest.approx(3.0, rel=0.05)


@given(st.lists(st.integers(2, V - N_SENTINELS - 1), min_size=3, max_size=80),
       st.integers(0, 2 ** 32 - 1), st.floats(0.01, 0.6), st.floats(1, 5))
@settings(max_examples=300)
def test_reconstruction_property(seq, seed, rate, span):
    if len(seq) < max(2, span):
        return
    ex = span_corrupt(seq, rate, span, seed=seed, vocab_size=V)
    assert reconstruct(ex, V).tolist() == seq
    enc_s = [t for t in ex.encoder_tokens.tolist() if t >= V - N_SENTINELS]
    tgt_s = [t for t in ex.target_tokens.tolist() if t >= V - N_SENTINELS]
    assert enc_s == tgt_s == [sentinel_id(k, V) for k in range(len(enc_s))]
    assert ex.target_tokens[-1] == EOS_ID


def test_span_corrupt_deterministic():
    a = span_corrupt(list(range(2, 40)), seed=9)
    b = span_corrupt(list(range(2, 40)), seed=9)
    assert np.array_equal(a.encoder_tokens, b.encoder_tokens)


def test_make_batch_pads():
    exs = [span_corrupt(list(range(2, 20)), seed=s, vocab_size=V) for s in range(3)]
    b = make_batch(exs)
    assert b.encoder_tokens.shape[0] == 3
    assert b.n_target_tokens == sum(len(e.target_tokens) for e in exs)


# training

@pytest.fixture(scope="module")
def small_setup():
    cfg = desk_config("NL1-TY").replace(d_model=64, d_ff=128, n_heads=2, d_kv=32)
    corpus = synth_corpus(0, 200, 24, V)
    return cfg, *split_corpus(corpus)


def test_zero_lr_keeps_loss(small_setup):
    cfg, tr, _ = small_setup
    m = train(materialize(cfg, precision="double"), tr, 3, learning_rate=0.0, clock=None)
    assert abs(m.final_loss - m.initial_loss) <= 1e-12


def test_training_is_bit_identical(small_setup, tmp_path):
    cfg, tr, held = small_setup
    runs = []
    for d in ("a", "b"):
        model = materialize(cfg, seed=0, precision="double")
        metrics = train(model, tr, 5, held_out=held, out_dir=tmp_path / d, checkpoint_every=2,
                        clock=None)
        runs.append((metrics, model.checksum()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    for f in ("metrics.csv", "final.bin", "ckpt_000002.bin", "ckpt_000004.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_metrics_csv_and_steps(small_setup):
    cfg, tr, _ = small_setup
    m = train(materialize(cfg), tr, 3, clock=None)
    assert m.steps == [1, 2, 3]
    assert all(math.isfinite(l) for l in m.losses)
    assert m.to_csv().splitlines()[0] == "step,loss,tokens_per_sec"


def test_timing_column_when_clock_given(small_setup):
    cfg, tr, _ = small_setup
    m = train(materialize(cfg), tr, 2)
    assert all(t is not None and t > 0 for t in m.tokens_per_sec)


def test_divergence_guard(small_setup):
    cfg, tr, _ = small_setup
    with pytest.raises(TrainingDiverged, match="initial"):
        train(materialize(cfg), tr, 30, learning_rate=50.0, clock=None)


def test_rejects_zero_steps(small_setup):
    cfg, tr, _ = small_setup
    with pytest.raises(ValueError):
        train(materialize(cfg), tr, 0)


def test_zero_model_ppl():
    cfg = desk_config("NL1-TY", vocab_size=132).replace(d_model=8, d_ff=8, n_heads=1, d_kv=8)
    m = materialize(cfg, precision="double")
    for k in m.params:
        m.params[k][...] = 0
    held = synth_corpus(0, 10, 16, 132)
    assert evaluate_ppl(m, held) == pytest.approx(-math.log(132), abs=1e-12)


def test_evaluate_twice_identical(small_setup):
    cfg, _, held = small_setup
    m = materialize(cfg)
    assert evaluate_ppl(m, held) == evaluate_ppl(m, held)


def test_evaluate_accepts_examples(small_setup):
    cfg, _, held = small_setup
    exs = [span_corrupt(r, seed=i, vocab_size=V) for i, r in enumerate(held)]
    assert isinstance(exs[0], CorruptedExample)
    assert math.isfinite(evaluate_ppl(materialize(cfg), exs))


def test_empty_held_out(small_setup):
    cfg, _, _ = small_setup
    with pytest.raises(ValueError):
        evaluate_ppl(materialize(cfg), [])


def test_training_improves_held_out(small_setup):
    cfg, tr, held = small_setup
    model = materialize(cfg, precision="double")
    before = evaluate_ppl(model, held)
    metrics = train(model, tr, 60, held_out=held, clock=None)
    assert metrics.held_out_log_ppl > before


@pytest.mark.slow
def test_deepest_not_worse_than_shallowest():
    # Measured at 200 steps: NL2 -4.361, NL8 -4.402. At 500 steps: NL2 -4.100, NL8 -4.117.
    # The property does not hold at desk scale, so this test is expected to fail.
    corpus = synth_corpus(seed=0, n_sequences=2000, seq_len=48, vocab_size=V)
    train_rows, held_out = split_corpus(corpus)
    ppl = {}
    for code in ("NL2-TY", "NL8-TY"):
        model = materialize(desk_config(code), seed=0, precision="double")
        ppl[code] = train(model, train_rows, 200, batch_size=8, learning_rate=1e-3, seed=0,
                          held_out=held_out, clock=None).held_out_log_ppl
    assert ppl["NL8-TY"] >= ppl["NL2-TY"]
